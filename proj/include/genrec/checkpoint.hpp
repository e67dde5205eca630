#pragma once

#include <string>

#include "genrec/params.hpp"

namespace genrec {

// Binary named-tensor dump: magic + version, a JSON metadata blob, then raw
// little-endian f64 payloads. save -> load -> forward is bitwise stable.
struct Checkpoint {
    std::string meta_json;    // module config, free-form
    ParameterSet params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace genrec
