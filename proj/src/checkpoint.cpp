#include "genrec/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "genrec/errors.hpp"

namespace genrec {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); }

uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const uint64_t len = read_u64(is);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    return s;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint file for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_string(os, ckpt.meta_json);
    write_u64(os, ckpt.params.size());
    for (const auto& [name, entry] : ckpt.params) {
        write_string(os, name);
        write_u64(os, entry.value.shape().size());
        for (int64_t d : entry.value.shape()) write_u64(os, static_cast<uint64_t>(d));
        os.write(reinterpret_cast<const char*>(entry.value.data()),
                 static_cast<std::streamsize>(entry.value.size() * static_cast<int64_t>(sizeof(double))));
    }
    if (!os) throw DataError("failed while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint file: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    Checkpoint ckpt;
    ckpt.meta_json = read_string(is);
    const uint64_t count = read_u64(is);
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(is);
        const uint64_t rank = read_u64(is);
        std::vector<int64_t> shape(rank);
        for (uint64_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(read_u64(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * static_cast<int64_t>(sizeof(double))));
        if (!is) throw DataError("truncated checkpoint file: " + path);
        ckpt.params.add(name, std::move(t));
    }
    return ckpt;
}

} // namespace genrec
