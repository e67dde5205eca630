#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "genrec/tensor.hpp"

namespace genrec {

// Raw interactions: one user per line, "user<TAB>item,item,...", chronological
// left to right.
struct RawInteractions {
    std::vector<std::pair<std::string, std::vector<std::string>>> users;
};

RawInteractions load_interactions(const std::string& path);
void write_interactions(const std::string& path, const RawInteractions& raw);

// Iteratively removes users and items with fewer than min_count interactions
// until a fixpoint.
RawInteractions five_core_filter(const RawInteractions& raw, int min_count = 5);

// Catalog-indexed dataset with per-user leave-one-out splits.
struct UserSplit {
    std::string user_id;
    std::vector<int> train;  // chronological prefix (item indices), truncated to max_len
    int validation = -1;
    int test = -1;
};

struct InteractionDataset {
    std::vector<std::string> item_ids;          // index -> raw id
    std::map<std::string, int> item_index;      // raw id -> index
    std::vector<UserSplit> users;
    int max_len = 20;
};

InteractionDataset leave_one_out_split(const RawInteractions& filtered, int max_len = 20);

// Embeddings file: header "num_items dim", then "item_id v1 ... v_dim".
struct EmbeddingFile {
    int dim = 0;
    std::map<std::string, std::vector<double>> rows;
};

EmbeddingFile load_embeddings(const std::string& path);
void write_embeddings(const std::string& path, const EmbeddingFile& table);

// (catalog x dim) matrix aligned to dataset item indices; every catalog item
// must be covered.
Tensor assemble_embedding_matrix(const InteractionDataset& dataset, const EmbeddingFile& table);

// Synthetic corpus with a known-optimal next-item rule: items sit on cluster
// centers (plus optional noise) and user sequences follow the successor
// permutation item j -> (j+1) mod N, so the correct next item is always
// determined by the last one.
struct SynthConfig {
    int items = 50;
    int users = 200;
    int clusters = 50;
    int seq_len = 8;
    double noise = 0.0;
    int embed_dim = 16;
    uint64_t seed = 1;

    void validate() const;
};

struct SynthData {
    RawInteractions interactions;
    EmbeddingFile embeddings;
};

SynthData synthesize(const SynthConfig& cfg);

// the generator's ground-truth rule
int synth_next_item(const SynthConfig& cfg, int item);

} // namespace genrec
