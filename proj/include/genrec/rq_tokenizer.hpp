#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "genrec/checkpoint.hpp"
#include "genrec/graph.hpp"
#include "genrec/params.hpp"
#include "genrec/tensor.hpp"

namespace genrec {

struct TokenizerConfig {
    int levels = 4;          // L
    int codebook_size = 256; // K
    int d_in = 0;
    int d_code = 32;
    std::vector<int> encoder_hidden = {512, 256};
    std::vector<int> decoder_hidden = {256, 512};
    double beta = 0.25;

    void validate() const;
};

struct ItemIdentifier {
    std::vector<int> tokens; // length L, each in [0, K)

    bool operator==(const ItemIdentifier& o) const { return tokens == o.tokens; }
    bool operator<(const ItemIdentifier& o) const { return tokens < o.tokens; }
};

// Per-item quantization record (value level). residuals[l] is the vector the
// level-(l+1) codebook was queried with; final_residual is what remains after
// the last level.
struct QuantizationTrace {
    std::vector<Tensor> residuals; // L vectors of width d_code
    std::vector<Tensor> probs;     // L distributions over K
    ItemIdentifier identifier;
    Tensor quantized;      // width d_code
    Tensor final_residual; // width d_code
};

// Batched, graph-connected quantization used by the losses and the
// recommender's soft embeddings.
struct BatchQuantization {
    std::vector<Var> residuals;          // per level, (n, d_code)
    std::vector<Var> probs;              // per level, (n, K)
    std::vector<std::vector<int64_t>> codes; // per level, n selected indices
    Var quantized;                       // (n, d_code)
};

struct CollisionReport {
    // identifiers shared by more than one item; item indices ascending
    std::vector<std::pair<ItemIdentifier, std::vector<int>>> groups;
    bool empty() const { return groups.empty(); }
};

// softmax over codewords of the negative squared distance to v
Tensor assignment_distribution(const Tensor& v, const Tensor& codebook);

// Residual-quantizing autoencoder over item embeddings: MLP encoder, L
// codebooks queried greedily on successive residuals, MLP decoder.
class RqTokenizer {
public:
    explicit RqTokenizer(TokenizerConfig cfg);

    const TokenizerConfig& config() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    void init_parameters(uint64_t seed);

    // ---- graph forwards (rows = items) ----
    Var encode(Graph& g, const ParamVars& v, Var z) const;
    BatchQuantization quantize(Graph& g, const ParamVars& v, Var r) const;
    Var reconstruct(Graph& g, const ParamVars& v, Var quantized) const;
    // weights: per-row multiplicity (occurrence counts); empty means all-ones
    Var tokenization_loss(Graph& g, const ParamVars& v, Var z, const std::vector<double>& weights = {},
                          SgTape* tape = nullptr) const;

    // ---- value-level surface ----
    Tensor encode_values(const Tensor& z) const;           // (n,d_in) or (d_in)
    Tensor reconstruct_values(const Tensor& quantized) const;
    QuantizationTrace quantize_one(const Tensor& r) const; // r of width d_code
    Tensor level_distribution(const Tensor& v, int level) const;

    ItemIdentifier tokenize_one(const Tensor& z) const;
    // embeddings: (N, d_in); identifiers indexed by item
    std::pair<std::vector<ItemIdentifier>, CollisionReport> tokenize_catalog(const Tensor& embeddings) const;

    // Level-by-level k-means over encoded vectors and their residuals.
    void kmeans_init(const Tensor& embeddings, uint64_t seed);

    struct PretrainOptions {
        int epochs = 0;
        double lr = 1e-3;
        double weight_decay = 1e-4;
        int batch_size = 1024;
        uint64_t seed = 0;
    };
    struct PretrainLog {
        std::vector<double> epoch_loss; // mean per-item loss, one entry per epoch
    };
    PretrainLog pretrain(const Tensor& embeddings, const PretrainOptions& opt);

    Checkpoint to_checkpoint() const;
    static RqTokenizer from_checkpoint(const Checkpoint& ckpt);

private:
    TokenizerConfig cfg_;
    ParameterSet params_;

    std::vector<int> encoder_widths() const;
    std::vector<int> decoder_widths() const;
};

// Lloyd's algorithm: fixed budget, seeded start, empty clusters re-seeded to
// the farthest point, fewer-distinct-points-than-K padded with perturbed
// duplicates. Returns (K, d) centroids.
Tensor kmeans_centroids(const Tensor& points, int k, uint64_t seed, int max_iters = 50, double move_tol = 1e-6);

} // namespace genrec
