#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "genrec/checkpoint.hpp"
#include "genrec/graph.hpp"
#include "genrec/params.hpp"
#include "genrec/rng.hpp"
#include "genrec/rq_tokenizer.hpp"
#include "genrec/tensor.hpp"

namespace genrec {

// Token layout: token (level l, code c) -> l*K + c for l in [0,L); BOS and PAD
// sit after the code block.
struct Vocabulary {
    int levels = 0;
    int codebook_size = 0;

    int size() const { return levels * codebook_size + 2; }
    int token_index(int level, int code) const { return level * codebook_size + code; }
    int bos() const { return levels * codebook_size; }
    int pad() const { return levels * codebook_size + 1; }
};

// zero-pad a level's K-distribution out to vocabulary size (level is 0-based)
Tensor pad_distribution(const Vocabulary& vocab, int level, const Tensor& probs);

// Value-level mixed token per the straight-through construction.
struct MixedToken {
    Tensor hard;
    Tensor soft;
    Tensor mixed; // equals hard bit-for-bit
};
MixedToken mixed_token(const Tensor& vocab_embed, int hard_index, const Tensor& padded_probs);

struct RecommenderConfig {
    int d_model = 64;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int heads = 2;
    int head_dim = 32;
    int ff_dim = 256;
    double dropout = 0.1;
    int max_items = 20; // history length T in items; max input tokens = T*L

    void validate() const;
};

struct Dropout {
    double p = 0.0;
    Rng* rng = nullptr; // null disables
};

// One training/eval example: item indices into the catalog, -1 marks padding.
struct RecExample {
    std::vector<int> history; // length T, left-padded with -1
    int target = -1;
};

// Transformer encoder-decoder over identifier tokens with weight-tied output
// and straight-through mixed embeddings on both input and target sides.
class SeqRecommender {
public:
    SeqRecommender(RecommenderConfig cfg, Vocabulary vocab);

    const RecommenderConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    void init_parameters(uint64_t seed);

    // ---- graph forwards ----
    // emb: (B*S, d_model) already position-augmented; key_valid: B*S flags
    Var encoder_forward(Graph& g, const ParamVars& v, Var emb, int64_t batch, int64_t seq,
                        const std::vector<char>& key_valid, const Dropout& drop = {}) const;
    // tgt_emb: (B*St, d_model); causal self-attention, cross-attention over h_enc
    Var decoder_forward(Graph& g, const ParamVars& v, Var h_enc, Var tgt_emb, int64_t batch, int64_t enc_seq,
                        int64_t tgt_seq, const std::vector<char>& enc_key_valid, const Dropout& drop = {}) const;
    // weight-tied logits: rows @ E_V^T
    Var score_rows(Graph& g, const ParamVars& v, Var h_rows) const;

    // Full differentiable loss: tokenize batch items on the fly through the
    // tokenizer (phi vars), embed with mixed representations, teacher-force the
    // target identifier. Loss is summed over levels, averaged over the batch.
    Var recommendation_loss(Graph& g, const ParamVars& theta, const ParamVars& phi, const RqTokenizer& tokenizer,
                            const Tensor& catalog_embeddings, const std::vector<RecExample>& batch,
                            const Dropout& drop = {}, SgTape* tape = nullptr) const;

    // value-level loss (no gradients kept)
    double recommendation_loss_value(const RqTokenizer& tokenizer, const Tensor& catalog_embeddings,
                                     const std::vector<RecExample>& batch) const;

    Checkpoint to_checkpoint() const;
    static SeqRecommender from_checkpoint(const Checkpoint& ckpt);

private:
    RecommenderConfig cfg_;
    Vocabulary vocab_;
    ParameterSet params_;

    friend class ScoringSession;

    Var attention(Graph& g, const ParamVars& v, const std::string& prefix, Var x_q, Var x_kv, int64_t batch,
                  int64_t q_seq, int64_t kv_seq, const Tensor& mask, const Dropout& drop) const;
    Var ffn_block(Graph& g, const ParamVars& v, const std::string& prefix, Var x, const Dropout& drop) const;
};

// Forward-only decoding surface: encodes a batch of histories once (hard token
// embeddings, dropout off) and scores next-token continuations of prefixes.
class ScoringSession {
public:
    ScoringSession(const SeqRecommender& model, const std::vector<ItemIdentifier>& catalog_ids,
                   const std::vector<std::vector<int>>& histories);

    int64_t user_count() const { return batch_; }

    struct PrefixQuery {
        int user = 0;                 // row in this session's history batch
        std::vector<int> codes;       // chosen codes per level so far (may be empty)
    };
    // (n, V) log-probabilities over the next token, one row per query; all
    // queries must share the same prefix length
    Tensor next_token_logprobs(const std::vector<PrefixQuery>& queries) const;

private:
    const SeqRecommender& model_;
    int64_t batch_ = 0;
    int64_t enc_seq_ = 0;
    Tensor h_enc_;                 // (B*S, d_model) values
    std::vector<char> enc_valid_;  // B*S
};

} // namespace genrec
