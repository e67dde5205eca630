#include "genrec/seq_recommender.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "genrec/errors.hpp"

namespace genrec {

using nlohmann::json;

void RecommenderConfig::validate() const {
    if (d_model < 1) throw ConfigError("recommender.d_model must be >= 1");
    if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("recommender layer counts must be >= 1");
    if (heads < 1 || head_dim < 1) throw ConfigError("recommender.heads and head_dim must be >= 1");
    if (ff_dim < 1) throw ConfigError("recommender.ff_dim must be >= 1");
    if (max_items < 1) throw ConfigError("recommender.max_items must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("recommender.dropout must be in [0,1)");
}

Tensor pad_distribution(const Vocabulary& vocab, int level, const Tensor& probs) {
    if (level < 0 || level >= vocab.levels) throw GraphError("pad_distribution: invalid level " + std::to_string(level));
    if (probs.rank() != 1 || probs.dim(0) != vocab.codebook_size) {
        throw GraphError("pad_distribution: expected a length-" + std::to_string(vocab.codebook_size) + " distribution");
    }
    Tensor out({static_cast<int64_t>(vocab.size())});
    const int64_t base = static_cast<int64_t>(level) * vocab.codebook_size;
    for (int64_t c = 0; c < vocab.codebook_size; ++c) out[base + c] = probs[c];
    return out;
}

MixedToken mixed_token(const Tensor& vocab_embed, int hard_index, const Tensor& padded_probs) {
    if (vocab_embed.rank() != 2) throw GraphError("mixed_token: embeddings must be (V,d)");
    const int64_t v = vocab_embed.dim(0), d = vocab_embed.dim(1);
    if (hard_index < 0 || hard_index >= v) throw GraphError("mixed_token: hard index out of range");
    if (padded_probs.rank() != 1 || padded_probs.dim(0) != v) throw GraphError("mixed_token: bad distribution width");

    MixedToken out;
    out.hard = Tensor({d}, std::vector<double>(vocab_embed.data() + hard_index * d, vocab_embed.data() + (hard_index + 1) * d));
    out.soft = Tensor({d});
    for (int64_t r = 0; r < v; ++r) {
        const double w = padded_probs[r];
        for (int64_t j = 0; j < d; ++j) out.soft[j] += w * vocab_embed[r * d + j];
    }
    out.mixed = out.hard;
    return out;
}

namespace {

ParamVars make_constants(Graph& g, const ParameterSet& params) {
    ParamVars vars;
    for (const auto& [name, e] : params) vars.emplace(name, constant(g, e.value));
    return vars;
}

Var apply_dropout(Graph& g, Var x, const Dropout& drop) {
    if (drop.p <= 0.0 || drop.rng == nullptr) return x;
    const Tensor& xv = g.value(x);
    Tensor mask(xv.shape());
    const double keep = 1.0 - drop.p;
    for (int64_t i = 0; i < mask.size(); ++i) {
        mask[i] = drop.rng->next_double() < keep ? 1.0 / keep : 0.0;
    }
    return mul(x, constant(g, std::move(mask)));
}

// additive mask: 0 where attendable, -1e30 where blocked
Tensor attention_mask(int64_t batch, int64_t heads, int64_t q_seq, int64_t kv_seq, const std::vector<char>* key_valid,
                      bool causal) {
    Tensor m({batch * heads, q_seq, kv_seq});
    int64_t p = 0;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < q_seq; ++i) {
                for (int64_t j = 0; j < kv_seq; ++j, ++p) {
                    const bool blocked =
                        (causal && j > i) || (key_valid != nullptr && !(*key_valid)[static_cast<size_t>(b * kv_seq + j)]);
                    m[p] = blocked ? -1e30 : 0.0;
                }
            }
        }
    }
    return m;
}

std::vector<int64_t> iota64(int64_t n) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
}

} // namespace

SeqRecommender::SeqRecommender(RecommenderConfig cfg, Vocabulary vocab) : cfg_(cfg), vocab_(vocab) {
    cfg_.validate();
    if (vocab_.levels < 1 || vocab_.codebook_size < 2) throw ConfigError("recommender vocabulary is malformed");
}

void SeqRecommender::init_parameters(uint64_t seed) {
    params_ = ParameterSet();
    Rng rng(seed);
    const int d = cfg_.d_model;
    const int hd = cfg_.heads * cfg_.head_dim;
    auto randn = [&rng](std::vector<int64_t> shape, double std) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.size(); ++i) t[i] = std * rng.next_normal();
        return t;
    };
    auto add_ln = [&](const std::string& name) {
        params_.add(name + ".g", Tensor::full({d}, 1.0));
        params_.add(name + ".b", Tensor::zeros({d}));
    };
    auto add_attn = [&](const std::string& name) {
        params_.add(name + ".wq", randn({d, hd}, 0.02));
        params_.add(name + ".wk", randn({d, hd}, 0.02));
        params_.add(name + ".wv", randn({d, hd}, 0.02));
        params_.add(name + ".wo", randn({hd, d}, 0.02));
    };
    auto add_ffn = [&](const std::string& name) {
        params_.add(name + ".w1", randn({d, cfg_.ff_dim}, 0.02));
        params_.add(name + ".b1", Tensor::zeros({cfg_.ff_dim}));
        params_.add(name + ".w2", randn({cfg_.ff_dim, d}, 0.02));
        params_.add(name + ".b2", Tensor::zeros({d}));
    };

    params_.add("vocab.embed", randn({vocab_.size(), d}, 0.02));
    params_.add("pos.enc", randn({static_cast<int64_t>(cfg_.max_items) * vocab_.levels, d}, 0.02));
    params_.add("pos.dec", randn({static_cast<int64_t>(vocab_.levels) + 1, d}, 0.02));

    for (int i = 0; i < cfg_.encoder_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        add_ln(p + ".ln1");
        add_attn(p + ".attn");
        add_ln(p + ".ln2");
        add_ffn(p + ".ffn");
    }
    add_ln("enc.final");
    for (int i = 0; i < cfg_.decoder_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        add_ln(p + ".ln1");
        add_attn(p + ".self");
        add_ln(p + ".ln2");
        add_attn(p + ".cross");
        add_ln(p + ".ln3");
        add_ffn(p + ".ffn");
    }
    add_ln("dec.final");
}

Var SeqRecommender::attention(Graph& g, const ParamVars& v, const std::string& prefix, Var x_q, Var x_kv, int64_t batch,
                              int64_t q_seq, int64_t kv_seq, const Tensor& mask, const Dropout& drop) const {
    const int64_t h = cfg_.heads;
    const int64_t dh = cfg_.head_dim;

    auto split_heads = [&](Var x, int64_t seq) {
        return reshape(permute(reshape(x, {batch, seq, h, dh}), {0, 2, 1, 3}), {batch * h, seq, dh});
    };
    Var q = split_heads(matmul(x_q, v.at(prefix + ".wq")), q_seq);
    Var k = split_heads(matmul(x_kv, v.at(prefix + ".wk")), kv_seq);
    Var val = split_heads(matmul(x_kv, v.at(prefix + ".wv")), kv_seq);

    Var scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = add(scores, constant(g, mask));
    Var probs = apply_dropout(g, softmax_last(scores), drop);
    Var ctx = bmm(probs, val); // (B*H, Tq, dh)
    Var merged = reshape(permute(reshape(ctx, {batch, h, q_seq, dh}), {0, 2, 1, 3}), {batch * q_seq, h * dh});
    return matmul(merged, v.at(prefix + ".wo"));
}

Var SeqRecommender::ffn_block(Graph& g, const ParamVars& v, const std::string& prefix, Var x, const Dropout& drop) const {
    Var h = relu(affine(x, v.at(prefix + ".w1"), v.at(prefix + ".b1")));
    (void)g;
    return apply_dropout(g, affine(h, v.at(prefix + ".w2"), v.at(prefix + ".b2")), drop);
}

Var SeqRecommender::encoder_forward(Graph& g, const ParamVars& v, Var emb, int64_t batch, int64_t seq,
                                    const std::vector<char>& key_valid, const Dropout& drop) const {
    if (g.value(emb).dim(0) != batch * seq) throw GraphError("encoder_forward: row count mismatch");
    if (seq > static_cast<int64_t>(cfg_.max_items) * vocab_.levels) {
        throw GraphError("encoder_forward: input longer than " + std::to_string(cfg_.max_items * vocab_.levels) +
                         " tokens");
    }
    Tensor mask = attention_mask(batch, cfg_.heads, seq, seq, key_valid.empty() ? nullptr : &key_valid, false);
    Var x = emb;
    for (int i = 0; i < cfg_.encoder_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        Var h = layer_norm(x, v.at(p + ".ln1.g"), v.at(p + ".ln1.b"));
        x = add(x, apply_dropout(g, attention(g, v, p + ".attn", h, h, batch, seq, seq, mask, drop), drop));
        Var h2 = layer_norm(x, v.at(p + ".ln2.g"), v.at(p + ".ln2.b"));
        x = add(x, ffn_block(g, v, p + ".ffn", h2, drop));
    }
    return layer_norm(x, v.at("enc.final.g"), v.at("enc.final.b"));
}

Var SeqRecommender::decoder_forward(Graph& g, const ParamVars& v, Var h_enc, Var tgt_emb, int64_t batch, int64_t enc_seq,
                                    int64_t tgt_seq, const std::vector<char>& enc_key_valid, const Dropout& drop) const {
    if (g.value(tgt_emb).dim(0) != batch * tgt_seq) throw GraphError("decoder_forward: target row count mismatch");
    if (g.value(h_enc).dim(0) != batch * enc_seq) throw GraphError("decoder_forward: encoder row count mismatch");
    Tensor self_mask = attention_mask(batch, cfg_.heads, tgt_seq, tgt_seq, nullptr, true);
    Tensor cross_mask =
        attention_mask(batch, cfg_.heads, tgt_seq, enc_seq, enc_key_valid.empty() ? nullptr : &enc_key_valid, false);
    Var x = tgt_emb;
    for (int i = 0; i < cfg_.decoder_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        Var h = layer_norm(x, v.at(p + ".ln1.g"), v.at(p + ".ln1.b"));
        x = add(x, apply_dropout(g, attention(g, v, p + ".self", h, h, batch, tgt_seq, tgt_seq, self_mask, drop), drop));
        Var h2 = layer_norm(x, v.at(p + ".ln2.g"), v.at(p + ".ln2.b"));
        x = add(x, apply_dropout(g, attention(g, v, p + ".cross", h2, h_enc, batch, tgt_seq, enc_seq, cross_mask, drop),
                                 drop));
        Var h3 = layer_norm(x, v.at(p + ".ln3.g"), v.at(p + ".ln3.b"));
        x = add(x, ffn_block(g, v, p + ".ffn", h3, drop));
    }
    return layer_norm(x, v.at("dec.final.g"), v.at("dec.final.b"));
}

Var SeqRecommender::score_rows(Graph& g, const ParamVars& v, Var h_rows) const {
    (void)g;
    return matmul(h_rows, transpose(v.at("vocab.embed")));
}

Var SeqRecommender::recommendation_loss(Graph& g, const ParamVars& theta, const ParamVars& phi,
                                        const RqTokenizer& tokenizer, const Tensor& catalog_embeddings,
                                        const std::vector<RecExample>& batch, const Dropout& drop, SgTape* tape) const {
    const int64_t bsz = static_cast<int64_t>(batch.size());
    if (bsz == 0) throw GraphError("recommendation_loss: empty batch");
    const int levels = vocab_.levels;
    const int64_t k = vocab_.codebook_size;
    const int64_t t_items = cfg_.max_items;
    const int64_t d_in = tokenizer.config().d_in;

    // unique items referenced in this batch, tokenized on the fly
    std::map<int, int64_t> uid;
    std::vector<int> uniq;
    auto intern = [&](int item) {
        if (item < 0) return;
        if (uid.emplace(item, static_cast<int64_t>(uniq.size())).second) uniq.push_back(item);
    };
    for (const RecExample& ex : batch) {
        if (static_cast<int64_t>(ex.history.size()) != t_items) {
            throw GraphError("recommendation_loss: history must have exactly " + std::to_string(t_items) + " slots");
        }
        if (ex.target < 0) throw GraphError("recommendation_loss: example lacks a target item");
        for (int it : ex.history) intern(it);
        intern(ex.target);
    }
    const int64_t u = static_cast<int64_t>(uniq.size());

    Tensor zu({u, d_in});
    for (int64_t i = 0; i < u; ++i) {
        const int item = uniq[static_cast<size_t>(i)];
        std::copy(catalog_embeddings.data() + item * d_in, catalog_embeddings.data() + (item + 1) * d_in,
                  zu.data() + i * d_in);
    }
    BatchQuantization quant = tokenizer.quantize(g, phi, tokenizer.encode(g, phi, constant(g, zu)));

    // per-level mixed embedding rows for the unique items, then the raw
    // vocabulary block for BOS/PAD
    Var e_vocab = theta.at("vocab.embed");
    std::vector<Var> blocks;
    for (int l = 0; l < levels; ++l) {
        std::vector<int64_t> hard_idx(static_cast<size_t>(u));
        for (int64_t i = 0; i < u; ++i) {
            hard_idx[static_cast<size_t>(i)] =
                vocab_.token_index(l, static_cast<int>(quant.codes[static_cast<size_t>(l)][static_cast<size_t>(i)]));
        }
        Var hard = gather_rows(e_vocab, hard_idx);
        Var soft = matmul(quant.probs[static_cast<size_t>(l)], slice0(e_vocab, static_cast<int64_t>(l) * k, k));
        blocks.push_back(SgTape::apply_mixed(tape, hard, soft));
    }
    blocks.push_back(e_vocab);
    Var table = concat0(blocks);
    const int64_t raw_base = static_cast<int64_t>(levels) * u;

    // encoder input: history items expand to L tokens each, PAD slots to PAD
    const int64_t enc_seq = t_items * levels;
    std::vector<int64_t> in_idx(static_cast<size_t>(bsz * enc_seq));
    std::vector<int64_t> in_pos(static_cast<size_t>(bsz * enc_seq));
    std::vector<char> key_valid(static_cast<size_t>(bsz * enc_seq));
    for (int64_t b = 0; b < bsz; ++b) {
        for (int64_t t = 0; t < t_items; ++t) {
            const int item = batch[static_cast<size_t>(b)].history[static_cast<size_t>(t)];
            for (int l = 0; l < levels; ++l) {
                const int64_t p = t * levels + l;
                const int64_t row = b * enc_seq + p;
                in_idx[static_cast<size_t>(row)] =
                    item < 0 ? raw_base + vocab_.pad() : static_cast<int64_t>(l) * u + uid.at(item);
                in_pos[static_cast<size_t>(row)] = p;
                key_valid[static_cast<size_t>(row)] = item >= 0;
            }
        }
    }
    std::vector<int64_t> pos_rows = in_pos;
    Var enc_in = add(gather_rows(table, in_idx), gather_rows(theta.at("pos.enc"), pos_rows));
    enc_in = apply_dropout(g, enc_in, drop);
    Var h_enc = encoder_forward(g, theta, enc_in, bsz, enc_seq, key_valid, drop);

    // decoder input: BOS + the target identifier, teacher forced
    const int64_t tgt_seq = levels + 1;
    std::vector<int64_t> tgt_idx(static_cast<size_t>(bsz * tgt_seq));
    std::vector<int64_t> tgt_pos(static_cast<size_t>(bsz * tgt_seq));
    for (int64_t b = 0; b < bsz; ++b) {
        tgt_idx[static_cast<size_t>(b * tgt_seq)] = raw_base + vocab_.bos();
        tgt_pos[static_cast<size_t>(b * tgt_seq)] = 0;
        const int64_t tu = uid.at(batch[static_cast<size_t>(b)].target);
        for (int l = 0; l < levels; ++l) {
            tgt_idx[static_cast<size_t>(b * tgt_seq + 1 + l)] = static_cast<int64_t>(l) * u + tu;
            tgt_pos[static_cast<size_t>(b * tgt_seq + 1 + l)] = 1 + l;
        }
    }
    Var dec_in = add(gather_rows(table, tgt_idx), gather_rows(theta.at("pos.dec"), tgt_pos));
    dec_in = apply_dropout(g, dec_in, drop);
    Var h_dec = decoder_forward(g, theta, h_enc, dec_in, bsz, enc_seq, tgt_seq, key_valid, drop);

    // positions 0..L-1 predict the L identifier tokens
    std::vector<int64_t> sel(static_cast<size_t>(bsz) * levels);
    std::vector<int64_t> targets(static_cast<size_t>(bsz) * levels);
    for (int64_t b = 0; b < bsz; ++b) {
        const int64_t tu = uid.at(batch[static_cast<size_t>(b)].target);
        for (int l = 0; l < levels; ++l) {
            sel[static_cast<size_t>(b * levels + l)] = b * tgt_seq + l;
            targets[static_cast<size_t>(b * levels + l)] =
                vocab_.token_index(l, static_cast<int>(quant.codes[static_cast<size_t>(l)][static_cast<size_t>(tu)]));
        }
    }
    Var logits = score_rows(g, theta, gather_rows(h_dec, sel));
    Var nll = cross_entropy_from_logits(logits, targets);
    return scale(sum_all(nll), 1.0 / static_cast<double>(bsz));
}

double SeqRecommender::recommendation_loss_value(const RqTokenizer& tokenizer, const Tensor& catalog_embeddings,
                                                 const std::vector<RecExample>& batch) const {
    Graph g;
    ParamVars theta = make_constants(g, params_);
    ParamVars phi = make_constants(g, tokenizer.params());
    Var loss = recommendation_loss(g, theta, phi, tokenizer, catalog_embeddings, batch);
    return g.value(loss)[0];
}

Checkpoint SeqRecommender::to_checkpoint() const {
    json meta;
    meta["kind"] = "seq_recommender";
    meta["d_model"] = cfg_.d_model;
    meta["encoder_layers"] = cfg_.encoder_layers;
    meta["decoder_layers"] = cfg_.decoder_layers;
    meta["heads"] = cfg_.heads;
    meta["head_dim"] = cfg_.head_dim;
    meta["ff_dim"] = cfg_.ff_dim;
    meta["dropout"] = cfg_.dropout;
    meta["max_items"] = cfg_.max_items;
    meta["levels"] = vocab_.levels;
    meta["codebook_size"] = vocab_.codebook_size;
    Checkpoint ckpt;
    ckpt.meta_json = meta.dump();
    ckpt.params = params_;
    return ckpt;
}

SeqRecommender SeqRecommender::from_checkpoint(const Checkpoint& ckpt) {
    json meta = json::parse(ckpt.meta_json);
    if (meta.value("kind", "") != "seq_recommender") throw DataError("checkpoint is not a recommender checkpoint");
    RecommenderConfig cfg;
    cfg.d_model = meta.at("d_model").get<int>();
    cfg.encoder_layers = meta.at("encoder_layers").get<int>();
    cfg.decoder_layers = meta.at("decoder_layers").get<int>();
    cfg.heads = meta.at("heads").get<int>();
    cfg.head_dim = meta.at("head_dim").get<int>();
    cfg.ff_dim = meta.at("ff_dim").get<int>();
    cfg.dropout = meta.at("dropout").get<double>();
    cfg.max_items = meta.at("max_items").get<int>();
    Vocabulary vocab;
    vocab.levels = meta.at("levels").get<int>();
    vocab.codebook_size = meta.at("codebook_size").get<int>();
    SeqRecommender model(cfg, vocab);
    model.params_ = ckpt.params;
    return model;
}

// ---------------------------------------------------------------------------
// ScoringSession
// ---------------------------------------------------------------------------

ScoringSession::ScoringSession(const SeqRecommender& model, const std::vector<ItemIdentifier>& catalog_ids,
                               const std::vector<std::vector<int>>& histories)
    : model_(model) {
    const Vocabulary& vocab = model.vocab();
    const int levels = vocab.levels;
    const int64_t t_items = model.config().max_items;
    batch_ = static_cast<int64_t>(histories.size());
    if (batch_ == 0) throw GraphError("ScoringSession: empty history batch");
    enc_seq_ = t_items * levels;

    std::vector<int64_t> in_idx(static_cast<size_t>(batch_ * enc_seq_));
    std::vector<int64_t> in_pos(static_cast<size_t>(batch_ * enc_seq_));
    enc_valid_.assign(static_cast<size_t>(batch_ * enc_seq_), 0);
    for (int64_t b = 0; b < batch_; ++b) {
        const std::vector<int>& hist = histories[static_cast<size_t>(b)];
        if (static_cast<int64_t>(hist.size()) != t_items) {
            throw GraphError("ScoringSession: history must have exactly " + std::to_string(t_items) + " slots");
        }
        for (int64_t t = 0; t < t_items; ++t) {
            const int item = hist[static_cast<size_t>(t)];
            for (int l = 0; l < levels; ++l) {
                const int64_t p = t * levels + l;
                const int64_t row = b * enc_seq_ + p;
                if (item < 0) {
                    in_idx[static_cast<size_t>(row)] = vocab.pad();
                } else {
                    in_idx[static_cast<size_t>(row)] =
                        vocab.token_index(l, catalog_ids[static_cast<size_t>(item)].tokens[static_cast<size_t>(l)]);
                }
                in_pos[static_cast<size_t>(row)] = p;
                enc_valid_[static_cast<size_t>(row)] = item >= 0;
            }
        }
    }

    Graph g;
    ParamVars v = make_constants(g, model.params());
    Var emb = add(gather_rows(v.at("vocab.embed"), in_idx), gather_rows(v.at("pos.enc"), in_pos));
    Var h = model.encoder_forward(g, v, emb, batch_, enc_seq_, enc_valid_);
    h_enc_ = g.value(h);
}

Tensor ScoringSession::next_token_logprobs(const std::vector<PrefixQuery>& queries) const {
    const int64_t n = static_cast<int64_t>(queries.size());
    if (n == 0) return Tensor({0, static_cast<int64_t>(model_.vocab().size())});
    const size_t plen = queries[0].codes.size();
    for (const PrefixQuery& q : queries) {
        if (q.codes.size() != plen) throw GraphError("next_token_logprobs: queries must share a prefix length");
        if (q.user < 0 || q.user >= batch_) throw GraphError("next_token_logprobs: user row out of range");
    }
    const Vocabulary& vocab = model_.vocab();
    const int64_t tgt_seq = static_cast<int64_t>(plen) + 1;

    std::vector<int64_t> tgt_idx(static_cast<size_t>(n * tgt_seq));
    std::vector<int64_t> tgt_pos(static_cast<size_t>(n * tgt_seq));
    std::vector<int64_t> enc_rows(static_cast<size_t>(n * enc_seq_));
    std::vector<char> valid(static_cast<size_t>(n * enc_seq_));
    for (int64_t i = 0; i < n; ++i) {
        tgt_idx[static_cast<size_t>(i * tgt_seq)] = vocab.bos();
        tgt_pos[static_cast<size_t>(i * tgt_seq)] = 0;
        for (size_t l = 0; l < plen; ++l) {
            tgt_idx[static_cast<size_t>(i * tgt_seq) + 1 + l] =
                vocab.token_index(static_cast<int>(l), queries[static_cast<size_t>(i)].codes[l]);
            tgt_pos[static_cast<size_t>(i * tgt_seq) + 1 + l] = static_cast<int64_t>(l) + 1;
        }
        const int64_t ub = static_cast<int64_t>(queries[static_cast<size_t>(i)].user) * enc_seq_;
        for (int64_t p = 0; p < enc_seq_; ++p) {
            enc_rows[static_cast<size_t>(i * enc_seq_ + p)] = ub + p;
            valid[static_cast<size_t>(i * enc_seq_ + p)] = enc_valid_[static_cast<size_t>(ub + p)];
        }
    }

    Graph g;
    ParamVars v = make_constants(g, model_.params());
    Var h_enc = gather_rows(constant(g, h_enc_), enc_rows);
    Var emb = add(gather_rows(v.at("vocab.embed"), tgt_idx), gather_rows(v.at("pos.dec"), tgt_pos));
    Var h_dec = model_.decoder_forward(g, v, h_enc, emb, n, enc_seq_, tgt_seq, valid);

    std::vector<int64_t> last(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) last[static_cast<size_t>(i)] = i * tgt_seq + tgt_seq - 1;
    Var logits = model_.score_rows(g, v, gather_rows(h_dec, last));
    return g.value(log_softmax_last(logits));
}

} // namespace genrec
