#include "genrec/rq_tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "genrec/errors.hpp"
#include "genrec/optim.hpp"
#include "genrec/rng.hpp"

namespace genrec {

using nlohmann::json;

void TokenizerConfig::validate() const {
    if (levels < 1) throw ConfigError("tokenizer.levels must be >= 1");
    if (codebook_size < 2) throw ConfigError("tokenizer.codebook_size must be >= 2");
    if (d_code < 1) throw ConfigError("tokenizer.d_code must be >= 1");
    if (d_in < 1) throw ConfigError("tokenizer.d_in must be >= 1");
    if (!(beta > 0.0)) throw ConfigError("tokenizer.beta must be > 0");
    for (int w : encoder_hidden) {
        if (w < 1) throw ConfigError("tokenizer.encoder_hidden widths must be >= 1");
    }
    for (int w : decoder_hidden) {
        if (w < 1) throw ConfigError("tokenizer.decoder_hidden widths must be >= 1");
    }
}

namespace {

std::string layer_w(const std::string& stack, size_t i) { return stack + "." + std::to_string(i) + ".w"; }
std::string layer_b(const std::string& stack, size_t i) { return stack + "." + std::to_string(i) + ".b"; }
std::string codebook_name(int level) { return "codebook." + std::to_string(level); }

Var mlp_forward(Graph& g, const ParamVars& v, Var x, const std::string& stack, size_t n_layers) {
    Var h = x;
    for (size_t i = 0; i < n_layers; ++i) {
        h = affine(h, v.at(layer_w(stack, i)), v.at(layer_b(stack, i)));
        if (i + 1 < n_layers) h = relu(h);
    }
    return h;
}

// argmin over a row with lowest-index tie-break
int64_t row_argmin(const double* row, int64_t n) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j) {
        if (row[j] < row[best]) best = j;
    }
    return best;
}

Tensor as_matrix(const Tensor& t, int64_t expect_cols, const std::string& what) {
    if (t.rank() == 1) {
        if (t.dim(0) != expect_cols) {
            throw GraphError(what + ": width " + std::to_string(t.dim(0)) + ", expected " + std::to_string(expect_cols));
        }
        return Tensor({1, expect_cols}, std::vector<double>(t.data(), t.data() + t.size()));
    }
    if (t.rank() != 2 || t.dim(1) != expect_cols) {
        throw GraphError(what + ": expected (n," + std::to_string(expect_cols) + "), got " + t.shape_str());
    }
    return t;
}

} // namespace

Tensor assignment_distribution(const Tensor& v, const Tensor& codebook) {
    Graph g;
    Tensor vm = as_matrix(v, codebook.dim(1), "assignment_distribution");
    Var probs = softmax_last(scale(sqdist(constant(g, vm), constant(g, codebook)), -1.0));
    const Tensor& p = g.value(probs);
    if (v.rank() == 1) return Tensor({p.dim(1)}, std::vector<double>(p.data(), p.data() + p.size()));
    return p;
}

RqTokenizer::RqTokenizer(TokenizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::vector<int> RqTokenizer::encoder_widths() const {
    std::vector<int> w{cfg_.d_in};
    w.insert(w.end(), cfg_.encoder_hidden.begin(), cfg_.encoder_hidden.end());
    w.push_back(cfg_.d_code);
    return w;
}

std::vector<int> RqTokenizer::decoder_widths() const {
    std::vector<int> w{cfg_.d_code};
    w.insert(w.end(), cfg_.decoder_hidden.begin(), cfg_.decoder_hidden.end());
    w.push_back(cfg_.d_in);
    return w;
}

void RqTokenizer::init_parameters(uint64_t seed) {
    params_ = ParameterSet();
    Rng rng(seed);
    auto add_stack = [&](const std::string& stack, const std::vector<int>& widths) {
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            const int fan_in = widths[i];
            const int fan_out = widths[i + 1];
            Tensor w({fan_in, fan_out});
            const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (int64_t j = 0; j < w.size(); ++j) w[j] = std * rng.next_normal();
            params_.add(layer_w(stack, i), std::move(w));
            params_.add(layer_b(stack, i), Tensor::zeros({fan_out}));
        }
    };
    add_stack("enc", encoder_widths());
    add_stack("dec", decoder_widths());
    for (int l = 0; l < cfg_.levels; ++l) {
        Tensor cb({cfg_.codebook_size, cfg_.d_code});
        for (int64_t j = 0; j < cb.size(); ++j) cb[j] = 0.01 * rng.next_normal();
        params_.add(codebook_name(l), std::move(cb));
    }
}

Var RqTokenizer::encode(Graph& g, const ParamVars& v, Var z) const {
    const Tensor& zt = g.value(z);
    if (zt.rank() != 2 || zt.dim(1) != cfg_.d_in) {
        throw GraphError("encode: expected (n," + std::to_string(cfg_.d_in) + "), got " + zt.shape_str());
    }
    return mlp_forward(g, v, z, "enc", encoder_widths().size() - 1);
}

BatchQuantization RqTokenizer::quantize(Graph& g, const ParamVars& v, Var r) const {
    BatchQuantization out;
    Var resid = r;
    for (int l = 0; l < cfg_.levels; ++l) {
        Var cb = v.at(codebook_name(l));
        Var d2 = sqdist(resid, cb);
        out.residuals.push_back(resid);
        out.probs.push_back(softmax_last(scale(d2, -1.0)));

        const Tensor& dv = g.value(d2);
        std::vector<int64_t> codes(static_cast<size_t>(dv.dim(0)));
        for (int64_t i = 0; i < dv.dim(0); ++i) {
            codes[static_cast<size_t>(i)] = row_argmin(dv.data() + i * dv.dim(1), dv.dim(1));
        }
        Var selected = gather_rows(cb, codes);
        out.codes.push_back(std::move(codes));
        resid = sub(resid, selected);
    }
    // first residual minus final residual; equals the codeword sum in exact
    // arithmetic and keeps the telescoping identity bit-exact
    out.quantized = sub(r, resid);
    out.residuals.push_back(resid); // final residual v_{L+1}
    return out;
}

Var RqTokenizer::reconstruct(Graph& g, const ParamVars& v, Var quantized) const {
    const Tensor& qt = g.value(quantized);
    if (qt.rank() != 2 || qt.dim(1) != cfg_.d_code) {
        throw GraphError("reconstruct: expected (n," + std::to_string(cfg_.d_code) + "), got " + qt.shape_str());
    }
    return mlp_forward(g, v, quantized, "dec", decoder_widths().size() - 1);
}

Var RqTokenizer::tokenization_loss(Graph& g, const ParamVars& v, Var z, const std::vector<double>& weights,
                                   SgTape* tape) const {
    const Tensor& zt = g.value(z);
    if (zt.rank() != 2 || zt.dim(0) == 0) throw GraphError("tokenization_loss: empty batch");
    const int64_t n = zt.dim(0);
    if (!weights.empty() && static_cast<int64_t>(weights.size()) != n) {
        throw GraphError("tokenization_loss: weights length must match batch");
    }

    Var r = encode(g, v, z);
    BatchQuantization q = quantize(g, v, r);
    Var recon = reconstruct(g, v, q.quantized);

    Var diff = sub(recon, z);
    Var per_item = last_sum(mul(diff, diff)); // (n,1)
    for (int l = 0; l < cfg_.levels; ++l) {
        Var selected = gather_rows(v.at(codebook_name(l)), q.codes[static_cast<size_t>(l)]);
        Var resid = q.residuals[static_cast<size_t>(l)];
        Var codeword_err = sub(SgTape::apply_sg(tape, resid), selected);
        Var commit_err = sub(resid, SgTape::apply_sg(tape, selected));
        per_item = add(per_item, last_sum(mul(codeword_err, codeword_err)));
        per_item = add(per_item, scale(last_sum(mul(commit_err, commit_err)), cfg_.beta));
    }

    Var flat = reshape(per_item, {n});
    if (weights.empty()) return sum_all(flat);
    return sum_all(mul(flat, constant(g, Tensor({n}, weights))));
}

Tensor RqTokenizer::encode_values(const Tensor& z) const {
    Graph g;
    Tensor zm = as_matrix(z, cfg_.d_in, "encode");
    Var out = encode(g, make_leaves(g, params_), constant(g, zm));
    const Tensor& o = g.value(out);
    if (z.rank() == 1) return Tensor({o.dim(1)}, std::vector<double>(o.data(), o.data() + o.size()));
    return o;
}

Tensor RqTokenizer::reconstruct_values(const Tensor& quantized) const {
    Graph g;
    Tensor qm = as_matrix(quantized, cfg_.d_code, "reconstruct");
    Var out = reconstruct(g, make_leaves(g, params_), constant(g, qm));
    const Tensor& o = g.value(out);
    if (quantized.rank() == 1) return Tensor({o.dim(1)}, std::vector<double>(o.data(), o.data() + o.size()));
    return o;
}

QuantizationTrace RqTokenizer::quantize_one(const Tensor& r) const {
    Graph g;
    Tensor rm = as_matrix(r, cfg_.d_code, "quantize");
    BatchQuantization q = quantize(g, make_leaves(g, params_), constant(g, rm));

    QuantizationTrace trace;
    auto row_of = [](const Tensor& m) {
        return Tensor({m.dim(1)}, std::vector<double>(m.data(), m.data() + m.dim(1)));
    };
    for (int l = 0; l < cfg_.levels; ++l) {
        trace.residuals.push_back(row_of(g.value(q.residuals[static_cast<size_t>(l)])));
        trace.probs.push_back(row_of(g.value(q.probs[static_cast<size_t>(l)])));
        trace.identifier.tokens.push_back(static_cast<int>(q.codes[static_cast<size_t>(l)][0]));
    }
    trace.quantized = row_of(g.value(q.quantized));
    trace.final_residual = row_of(g.value(q.residuals.back()));
    return trace;
}

Tensor RqTokenizer::level_distribution(const Tensor& v, int level) const {
    if (level < 0 || level >= cfg_.levels) throw GraphError("level_distribution: invalid level");
    return assignment_distribution(v, params_.value(codebook_name(level)));
}

ItemIdentifier RqTokenizer::tokenize_one(const Tensor& z) const {
    Tensor r = encode_values(z);
    return quantize_one(r).identifier;
}

std::pair<std::vector<ItemIdentifier>, CollisionReport> RqTokenizer::tokenize_catalog(const Tensor& embeddings) const {
    Graph g;
    Tensor zm = as_matrix(embeddings, cfg_.d_in, "tokenize_catalog");
    ParamVars v = make_leaves(g, params_);
    BatchQuantization q = quantize(g, v, encode(g, v, constant(g, zm)));

    const int64_t n = zm.dim(0);
    std::vector<ItemIdentifier> ids(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        ids[static_cast<size_t>(i)].tokens.resize(static_cast<size_t>(cfg_.levels));
        for (int l = 0; l < cfg_.levels; ++l) {
            ids[static_cast<size_t>(i)].tokens[static_cast<size_t>(l)] =
                static_cast<int>(q.codes[static_cast<size_t>(l)][static_cast<size_t>(i)]);
        }
    }

    std::map<ItemIdentifier, std::vector<int>> by_id;
    for (int64_t i = 0; i < n; ++i) by_id[ids[static_cast<size_t>(i)]].push_back(static_cast<int>(i));
    CollisionReport report;
    for (auto& [ident, items] : by_id) {
        if (items.size() > 1) report.groups.emplace_back(ident, items);
    }
    return {std::move(ids), std::move(report)};
}

Tensor kmeans_centroids(const Tensor& points, int k, uint64_t seed, int max_iters, double move_tol) {
    if (points.rank() != 2 || points.dim(0) < 1) throw DataError("kmeans: expected a nonempty (n,d) matrix");
    const int64_t n = points.dim(0);
    const int64_t d = points.dim(1);
    Rng rng(seed);

    // distinct rows, first occurrence order
    std::vector<int64_t> distinct;
    {
        std::set<std::vector<double>> seen;
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> row(points.data() + i * d, points.data() + (i + 1) * d);
            if (seen.insert(std::move(row)).second) distinct.push_back(i);
        }
    }

    Tensor centroids({k, d});
    if (static_cast<int64_t>(distinct.size()) < k) {
        // all distinct points become centroids; pad with perturbed duplicates
        for (size_t c = 0; c < static_cast<size_t>(k); ++c) {
            const int64_t src = distinct[c % distinct.size()];
            for (int64_t j = 0; j < d; ++j) {
                double val = points[src * d + j];
                if (c >= distinct.size()) val += 1e-4 * rng.next_normal();
                centroids[static_cast<int64_t>(c) * d + j] = val;
            }
        }
        return centroids;
    }

    // Forgy start: k distinct rows chosen without replacement
    std::vector<int64_t> pool = distinct;
    rng.shuffle(pool);
    for (int c = 0; c < k; ++c) {
        std::copy(points.data() + pool[static_cast<size_t>(c)] * d, points.data() + (pool[static_cast<size_t>(c)] + 1) * d,
                  centroids.data() + c * d);
    }

    std::vector<int> assign(static_cast<size_t>(n), 0);
    std::vector<double> dist_to_own(static_cast<size_t>(n), 0.0);
    for (int iter = 0; iter < max_iters; ++iter) {
        // assignment (nearest centroid, ties to the lowest index)
        for (int64_t i = 0; i < n; ++i) {
            const double* p = points.data() + i * d;
            int best = 0;
            double best_d = 0.0;
            for (int c = 0; c < k; ++c) {
                const double* ctr = centroids.data() + c * d;
                double s = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double diff = p[j] - ctr[j];
                    s += diff * diff;
                }
                if (c == 0 || s < best_d) {
                    best = c;
                    best_d = s;
                }
            }
            assign[static_cast<size_t>(i)] = best;
            dist_to_own[static_cast<size_t>(i)] = best_d;
        }

        // update
        Tensor next({k, d});
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (int64_t i = 0; i < n; ++i) {
            const int c = assign[static_cast<size_t>(i)];
            ++counts[static_cast<size_t>(c)];
            for (int64_t j = 0; j < d; ++j) next[c * d + j] += points[i * d + j];
        }
        std::vector<bool> taken(static_cast<size_t>(n), false);
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) {
                for (int64_t j = 0; j < d; ++j) next[c * d + j] /= static_cast<double>(counts[static_cast<size_t>(c)]);
            } else {
                // re-seed an empty cluster to the farthest untaken point
                int64_t far_i = 0;
                double far_d = -1.0;
                for (int64_t i = 0; i < n; ++i) {
                    if (taken[static_cast<size_t>(i)]) continue;
                    if (dist_to_own[static_cast<size_t>(i)] > far_d) {
                        far_d = dist_to_own[static_cast<size_t>(i)];
                        far_i = i;
                    }
                }
                taken[static_cast<size_t>(far_i)] = true;
                for (int64_t j = 0; j < d; ++j) next[c * d + j] = points[far_i * d + j];
            }
        }

        // convergence: relative centroid movement
        double worst_move = 0.0;
        for (int c = 0; c < k; ++c) {
            double move = 0.0, norm = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double delta = next[c * d + j] - centroids[c * d + j];
                move += delta * delta;
                norm += centroids[c * d + j] * centroids[c * d + j];
            }
            worst_move = std::max(worst_move, std::sqrt(move) / (std::sqrt(norm) + 1e-12));
        }
        centroids = std::move(next);
        if (worst_move < move_tol) break;
    }
    return centroids;
}

void RqTokenizer::kmeans_init(const Tensor& embeddings, uint64_t seed) {
    Tensor zm = as_matrix(embeddings, cfg_.d_in, "kmeans_init");
    if (zm.dim(0) < 1) throw DataError("kmeans_init: empty corpus");
    Tensor resid = encode_values(zm);
    for (int l = 0; l < cfg_.levels; ++l) {
        Tensor centroids = kmeans_centroids(resid, cfg_.codebook_size, seed + static_cast<uint64_t>(l));
        params_.value(codebook_name(l)) = centroids;
        // subtract the selected codeword to produce the next level's residuals
        const int64_t n = resid.dim(0);
        const int64_t d = resid.dim(1);
        for (int64_t i = 0; i < n; ++i) {
            double* row = resid.data() + i * d;
            int best = 0;
            double best_d = 0.0;
            for (int c = 0; c < cfg_.codebook_size; ++c) {
                const double* ctr = centroids.data() + c * d;
                double s = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double diff = row[j] - ctr[j];
                    s += diff * diff;
                }
                if (c == 0 || s < best_d) {
                    best = c;
                    best_d = s;
                }
            }
            for (int64_t j = 0; j < d; ++j) row[j] -= centroids[best * d + j];
        }
    }
}

RqTokenizer::PretrainLog RqTokenizer::pretrain(const Tensor& embeddings, const PretrainOptions& opt) {
    Tensor zm = as_matrix(embeddings, cfg_.d_in, "pretrain");
    const int64_t n = zm.dim(0);
    if (n == 0) throw DataError("pretrain: empty corpus");
    AdamW optimizer({.lr = opt.lr, .weight_decay = opt.weight_decay});
    Rng rng(opt.seed);

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    PretrainLog log;
    const int64_t batch = std::max<int64_t>(1, opt.batch_size);
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        rng.shuffle(order);
        double total = 0.0;
        for (int64_t start = 0; start < n; start += batch) {
            const int64_t len = std::min(batch, n - start);
            Tensor zb({len, cfg_.d_in});
            for (int64_t i = 0; i < len; ++i) {
                const int64_t src = order[static_cast<size_t>(start + i)];
                std::copy(zm.data() + src * cfg_.d_in, zm.data() + (src + 1) * cfg_.d_in, zb.data() + i * cfg_.d_in);
            }
            Graph g;
            ParamVars v = make_leaves(g, params_);
            Var loss = tokenization_loss(g, v, constant(g, zb));
            const double loss_v = g.value(loss)[0];
            if (!std::isfinite(loss_v)) {
                throw DivergenceError("tokenizer pretraining diverged at epoch " + std::to_string(epoch) +
                                      ": loss is not finite");
            }
            total += loss_v;
            params_.zero_grads();
            accumulate_grads(params_, gradient(g, loss, v));
            optimizer.step(params_);
        }
        log.epoch_loss.push_back(total / static_cast<double>(n));
    }
    return log;
}

Checkpoint RqTokenizer::to_checkpoint() const {
    json meta;
    meta["kind"] = "rq_tokenizer";
    meta["levels"] = cfg_.levels;
    meta["codebook_size"] = cfg_.codebook_size;
    meta["d_in"] = cfg_.d_in;
    meta["d_code"] = cfg_.d_code;
    meta["encoder_hidden"] = cfg_.encoder_hidden;
    meta["decoder_hidden"] = cfg_.decoder_hidden;
    meta["beta"] = cfg_.beta;
    Checkpoint ckpt;
    ckpt.meta_json = meta.dump();
    ckpt.params = params_;
    return ckpt;
}

RqTokenizer RqTokenizer::from_checkpoint(const Checkpoint& ckpt) {
    json meta = json::parse(ckpt.meta_json);
    if (meta.value("kind", "") != "rq_tokenizer") throw DataError("checkpoint is not a tokenizer checkpoint");
    TokenizerConfig cfg;
    cfg.levels = meta.at("levels").get<int>();
    cfg.codebook_size = meta.at("codebook_size").get<int>();
    cfg.d_in = meta.at("d_in").get<int>();
    cfg.d_code = meta.at("d_code").get<int>();
    cfg.encoder_hidden = meta.at("encoder_hidden").get<std::vector<int>>();
    cfg.decoder_hidden = meta.at("decoder_hidden").get<std::vector<int>>();
    cfg.beta = meta.at("beta").get<double>();
    RqTokenizer tok(cfg);
    tok.params_ = ckpt.params;
    return tok;
}

} // namespace genrec
