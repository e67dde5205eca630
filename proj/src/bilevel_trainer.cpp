#include "genrec/bilevel_trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "genrec/errors.hpp"
#include "genrec/evaluation.hpp"
#include "genrec/identifier_trie.hpp"

namespace genrec {

Strategy strategy_from_string(const std::string& s) {
    if (s == "bloger") return Strategy::kBloger;
    if (s == "bloger-no-gs") return Strategy::kBlogerNoGs;
    if (s == "joint") return Strategy::kJoint;
    if (s == "joint-gs") return Strategy::kJointGs;
    if (s == "fixed") return Strategy::kFixed;
    throw ConfigError("unknown strategy '" + s + "' (expected bloger|bloger-no-gs|joint|joint-gs|fixed)");
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::kBloger: return "bloger";
        case Strategy::kBlogerNoGs: return "bloger-no-gs";
        case Strategy::kJoint: return "joint";
        case Strategy::kJointGs: return "joint-gs";
        case Strategy::kFixed: return "fixed";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (!(eta_rec > 0.0) && strategy != Strategy::kFixed) {
        // eta_rec == 0 is allowed only as a degenerate diagnostic; negative never
        if (eta_rec < 0.0) throw ConfigError("train.eta_rec must be >= 0");
    }
    if (eta_rec < 0.0) throw ConfigError("train.eta_rec must be >= 0");
    if (eta_tok < 0.0) throw ConfigError("train.eta_tok must be >= 0");
    if (lambda < 0.0) throw ConfigError("train.lambda must be >= 0");
    if (period_m < 1) throw ConfigError("train.period_m must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("train.max_epochs must be >= 0");
    if (patience < 1) throw ConfigError("train.patience must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
    if (beam_width < 1) throw ConfigError("train.beam_width must be >= 1");
    if (strategy == Strategy::kFixed && eta_tok != 0.0) {
        throw ConfigError("strategy 'fixed' freezes the tokenizer; set train.eta_tok to 0");
    }
}

SurgeryOutcome gradient_surgery(GradientPair& pair, bool apply) {
    SurgeryOutcome out;
    out.applied = false;
    for (auto& [name, g_rec] : pair.rec) {
        auto it = pair.token.find(name);
        if (it == pair.token.end()) throw GraphError("gradient_surgery: key sets differ at '" + name + "'");
        const Tensor& g_tok = it->second;
        if (!g_rec.same_shape(g_tok)) throw GraphError("gradient_surgery: shape mismatch at '" + name + "'");
        ++out.total_groups;

        double dot = 0.0, norm2 = 0.0;
        for (int64_t i = 0; i < g_rec.size(); ++i) {
            dot += g_rec[i] * g_tok[i];
            norm2 += g_tok[i] * g_tok[i];
        }
        if (norm2 == 0.0) continue; // leave the group untouched
        if (dot < 0.0) {
            ++out.conflict_groups;
            if (apply) {
                const double coef = dot / norm2;
                for (int64_t i = 0; i < g_rec.size(); ++i) g_rec[i] -= coef * g_tok[i];
                out.applied = true;
            }
        }
    }
    return out;
}

std::vector<RecExample> training_pairs(const InteractionDataset& ds, int t_items) {
    std::vector<RecExample> pairs;
    for (const UserSplit& u : ds.users) {
        for (size_t t = 1; t < u.train.size(); ++t) {
            RecExample ex;
            ex.target = u.train[t];
            ex.history.assign(static_cast<size_t>(t_items), -1);
            const size_t take = std::min(t, static_cast<size_t>(t_items));
            for (size_t j = 0; j < take; ++j) {
                ex.history[static_cast<size_t>(t_items) - take + j] = u.train[t - take + j];
            }
            pairs.push_back(std::move(ex));
        }
    }
    return pairs;
}

namespace {

RecExample pair_from_sequence(const std::vector<int>& seq, int target, int t_items) {
    RecExample ex;
    ex.target = target;
    ex.history.assign(static_cast<size_t>(t_items), -1);
    const size_t take = std::min(seq.size(), static_cast<size_t>(t_items));
    for (size_t j = 0; j < take; ++j) {
        ex.history[static_cast<size_t>(t_items) - take + j] = seq[seq.size() - take + j];
    }
    return ex;
}

} // namespace

std::vector<RecExample> validation_pairs(const InteractionDataset& ds, int t_items) {
    std::vector<RecExample> pairs;
    for (const UserSplit& u : ds.users) pairs.push_back(pair_from_sequence(u.train, u.validation, t_items));
    return pairs;
}

std::vector<RecExample> test_pairs(const InteractionDataset& ds, int t_items) {
    std::vector<RecExample> pairs;
    for (const UserSplit& u : ds.users) {
        std::vector<int> seq = u.train;
        seq.push_back(u.validation);
        pairs.push_back(pair_from_sequence(seq, u.test, t_items));
    }
    return pairs;
}

BilevelTrainer::BilevelTrainer(SeqRecommender& model, RqTokenizer& tokenizer, TrainConfig cfg)
    : model_(model),
      tokenizer_(tokenizer),
      cfg_(cfg),
      opt_theta_({.lr = cfg.eta_rec, .weight_decay = cfg.weight_decay}),
      opt_phi_({.lr = cfg.eta_tok, .weight_decay = cfg.weight_decay}),
      rng_(cfg.seed) {
    cfg_.validate();
}

double BilevelTrainer::recommender_step(const Tensor& embeddings, const std::vector<RecExample>& batch) {
    Graph g;
    ParamVars theta = make_leaves(g, model_.params());
    ParamVars phi = make_leaves(g, tokenizer_.params());
    Dropout drop{model_.config().dropout, &rng_};
    Var loss = model_.recommendation_loss(g, theta, phi, tokenizer_, embeddings, batch, drop);
    const double loss_v = g.value(loss)[0];
    if (!std::isfinite(loss_v)) throw DivergenceError("recommendation loss diverged (not finite)");

    model_.params().zero_grads();
    accumulate_grads(model_.params(), gradient(g, loss, theta)); // tokenizer gradients discarded
    if (cfg_.plain_updates) {
        sgd_step(model_.params(), cfg_.eta_rec);
    } else {
        opt_theta_.step(model_.params());
    }
    return loss_v;
}

std::unique_ptr<MetaStep> BilevelTrainer::tentative_update(const Tensor& embeddings,
                                                           const std::vector<RecExample>& support) {
    auto step = std::make_unique<MetaStep>();
    Graph& g = step->graph;
    step->theta_vars = make_leaves(g, model_.params());
    step->phi_vars = make_leaves(g, tokenizer_.params());
    // dropout stays off inside the meta step so the unrolled gradient is
    // well-defined
    Var loss = model_.recommendation_loss(g, step->theta_vars, step->phi_vars, tokenizer_, embeddings, support);
    step->support_loss = g.value(loss)[0];
    if (!std::isfinite(step->support_loss)) throw DivergenceError("tentative update loss diverged (not finite)");

    std::vector<std::string> names;
    std::vector<Var> wrt;
    for (const auto& [name, v] : step->theta_vars) {
        names.push_back(name);
        wrt.push_back(v);
    }
    std::vector<Var> grads = g.gradients(loss, wrt);
    for (size_t i = 0; i < names.size(); ++i) {
        step->theta_prime.emplace(names[i], sub(wrt[i], scale(grads[i], cfg_.eta_rec)));
    }
    return step;
}

std::map<int, double> BilevelTrainer::item_weights(const std::vector<RecExample>& batch, std::vector<int>& items) const {
    std::map<int, double> counts;
    for (const RecExample& ex : batch) {
        for (int it : ex.history) {
            if (it >= 0) counts[it] += 1.0;
        }
        counts[ex.target] += 1.0;
    }
    items.clear();
    for (const auto& [item, w] : counts) items.push_back(item);
    return counts;
}

GradientPair BilevelTrainer::meta_test_gradients(MetaStep& step, const Tensor& embeddings,
                                                 const std::vector<RecExample>& query) {
    GradientPair pair;
    {
        Graph& g = step.graph;
        Var loss = model_.recommendation_loss(g, step.theta_prime, step.phi_vars, tokenizer_, embeddings, query);
        if (!std::isfinite(g.value(loss)[0])) throw DivergenceError("meta-test loss diverged (not finite)");
        pair.rec = gradient(g, loss, step.phi_vars);
    }
    {
        // plain tokenization gradient over the same items, occurrence-weighted
        std::vector<int> items;
        std::map<int, double> counts = item_weights(query, items);
        const int64_t d_in = tokenizer_.config().d_in;
        Tensor z({static_cast<int64_t>(items.size()), d_in});
        std::vector<double> weights;
        for (size_t i = 0; i < items.size(); ++i) {
            std::copy(embeddings.data() + items[i] * d_in, embeddings.data() + (items[i] + 1) * d_in,
                      z.data() + static_cast<int64_t>(i) * d_in);
            weights.push_back(counts.at(items[i]));
        }
        Graph g;
        ParamVars phi = make_leaves(g, tokenizer_.params());
        Var loss = tokenizer_.tokenization_loss(g, phi, constant(g, z), weights);
        if (!std::isfinite(g.value(loss)[0])) throw DivergenceError("tokenization loss diverged (not finite)");
        pair.token = gradient(g, loss, phi);
    }
    return pair;
}

void BilevelTrainer::tokenizer_step(const GradientPair& pair) {
    tokenizer_.params().zero_grads();
    for (auto& [name, entry] : tokenizer_.params()) {
        const Tensor& g_rec = pair.rec.at(name);
        const Tensor& g_tok = pair.token.at(name);
        for (int64_t i = 0; i < entry.grad.size(); ++i) {
            entry.grad[i] = g_rec[i] + cfg_.lambda * g_tok[i];
        }
    }
    if (cfg_.plain_updates) {
        sgd_step(tokenizer_.params(), cfg_.eta_tok);
    } else {
        opt_phi_.step(tokenizer_.params());
    }
}

double BilevelTrainer::tokenization_loss_value(const Tensor& embeddings, const std::vector<RecExample>& batch) const {
    std::vector<int> items;
    std::map<int, double> counts;
    {
        std::map<int, double> c;
        for (const RecExample& ex : batch) {
            for (int it : ex.history) {
                if (it >= 0) c[it] += 1.0;
            }
            c[ex.target] += 1.0;
        }
        counts = std::move(c);
    }
    const int64_t d_in = tokenizer_.config().d_in;
    Tensor z({static_cast<int64_t>(counts.size()), d_in});
    std::vector<double> weights;
    int64_t row = 0;
    for (const auto& [item, w] : counts) {
        std::copy(embeddings.data() + item * d_in, embeddings.data() + (item + 1) * d_in, z.data() + row * d_in);
        weights.push_back(w);
        ++row;
    }
    Graph g;
    ParamVars phi = make_leaves(g, tokenizer_.params());
    return g.value(tokenizer_.tokenization_loss(g, phi, constant(g, z), weights))[0];
}

void BilevelTrainer::joint_step(const Tensor& embeddings, const std::vector<RecExample>& batch, StepRecord& rec,
                                double& loss_rec, double& loss_token) {
    Graph g;
    ParamVars theta = make_leaves(g, model_.params());
    ParamVars phi = make_leaves(g, tokenizer_.params());
    Dropout drop{model_.config().dropout, &rng_};
    Var l_rec = model_.recommendation_loss(g, theta, phi, tokenizer_, embeddings, batch, drop);

    std::vector<int> items;
    std::map<int, double> counts = item_weights(batch, items);
    const int64_t d_in = tokenizer_.config().d_in;
    Tensor z({static_cast<int64_t>(items.size()), d_in});
    std::vector<double> weights;
    for (size_t i = 0; i < items.size(); ++i) {
        std::copy(embeddings.data() + items[i] * d_in, embeddings.data() + (items[i] + 1) * d_in,
                  z.data() + static_cast<int64_t>(i) * d_in);
        weights.push_back(counts.at(items[i]));
    }
    Var l_tok = tokenizer_.tokenization_loss(g, phi, constant(g, z), weights);

    loss_rec = g.value(l_rec)[0];
    loss_token = g.value(l_tok)[0];
    if (!std::isfinite(loss_rec) || !std::isfinite(loss_token)) {
        throw DivergenceError("joint loss diverged (not finite)");
    }

    model_.params().zero_grads();
    accumulate_grads(model_.params(), gradient(g, l_rec, theta));

    GradientPair pair;
    pair.rec = gradient(g, l_rec, phi);
    pair.token = gradient(g, l_tok, phi);
    SurgeryOutcome surgery = gradient_surgery(pair, cfg_.strategy == Strategy::kJointGs);
    rec.conflict_groups = surgery.conflict_groups;
    rec.total_groups = surgery.total_groups;
    rec.surgery_applied = surgery.applied;

    if (cfg_.plain_updates) {
        sgd_step(model_.params(), cfg_.eta_rec);
    } else {
        opt_theta_.step(model_.params());
    }
    tokenizer_step(pair);
    rec.tokenizer_updated = true;
}

TrainResult BilevelTrainer::train(const InteractionDataset& data, const Tensor& embeddings) {
    const int t_items = model_.config().max_items;
    std::vector<RecExample> pairs = training_pairs(data, t_items);
    std::vector<RecExample> val = validation_pairs(data, t_items);
    if (pairs.empty()) throw DataError("train: no training pairs");
    if (val.empty()) throw DataError("train: no validation pairs");

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();

    // independent stream for support/query mini-batches
    std::vector<size_t> meta_order(pairs.size());
    for (size_t i = 0; i < meta_order.size(); ++i) meta_order[i] = i;
    Rng meta_rng = rng_.fork(0x6d657461);
    meta_rng.shuffle(meta_order);
    size_t meta_cursor = 0;
    auto next_meta_batch = [&]() {
        std::vector<RecExample> batch;
        const size_t want = std::min(static_cast<size_t>(cfg_.batch_size), pairs.size());
        while (batch.size() < want) {
            if (meta_cursor >= meta_order.size()) {
                meta_rng.shuffle(meta_order);
                meta_cursor = 0;
            }
            batch.push_back(pairs[meta_order[meta_cursor++]]);
        }
        return batch;
    };

    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int64_t step = 0;
    int bad_epochs = 0;
    for (int epoch = 0; epoch < cfg_.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        rng_.shuffle(order);

        double rec_sum = 0.0, tok_sum = 0.0;
        int64_t rec_batches = 0, tok_events = 0;
        double conflict_sum = 0.0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
            const size_t len = std::min(static_cast<size_t>(cfg_.batch_size), order.size() - start);
            std::vector<RecExample> batch;
            batch.reserve(len);
            for (size_t i = 0; i < len; ++i) batch.push_back(pairs[order[start + i]]);

            ++step;
            StepRecord srec;
            srec.step = step;

            if (cfg_.strategy == Strategy::kJoint || cfg_.strategy == Strategy::kJointGs) {
                double lr = 0.0, lt = 0.0;
                joint_step(embeddings, batch, srec, lr, lt);
                rec_sum += lr;
                tok_sum += lt;
                ++rec_batches;
                ++tok_events;
                if (srec.total_groups > 0) {
                    conflict_sum += static_cast<double>(srec.conflict_groups) / srec.total_groups;
                }
            } else {
                rec_sum += recommender_step(embeddings, batch);
                ++rec_batches;

                if (cfg_.strategy != Strategy::kFixed && step % cfg_.period_m == 0) {
                    srec.meta = true;
                    std::vector<RecExample> support = cfg_.same_batch ? batch : next_meta_batch();
                    std::vector<RecExample> query = cfg_.same_batch ? batch : next_meta_batch();
                    std::unique_ptr<MetaStep> ms = tentative_update(embeddings, support);
                    GradientPair pair = meta_test_gradients(*ms, embeddings, query);
                    SurgeryOutcome surgery = gradient_surgery(pair, cfg_.strategy == Strategy::kBloger);
                    srec.conflict_groups = surgery.conflict_groups;
                    srec.total_groups = surgery.total_groups;
                    srec.surgery_applied = surgery.applied;
                    tokenizer_step(pair);
                    srec.tokenizer_updated = true;
                    tok_sum += tokenization_loss_value(embeddings, query);
                    ++tok_events;
                    if (surgery.total_groups > 0) {
                        conflict_sum += static_cast<double>(surgery.conflict_groups) / surgery.total_groups;
                    }
                }
            }

            srec.theta_digest = model_.params().digest();
            srec.phi_digest = tokenizer_.params().digest();
            result.steps.push_back(std::move(srec));
        }

        // validation recommendation loss (current tokenizer, dropout off)
        double val_sum = 0.0;
        int64_t val_count = 0;
        for (size_t start = 0; start < val.size(); start += static_cast<size_t>(cfg_.batch_size)) {
            const size_t len = std::min(static_cast<size_t>(cfg_.batch_size), val.size() - start);
            std::vector<RecExample> batch(val.begin() + static_cast<int64_t>(start),
                                          val.begin() + static_cast<int64_t>(start + len));
            val_sum += model_.recommendation_loss_value(tokenizer_, embeddings, batch) * static_cast<double>(len);
            val_count += static_cast<int64_t>(len);
        }
        const double val_loss = val_sum / static_cast<double>(val_count);
        if (!std::isfinite(val_loss)) throw DivergenceError("validation loss diverged (not finite)");

        EpochRecord erec;
        erec.epoch = epoch;
        erec.train_loss_rec = rec_sum / static_cast<double>(std::max<int64_t>(1, rec_batches));
        erec.train_loss_token = tok_events > 0 ? tok_sum / static_cast<double>(tok_events) : 0.0;
        erec.val_loss_rec = val_loss;
        erec.conflict_rate = tok_events > 0 ? conflict_sum / static_cast<double>(tok_events) : 0.0;

        const bool improved = val_loss < result.best_val_loss;
        if (improved) {
            result.best_val_loss = val_loss;
            result.best_epoch = epoch;
            result.best_theta = model_.params();
            result.best_phi = tokenizer_.params();
            bad_epochs = 0;
        } else {
            ++bad_epochs;
        }
        const bool last_epoch = epoch + 1 == cfg_.max_epochs || bad_epochs >= cfg_.patience;

        // ranking metrics against the current tokenizer: the trie is rebuilt
        // from scratch at every evaluation point
        if ((cfg_.eval_every > 0 && (epoch + 1) % cfg_.eval_every == 0) || last_epoch) {
            auto [ids, collisions] = tokenizer_.tokenize_catalog(embeddings);
            IdentifierTrie trie = IdentifierTrie::build(ids);
            std::vector<std::vector<int>> histories;
            std::vector<int> targets;
            for (const RecExample& ex : val) {
                histories.push_back(ex.history);
                targets.push_back(ex.target);
            }
            RankingResult ranking = rank_all(model_, ids, trie, histories, targets, cfg_.beam_width);
            erec.recall5 = recall_at_k(ranking, 5);
            erec.ndcg5 = ndcg_at_k(ranking, 5);
            erec.recall10 = recall_at_k(ranking, 10);
            erec.ndcg10 = ndcg_at_k(ranking, 10);
        }

        erec.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.epochs.push_back(std::move(erec));

        if (bad_epochs >= cfg_.patience) {
            result.early_stopped = true;
            break;
        }
    }

    if (result.best_epoch < 0) {
        result.best_theta = model_.params();
        result.best_phi = tokenizer_.params();
    }
    return result;
}

} // namespace genrec
