// genrec: desk-scale generative recommendation with a jointly trained
// RQ tokenizer and seq2seq recommender.
//
// Subcommands: synth, pretrain, train, eval, bench. Configuration comes from a
// JSON file; any leaf can be overridden with `--<dot.path> <value>`.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "genrec/bilevel_trainer.hpp"
#include "genrec/checkpoint.hpp"
#include "genrec/config.hpp"
#include "genrec/data_pipeline.hpp"
#include "genrec/errors.hpp"
#include "genrec/evaluation.hpp"
#include "genrec/identifier_trie.hpp"
#include "genrec/rq_tokenizer.hpp"
#include "genrec/seq_recommender.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace genrec;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonArgs& args, const std::vector<std::string>& extras) {
    RunConfig cfg = args.config_path.empty() ? default_run_config() : load_run_config(args.config_path);
    for (const std::string& kv : args.overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    // remaining tokens: --dot.path value pairs
    for (size_t i = 0; i < extras.size(); ++i) {
        std::string key = extras[i];
        if (key.rfind("--", 0) != 0 || key.find('.') == std::string::npos) {
            throw ConfigError("unrecognized argument '" + key + "' (expected --<section.key> <value>)");
        }
        key = key.substr(2);
        if (i + 1 >= extras.size()) throw ConfigError("missing value for override '--" + key + "'");
        apply_override(cfg, key, extras[++i]);
    }
    cfg.validate();
    return cfg;
}

void ensure_parent_dir(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path() && !p.parent_path().empty()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw DataError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
    }
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) throw DataError("cannot create directory " + path + ": " + ec.message());
}

struct LoadedData {
    InteractionDataset dataset;
    Tensor embeddings;
};

LoadedData load_dataset(const RunConfig& cfg) {
    if (cfg.data.interactions.empty() || cfg.data.embeddings.empty()) {
        throw ConfigError("data.interactions and data.embeddings must be set");
    }
    RawInteractions raw = load_interactions(cfg.data.interactions);
    RawInteractions filtered = five_core_filter(raw);
    InteractionDataset ds = leave_one_out_split(filtered, cfg.recommender.max_items);
    EmbeddingFile table = load_embeddings(cfg.data.embeddings);
    LoadedData out{std::move(ds), Tensor{}};
    out.embeddings = assemble_embedding_matrix(out.dataset, table);
    return out;
}

TokenizerConfig tokenizer_config_for(const RunConfig& cfg, int64_t d_in) {
    TokenizerConfig tc = cfg.tokenizer;
    if (tc.d_in == 0) tc.d_in = static_cast<int>(d_in);
    if (tc.d_in != static_cast<int>(d_in)) {
        throw ConfigError("tokenizer.d_in = " + std::to_string(tc.d_in) + " but embeddings have width " +
                          std::to_string(d_in));
    }
    tc.validate();
    return tc;
}

RqTokenizer load_tokenizer_checkpoint(const std::string& path, const TokenizerConfig& expect) {
    RqTokenizer tok = RqTokenizer::from_checkpoint(load_checkpoint(path));
    const TokenizerConfig& got = tok.config();
    if (got.levels != expect.levels || got.codebook_size != expect.codebook_size || got.d_in != expect.d_in ||
        got.d_code != expect.d_code) {
        throw ConfigError("tokenizer checkpoint " + path + " does not match the configured tokenizer dimensions");
    }
    return tok;
}

json epoch_to_json(const EpochRecord& e) {
    json j;
    j["epoch"] = e.epoch;
    j["train_loss_rec"] = e.train_loss_rec;
    j["train_loss_token"] = e.train_loss_token;
    j["val_loss_rec"] = e.val_loss_rec;
    j["conflict_rate"] = e.conflict_rate;
    j["recall@5"] = e.recall5.has_value() ? json(*e.recall5) : json(nullptr);
    j["ndcg@5"] = e.ndcg5.has_value() ? json(*e.ndcg5) : json(nullptr);
    j["recall@10"] = e.recall10.has_value() ? json(*e.recall10) : json(nullptr);
    j["ndcg@10"] = e.ndcg10.has_value() ? json(*e.ndcg10) : json(nullptr);
    j["wall_time_s"] = e.wall_time_s;
    return j;
}

json evaluate_checkpoint(const RunConfig& cfg, SeqRecommender& model, RqTokenizer& tok, const LoadedData& data,
                         const std::string& export_trie_path) {
    auto [ids, collisions] = tok.tokenize_catalog(data.embeddings);
    IdentifierTrie trie = IdentifierTrie::build(ids);
    if (!export_trie_path.empty()) {
        ensure_parent_dir(export_trie_path);
        std::ofstream os(export_trie_path, std::ios::trunc);
        if (!os) throw DataError("cannot write trie export: " + export_trie_path);
        trie.export_text(os, data.dataset.item_ids);
    }

    std::vector<RecExample> tests = test_pairs(data.dataset, model.config().max_items);
    std::vector<std::vector<int>> histories;
    std::vector<int> targets;
    for (const RecExample& ex : tests) {
        histories.push_back(ex.history);
        targets.push_back(ex.target);
    }
    RankingResult ranking = rank_all(model, ids, trie, histories, targets, cfg.eval.beam_width);
    CodebookStats stats = codebook_stats(ids, tok.config().levels, tok.config().codebook_size);

    json report;
    report["recall@5"] = recall_at_k(ranking, 5);
    report["ndcg@5"] = ndcg_at_k(ranking, 5);
    report["recall@10"] = recall_at_k(ranking, 10);
    report["ndcg@10"] = ndcg_at_k(ranking, 10);
    report["density"] = stats.density;
    report["entropy"] = stats.entropy;
    report["collision_groups"] = collisions.groups.size();
    report["users"] = targets.size();
    report["beam_width"] = cfg.eval.beam_width;
    return report;
}

int cmd_synth(const RunConfig& cfg) {
    SynthConfig sc = cfg.synth;
    sc.seed = cfg.seed;
    SynthData data = synthesize(sc);
    if (cfg.data.interactions.empty() || cfg.data.embeddings.empty()) {
        throw ConfigError("data.interactions and data.embeddings must name the output files");
    }
    ensure_parent_dir(cfg.data.interactions);
    ensure_parent_dir(cfg.data.embeddings);
    write_interactions(cfg.data.interactions, data.interactions);
    write_embeddings(cfg.data.embeddings, data.embeddings);
    std::cout << "wrote " << data.interactions.users.size() << " users to " << cfg.data.interactions << "\n"
              << "wrote " << data.embeddings.rows.size() << " embeddings to " << cfg.data.embeddings << "\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& resume, const std::string& out_path) {
    EmbeddingFile table = load_embeddings(cfg.data.embeddings);
    Tensor corpus({static_cast<int64_t>(table.rows.size()), static_cast<int64_t>(table.dim)});
    {
        int64_t row = 0;
        for (const auto& [id, vec] : table.rows) {
            std::copy(vec.begin(), vec.end(), corpus.data() + row * table.dim);
            ++row;
        }
    }
    TokenizerConfig tc = tokenizer_config_for(cfg, table.dim);

    RqTokenizer tok = [&] {
        if (!resume.empty()) return load_tokenizer_checkpoint(resume, tc);
        RqTokenizer fresh(tc);
        fresh.init_parameters(cfg.seed);
        fresh.kmeans_init(corpus, cfg.seed + 1);
        return fresh;
    }();

    RqTokenizer::PretrainOptions opt;
    opt.epochs = cfg.pretrain.epochs;
    opt.lr = cfg.pretrain.lr;
    opt.weight_decay = cfg.pretrain.weight_decay;
    opt.batch_size = cfg.pretrain.batch_size;
    opt.seed = cfg.seed + 2;
    RqTokenizer::PretrainLog log = tok.pretrain(corpus, opt);

    ensure_parent_dir(out_path);
    save_checkpoint(out_path, tok.to_checkpoint());
    ensure_dir(cfg.data.out_dir);
    {
        std::ofstream os(cfg.data.out_dir + "/pretrain_loss.jsonl", std::ios::trunc);
        for (size_t i = 0; i < log.epoch_loss.size(); ++i) {
            os << json{{"epoch", i}, {"loss", log.epoch_loss[i]}}.dump() << "\n";
        }
    }
    std::cout << "tokenizer checkpoint written to " << out_path;
    if (!log.epoch_loss.empty()) std::cout << " (final mean loss " << log.epoch_loss.back() << ")";
    std::cout << "\n";
    return 0;
}

int cmd_train(RunConfig cfg, const std::string& tokenizer_ckpt) {
    LoadedData data = load_dataset(cfg);
    TokenizerConfig tc = tokenizer_config_for(cfg, data.embeddings.dim(1));

    RqTokenizer tok = [&] {
        if (!tokenizer_ckpt.empty()) return load_tokenizer_checkpoint(tokenizer_ckpt, tc);
        if (cfg.train.strategy != Strategy::kFixed) {
            throw ConfigError("a pretrained tokenizer checkpoint is required for strategy '" +
                              to_string(cfg.train.strategy) + "'");
        }
        RqTokenizer fresh(tc);
        fresh.init_parameters(cfg.seed);
        fresh.kmeans_init(data.embeddings, cfg.seed + 1);
        return fresh;
    }();

    SeqRecommender model(cfg.recommender, Vocabulary{tc.levels, tc.codebook_size});
    model.init_parameters(cfg.seed + 3);

    const int64_t n_pairs = static_cast<int64_t>(training_pairs(data.dataset, cfg.recommender.max_items).size());
    const int64_t steps_per_epoch = (n_pairs + cfg.train.batch_size - 1) / cfg.train.batch_size;
    cfg.train.period_m = cfg.resolve_period_m(steps_per_epoch);
    cfg.train.seed = cfg.seed + 4;
    cfg.train.beam_width = cfg.eval.beam_width;
    cfg.train.validate();

    ensure_dir(cfg.data.out_dir);
    {
        std::ofstream os(cfg.data.out_dir + "/config.json", std::ios::trunc);
        os << run_config_to_json(cfg) << "\n";
    }

    BilevelTrainer trainer(model, tok, cfg.train);
    TrainResult result = trainer.train(data.dataset, data.embeddings);

    {
        std::ofstream os(cfg.data.out_dir + "/metrics.jsonl", std::ios::trunc);
        for (const EpochRecord& e : result.epochs) os << epoch_to_json(e).dump() << "\n";
    }
    {
        std::ofstream os(cfg.data.out_dir + "/steps.jsonl", std::ios::trunc);
        for (const StepRecord& s : result.steps) {
            os << json{{"step", s.step},
                       {"meta", s.meta},
                       {"tokenizer_updated", s.tokenizer_updated},
                       {"conflict_groups", s.conflict_groups},
                       {"total_groups", s.total_groups},
                       {"surgery_applied", s.surgery_applied},
                       {"theta_digest", s.theta_digest},
                       {"phi_digest", s.phi_digest}}
                      .dump()
               << "\n";
        }
    }

    // checkpoints at the best-validation epoch
    SeqRecommender best_model(cfg.recommender, Vocabulary{tc.levels, tc.codebook_size});
    best_model.params() = result.best_theta;
    RqTokenizer best_tok(tc);
    best_tok.params() = result.best_phi;
    save_checkpoint(cfg.data.out_dir + "/model.ckpt", best_model.to_checkpoint());
    save_checkpoint(cfg.data.out_dir + "/tokenizer.ckpt", best_tok.to_checkpoint());

    std::cout << "trained " << result.epochs.size() << " epochs (best epoch " << result.best_epoch << ", val loss "
              << result.best_val_loss << (result.early_stopped ? ", early stop" : "") << ")\n"
              << "checkpoints and logs in " << cfg.data.out_dir << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& report_path,
             const std::string& export_trie_path) {
    LoadedData data = load_dataset(cfg);
    TokenizerConfig tc = tokenizer_config_for(cfg, data.embeddings.dim(1));
    RqTokenizer tok = load_tokenizer_checkpoint(checkpoint_dir + "/tokenizer.ckpt", tc);
    SeqRecommender model = SeqRecommender::from_checkpoint(load_checkpoint(checkpoint_dir + "/model.ckpt"));
    if (model.vocab().levels != tc.levels || model.vocab().codebook_size != tc.codebook_size) {
        throw ConfigError("model checkpoint vocabulary does not match the tokenizer configuration");
    }

    json report = evaluate_checkpoint(cfg, model, tok, data, export_trie_path);
    if (!report_path.empty()) {
        ensure_parent_dir(report_path);
        std::ofstream os(report_path, std::ios::trunc);
        os << report.dump(2) << "\n";
    }
    std::cout << report.dump() << "\n";
    return 0;
}

int cmd_bench(RunConfig cfg, int epochs, const std::string& report_path) {
    LoadedData data = load_dataset(cfg);
    TokenizerConfig tc = tokenizer_config_for(cfg, data.embeddings.dim(1));

    auto run_strategy = [&](Strategy strategy) {
        RqTokenizer tok(tc);
        tok.init_parameters(cfg.seed);
        tok.kmeans_init(data.embeddings, cfg.seed + 1);
        SeqRecommender model(cfg.recommender, Vocabulary{tc.levels, tc.codebook_size});
        model.init_parameters(cfg.seed + 3);

        TrainConfig train = cfg.train;
        train.strategy = strategy;
        train.max_epochs = epochs;
        train.patience = epochs + 1;
        train.eval_every = 0;
        if (strategy == Strategy::kFixed) train.eta_tok = 0.0;
        const int64_t n_pairs = static_cast<int64_t>(training_pairs(data.dataset, cfg.recommender.max_items).size());
        const int64_t steps_per_epoch = (n_pairs + train.batch_size - 1) / train.batch_size;
        train.period_m = cfg.resolve_period_m(steps_per_epoch);
        train.seed = cfg.seed + 4;
        train.beam_width = cfg.eval.beam_width;
        train.validate();

        BilevelTrainer trainer(model, tok, train);
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult result = trainer.train(data.dataset, data.embeddings);
        const double train_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        // evaluation timing over the test split, identical code path for all
        // strategies
        auto [ids, collisions] = tok.tokenize_catalog(data.embeddings);
        IdentifierTrie trie = IdentifierTrie::build(ids);
        std::vector<RecExample> tests = test_pairs(data.dataset, cfg.recommender.max_items);
        std::vector<std::vector<int>> histories;
        std::vector<int> targets;
        for (const RecExample& ex : tests) {
            histories.push_back(ex.history);
            targets.push_back(ex.target);
        }
        const auto e0 = std::chrono::steady_clock::now();
        RankingResult ranking = rank_all(model, ids, trie, histories, targets, cfg.eval.beam_width);
        const double eval_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count();
        (void)ranking;

        json j;
        j["strategy"] = to_string(strategy);
        j["epochs"] = result.epochs.size();
        j["steps"] = result.steps.size();
        j["train_s_total"] = train_time;
        j["train_s_per_epoch"] = train_time / std::max<size_t>(1, result.epochs.size());
        j["eval_s"] = eval_time;
        return j;
    };

    json fixed = run_strategy(Strategy::kFixed);
    json bloger = run_strategy(Strategy::kBloger);
    json report;
    report["fixed"] = fixed;
    report["bloger"] = bloger;
    report["train_time_ratio"] =
        bloger["train_s_per_epoch"].get<double>() / fixed["train_s_per_epoch"].get<double>();
    report["eval_time_ratio"] = bloger["eval_s"].get<double>() / fixed["eval_s"].get<double>();

    if (!report_path.empty()) {
        ensure_parent_dir(report_path);
        std::ofstream os(report_path, std::ios::trunc);
        os << report.dump(2) << "\n";
    }
    std::cout << report.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale generative recommendation (RQ tokenizer + seq2seq generator)"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string tokenizer_ckpt, resume, out_path, checkpoint_dir, report_path, export_trie_path, strategy_flag;
    int bench_epochs = 3;

    auto add_common = [&common](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "JSON config file");
        sub->add_option("--set", common.overrides, "override a config key: --set train.lambda=0.5")->take_all();
        sub->allow_extras();
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic interactions + embeddings corpus");
    add_common(synth);

    CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain the tokenizer on the item embeddings");
    add_common(pretrain);
    pretrain->add_option("--resume", resume, "continue from an existing tokenizer checkpoint");
    pretrain->add_option("--out", out_path, "tokenizer checkpoint path")->required();

    CLI::App* train = app.add_subcommand("train", "run bi-level (or ablation) training");
    add_common(train);
    train->add_option("--tokenizer", tokenizer_ckpt, "pretrained tokenizer checkpoint");
    train->add_option("--strategy", strategy_flag, "bloger|bloger-no-gs|joint|joint-gs|fixed");

    CLI::App* eval_cmd = app.add_subcommand("eval", "full-ranking evaluation of a trained checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint_dir, "directory holding model.ckpt and tokenizer.ckpt")->required();
    eval_cmd->add_option("--report", report_path, "write the evaluation report JSON here");
    eval_cmd->add_option("--export-trie", export_trie_path, "write the identifier trie as text");

    CLI::App* bench = app.add_subcommand("bench", "per-epoch wall-time comparison of fixed vs bloger");
    add_common(bench);
    bench->add_option("--epochs", bench_epochs, "epochs to time per strategy");
    bench->add_option("--report", report_path, "write the timing report JSON here");

    try {
        app.parse(argc, argv);
        CLI::App* sub = app.get_subcommands().front();
        RunConfig cfg = resolve_config(common, sub->remaining());
        if (!strategy_flag.empty()) cfg.train.strategy = strategy_from_string(strategy_flag);

        if (sub == synth) return cmd_synth(cfg);
        if (sub == pretrain) return cmd_pretrain(cfg, resume, out_path);
        if (sub == train) return cmd_train(cfg, tokenizer_ckpt);
        if (sub == eval_cmd) return cmd_eval(cfg, checkpoint_dir, report_path, export_trie_path);
        if (sub == bench) return cmd_bench(cfg, bench_epochs, report_path);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
