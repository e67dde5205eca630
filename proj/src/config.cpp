#include "genrec/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include <json.hpp>

#include "genrec/errors.hpp"

namespace genrec {

using nlohmann::json;

namespace {

using Setter = std::function<void(RunConfig&, const json&)>;

template <typename T>
Setter set_field(T RunConfig::* field) {
    return [field](RunConfig& cfg, const json& v) { cfg.*field = v.get<T>(); };
}

template <typename Sub, typename T>
Setter set_sub(Sub RunConfig::* sub, T Sub::* field) {
    return [sub, field](RunConfig& cfg, const json& v) { (cfg.*sub).*field = v.get<T>(); };
}

const std::map<std::string, Setter>& schema() {
    static const std::map<std::string, Setter> s = [] {
        std::map<std::string, Setter> m;
        m["seed"] = [](RunConfig& c, const json& v) { c.seed = v.get<uint64_t>(); };

        m["data.interactions"] = set_sub(&RunConfig::data, &DataConfig::interactions);
        m["data.embeddings"] = set_sub(&RunConfig::data, &DataConfig::embeddings);
        m["data.out_dir"] = set_sub(&RunConfig::data, &DataConfig::out_dir);

        m["synth.items"] = set_sub(&RunConfig::synth, &SynthConfig::items);
        m["synth.users"] = set_sub(&RunConfig::synth, &SynthConfig::users);
        m["synth.clusters"] = set_sub(&RunConfig::synth, &SynthConfig::clusters);
        m["synth.seq_len"] = set_sub(&RunConfig::synth, &SynthConfig::seq_len);
        m["synth.noise"] = set_sub(&RunConfig::synth, &SynthConfig::noise);
        m["synth.embed_dim"] = set_sub(&RunConfig::synth, &SynthConfig::embed_dim);

        m["tokenizer.levels"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::levels);
        m["tokenizer.codebook_size"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::codebook_size);
        m["tokenizer.d_in"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::d_in);
        m["tokenizer.d_code"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::d_code);
        m["tokenizer.encoder_hidden"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::encoder_hidden);
        m["tokenizer.decoder_hidden"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::decoder_hidden);
        m["tokenizer.beta"] = set_sub(&RunConfig::tokenizer, &TokenizerConfig::beta);

        m["pretrain.epochs"] = set_sub(&RunConfig::pretrain, &PretrainRunConfig::epochs);
        m["pretrain.lr"] = set_sub(&RunConfig::pretrain, &PretrainRunConfig::lr);
        m["pretrain.weight_decay"] = set_sub(&RunConfig::pretrain, &PretrainRunConfig::weight_decay);
        m["pretrain.batch_size"] = set_sub(&RunConfig::pretrain, &PretrainRunConfig::batch_size);

        m["recommender.d_model"] = set_sub(&RunConfig::recommender, &RecommenderConfig::d_model);
        m["recommender.encoder_layers"] = set_sub(&RunConfig::recommender, &RecommenderConfig::encoder_layers);
        m["recommender.decoder_layers"] = set_sub(&RunConfig::recommender, &RecommenderConfig::decoder_layers);
        m["recommender.heads"] = set_sub(&RunConfig::recommender, &RecommenderConfig::heads);
        m["recommender.head_dim"] = set_sub(&RunConfig::recommender, &RecommenderConfig::head_dim);
        m["recommender.ff_dim"] = set_sub(&RunConfig::recommender, &RecommenderConfig::ff_dim);
        m["recommender.dropout"] = set_sub(&RunConfig::recommender, &RecommenderConfig::dropout);
        m["recommender.max_items"] = set_sub(&RunConfig::recommender, &RecommenderConfig::max_items);

        m["train.eta_rec"] = set_sub(&RunConfig::train, &TrainConfig::eta_rec);
        m["train.eta_tok"] = set_sub(&RunConfig::train, &TrainConfig::eta_tok);
        m["train.lambda"] = set_sub(&RunConfig::train, &TrainConfig::lambda);
        m["train.period_m"] = set_sub(&RunConfig::train, &TrainConfig::period_m);
        m["train.batch_size"] = set_sub(&RunConfig::train, &TrainConfig::batch_size);
        m["train.max_epochs"] = set_sub(&RunConfig::train, &TrainConfig::max_epochs);
        m["train.patience"] = set_sub(&RunConfig::train, &TrainConfig::patience);
        m["train.strategy"] = [](RunConfig& c, const json& v) {
            c.train.strategy = strategy_from_string(v.get<std::string>());
        };
        m["train.same_batch"] = set_sub(&RunConfig::train, &TrainConfig::same_batch);
        m["train.weight_decay"] = set_sub(&RunConfig::train, &TrainConfig::weight_decay);
        m["train.plain_updates"] = set_sub(&RunConfig::train, &TrainConfig::plain_updates);
        m["train.eval_every"] = set_sub(&RunConfig::train, &TrainConfig::eval_every);
        m["train.updates_per_epoch"] = set_field(&RunConfig::updates_per_epoch);

        m["eval.beam_width"] = set_sub(&RunConfig::eval, &EvalRunConfig::beam_width);
        return m;
    }();
    return s;
}

void flatten_into(const json& node, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
    if (node.is_object()) {
        for (auto it = node.begin(); it != node.end(); ++it) {
            flatten_into(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
        }
    } else {
        out.emplace_back(prefix, node);
    }
}

void apply_json(RunConfig& cfg, const json& doc) {
    std::vector<std::pair<std::string, json>> leaves;
    flatten_into(doc, "", leaves);
    for (const auto& [path, value] : leaves) {
        auto it = schema().find(path);
        if (it == schema().end()) throw ConfigError("unknown config key '" + path + "'");
        try {
            it->second(cfg, value);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("bad value for '" + path + "': " + e.what());
        }
    }
}

} // namespace

void RunConfig::validate() const {
    if (train.period_m == 0 && updates_per_epoch < 1) {
        throw ConfigError("set train.period_m >= 1 or train.updates_per_epoch >= 1");
    }
    if (train.period_m > 0) {
        train.validate();
    } else {
        TrainConfig probe = train;
        probe.period_m = 1; // resolved later from updates_per_epoch
        probe.validate();
    }
    if (tokenizer.d_in > 0) tokenizer.validate();
    recommender.validate();
    synth.validate();
    if (pretrain.epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
    if (pretrain.lr < 0.0) throw ConfigError("pretrain.lr must be >= 0");
    if (pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    if (eval.beam_width < 1) throw ConfigError("eval.beam_width must be >= 1");
    if (updates_per_epoch < 0) throw ConfigError("train.updates_per_epoch must be >= 0");
}

int RunConfig::resolve_period_m(int64_t steps_per_epoch) const {
    if (train.period_m > 0) return train.period_m;
    const int64_t m = steps_per_epoch / std::max(1, updates_per_epoch);
    return static_cast<int>(std::max<int64_t>(1, m));
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.train.period_m = 0; // derive from updates_per_epoch unless set explicitly
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json doc;
    try {
        doc = json::parse(is);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
    RunConfig cfg = default_run_config();
    apply_json(cfg, doc);
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& dotpath, const std::string& value) {
    auto it = schema().find(dotpath);
    if (it == schema().end()) throw ConfigError("unknown config key '" + dotpath + "'");
    json v;
    try {
        v = json::parse(value);
    } catch (const std::exception&) {
        v = value; // plain string (e.g. strategy names, paths)
    }
    try {
        it->second(cfg, v);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("bad value for '" + dotpath + "': " + e.what());
    }
}

std::string run_config_to_json(const RunConfig& cfg) {
    json doc;
    doc["seed"] = cfg.seed;
    doc["data"] = {{"interactions", cfg.data.interactions},
                   {"embeddings", cfg.data.embeddings},
                   {"out_dir", cfg.data.out_dir}};
    doc["synth"] = {{"items", cfg.synth.items},       {"users", cfg.synth.users},
                    {"clusters", cfg.synth.clusters}, {"seq_len", cfg.synth.seq_len},
                    {"noise", cfg.synth.noise},       {"embed_dim", cfg.synth.embed_dim}};
    doc["tokenizer"] = {{"levels", cfg.tokenizer.levels},
                        {"codebook_size", cfg.tokenizer.codebook_size},
                        {"d_in", cfg.tokenizer.d_in},
                        {"d_code", cfg.tokenizer.d_code},
                        {"encoder_hidden", cfg.tokenizer.encoder_hidden},
                        {"decoder_hidden", cfg.tokenizer.decoder_hidden},
                        {"beta", cfg.tokenizer.beta}};
    doc["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                       {"lr", cfg.pretrain.lr},
                       {"weight_decay", cfg.pretrain.weight_decay},
                       {"batch_size", cfg.pretrain.batch_size}};
    doc["recommender"] = {{"d_model", cfg.recommender.d_model},
                          {"encoder_layers", cfg.recommender.encoder_layers},
                          {"decoder_layers", cfg.recommender.decoder_layers},
                          {"heads", cfg.recommender.heads},
                          {"head_dim", cfg.recommender.head_dim},
                          {"ff_dim", cfg.recommender.ff_dim},
                          {"dropout", cfg.recommender.dropout},
                          {"max_items", cfg.recommender.max_items}};
    doc["train"] = {{"eta_rec", cfg.train.eta_rec},
                    {"eta_tok", cfg.train.eta_tok},
                    {"lambda", cfg.train.lambda},
                    {"period_m", cfg.train.period_m},
                    {"updates_per_epoch", cfg.updates_per_epoch},
                    {"batch_size", cfg.train.batch_size},
                    {"max_epochs", cfg.train.max_epochs},
                    {"patience", cfg.train.patience},
                    {"strategy", to_string(cfg.train.strategy)},
                    {"same_batch", cfg.train.same_batch},
                    {"weight_decay", cfg.train.weight_decay},
                    {"plain_updates", cfg.train.plain_updates},
                    {"eval_every", cfg.train.eval_every}};
    doc["eval"] = {{"beam_width", cfg.eval.beam_width}};
    return doc.dump(2);
}

} // namespace genrec
