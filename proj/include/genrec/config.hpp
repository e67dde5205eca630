#pragma once

#include <string>

#include "genrec/bilevel_trainer.hpp"
#include "genrec/data_pipeline.hpp"
#include "genrec/rq_tokenizer.hpp"
#include "genrec/seq_recommender.hpp"

namespace genrec {

struct DataConfig {
    std::string interactions;
    std::string embeddings;
    std::string out_dir = "runs/out";
};

struct PretrainRunConfig {
    int epochs = 300;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 1024;
};

struct EvalRunConfig {
    int beam_width = 20;
};

// Whole-run configuration: one JSON document, unknown keys rejected, any leaf
// overridable by dot-path (e.g. --train.lambda 0.5).
struct RunConfig {
    uint64_t seed = 1;
    DataConfig data;
    SynthConfig synth;
    TokenizerConfig tokenizer;
    PretrainRunConfig pretrain;
    RecommenderConfig recommender;
    TrainConfig train;
    int updates_per_epoch = 4; // M': used when train.period_m is 0
    EvalRunConfig eval;

    void validate() const;
    // resolve M from M' given the dataset's steps per epoch
    int resolve_period_m(int64_t steps_per_epoch) const;
};

RunConfig default_run_config();
RunConfig load_run_config(const std::string& path);
// dot-path override; value parsed as JSON when possible, else as a string
void apply_override(RunConfig& cfg, const std::string& dotpath, const std::string& value);
std::string run_config_to_json(const RunConfig& cfg);

} // namespace genrec
