#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "genrec/data_pipeline.hpp"
#include "genrec/optim.hpp"
#include "genrec/rq_tokenizer.hpp"
#include "genrec/seq_recommender.hpp"

namespace genrec {

enum class Strategy { kBloger, kBlogerNoGs, kJoint, kJointGs, kFixed };

Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

struct TrainConfig {
    double eta_rec = 5e-4;  // recommender learning rate
    double eta_tok = 1e-4;  // tokenizer learning rate
    double lambda = 0.5;    // tokenization-loss weight in the outer objective
    int period_m = 1;       // tokenizer update every M steps
    int batch_size = 256;
    int max_epochs = 200;
    int patience = 20;
    Strategy strategy = Strategy::kBloger;
    uint64_t seed = 1;
    bool same_batch = false;   // tentative and meta-test share the mini-batch
    double weight_decay = 0.0; // AdamW decoupled decay for both models
    bool plain_updates = false; // diagnostic: plain SGD instead of AdamW
    int eval_every = 0;        // ranking metrics every N epochs (0 = final epoch only)
    int beam_width = 20;

    void validate() const;
};

struct GradientPair {
    std::map<std::string, Tensor> rec;   // d L_rec(phi, theta') / d phi
    std::map<std::string, Tensor> token; // d L_token(phi) / d phi
};

struct SurgeryOutcome {
    int conflict_groups = 0;
    int total_groups = 0;
    bool applied = false;
};

// Per named tensor: when the group's inner product is negative and apply is
// set, the recommendation gradient loses its component along the tokenization
// gradient. Zero-norm token groups are left untouched.
SurgeryOutcome gradient_surgery(GradientPair& pair, bool apply);

struct StepRecord {
    int64_t step = 0;
    bool meta = false;              // tentative update + meta-test happened
    bool tokenizer_updated = false;
    int conflict_groups = 0;
    int total_groups = 0;
    bool surgery_applied = false;   // some group actually projected
    uint64_t theta_digest = 0;
    uint64_t phi_digest = 0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss_rec = 0.0;
    double train_loss_token = 0.0; // meta/joint steps only; 0 when none ran
    double val_loss_rec = 0.0;
    double conflict_rate = 0.0;    // fraction of parameter groups in conflict
    std::optional<double> recall5, ndcg5, recall10, ndcg10;
    double wall_time_s = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::vector<StepRecord> steps;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    ParameterSet best_theta;
    ParameterSet best_phi;
    bool early_stopped = false;
};

// training views of the split dataset
std::vector<RecExample> training_pairs(const InteractionDataset& ds, int t_items);
std::vector<RecExample> validation_pairs(const InteractionDataset& ds, int t_items);
std::vector<RecExample> test_pairs(const InteractionDataset& ds, int t_items);

// Owns the graph of one tentative update so the meta-test can differentiate
// through it. theta itself is never touched.
struct MetaStep {
    Graph graph;
    ParamVars theta_vars;
    ParamVars phi_vars;
    ParamVars theta_prime;
    double support_loss = 0.0;
};

// Alternating optimization: every step updates the recommender; every M-th
// step runs the tentative update, meta-test gradients, optional surgery, and
// the tokenizer update. Joint strategies collapse the two levels into one
// step; fixed freezes the tokenizer.
class BilevelTrainer {
public:
    BilevelTrainer(SeqRecommender& model, RqTokenizer& tokenizer, TrainConfig cfg);

    const TrainConfig& config() const { return cfg_; }

    // theta <- optimizer step against d L_rec / d theta; returns the loss
    double recommender_step(const Tensor& embeddings, const std::vector<RecExample>& batch);

    std::unique_ptr<MetaStep> tentative_update(const Tensor& embeddings, const std::vector<RecExample>& support);

    // d L_rec(phi, theta') / d phi through the recorded step, and the plain
    // tokenization gradient over the query batch's items (with multiplicity)
    GradientPair meta_test_gradients(MetaStep& step, const Tensor& embeddings, const std::vector<RecExample>& query);

    // phi <- optimizer step against rec + lambda * token
    void tokenizer_step(const GradientPair& pair);

    TrainResult train(const InteractionDataset& data, const Tensor& embeddings);

private:
    SeqRecommender& model_;
    RqTokenizer& tokenizer_;
    TrainConfig cfg_;
    AdamW opt_theta_;
    AdamW opt_phi_;
    Rng rng_;

    std::map<int, double> item_weights(const std::vector<RecExample>& batch, std::vector<int>& items) const;
    double tokenization_loss_value(const Tensor& embeddings, const std::vector<RecExample>& batch) const;
    void joint_step(const Tensor& embeddings, const std::vector<RecExample>& batch, StepRecord& rec, double& loss_rec,
                    double& loss_token);
};

} // namespace genrec
