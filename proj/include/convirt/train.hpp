#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "convirt/augment.hpp"
#include "convirt/model.hpp"
#include "convirt/objective.hpp"

namespace convirt {

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-6;
    std::size_t batch_size = 32;
    std::size_t eval_interval_steps = 5000;
    double anneal_factor = 0.5;
    std::size_t anneal_patience = 5;
    std::size_t stop_after = 200;
    std::size_t validation_size = 5000;
    Objective objective = Objective::convirt;
    std::uint64_t seed = 0;
    std::set<std::string> freeze;
    std::size_t workers = 1;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Adam moments and step counter.
struct OptimizerState {
    TensorMap m;
    TensorMap v;
    std::uint64_t t = 0;

    static OptimizerState for_params(const TensorMap& params);
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One Adam step with bias correction. Decoupled weight decay w <- w - lr*wd*w
/// is applied before the moment update. Tensors named in `freeze` are skipped.
void adam_step(TensorMap& params, const TensorMap& grads, OptimizerState& state, double lr, double weight_decay,
               const std::set<std::string>& freeze = {}, const AdamHyper& hyper = {});

/// Plateau schedule: halves (by `factor`) after `patience` evaluations without
/// a strict improvement.
class PlateauSchedule {
public:
    PlateauSchedule(double lr, double factor, std::size_t patience, bool higher_is_better = false);

    /// Records a metric; returns true if it is the best so far.
    bool observe(double metric);
    double lr() const { return lr_; }
    double best() const { return best_; }

private:
    double lr_;
    double factor_;
    std::size_t patience_;
    bool higher_;
    double best_;
    std::size_t bad_ = 0;
    bool seen_ = false;
};

struct EvalRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainHistory {
    std::vector<EvalRecord> records;
    std::optional<std::size_t> best_index;

    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

struct DatasetSplit {
    std::vector<const PairedExample*> train;
    std::vector<const PairedExample*> validation;
};

/// Holds out `validation_size` examples chosen by a seeded permutation.
DatasetSplit split_dataset(const std::vector<PairedExample>& dataset, std::size_t validation_size, std::uint64_t seed);

/// Validation loss with fixed-seed augmentations: consecutive batches of
/// `batch_size` (a trailing batch of at least two examples is kept).
double validation_loss(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                       const AugmentConfig& augment, const TrainConfig& train_cfg,
                       const std::vector<const PairedExample*>& validation, const std::vector<const PairedExample*>& pool);

struct PretrainResult {
    ModelParams params;   // best validation loss
    TrainHistory history;
    double initial_val_loss = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

/// Called after every evaluation with the record index and the current params.
using EvalCallback = std::function<void(std::size_t eval_index, const EvalRecord&, const ModelParams& current, bool is_best)>;

PretrainResult pretrain(const std::vector<PairedExample>& dataset, const ModelConfig& model_cfg,
                        const LossConfig& loss_cfg, const AugmentConfig& augment, const TrainConfig& train_cfg,
                        const EvalCallback& on_eval = {});

/// Seed used for validation augmentations.
std::uint64_t validation_seed(std::uint64_t seed);

// ---------------------------------------------------------------- grad check

struct GradCheckEntry {
    std::string tensor;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    bool passed() const;
    std::string to_table() const;
    std::string to_csv() const;
};

struct GradCheckOptions {
    double epsilon = 1e-4;
    double tolerance = 1e-4;
    std::size_t coords_per_tensor = 50;
    // Lower bound on the relative-error denominator |g_a| + |g_n|.
    double denominator_floor = 1e-6;
    std::uint64_t seed = 0;
    // Only these tensors are checked when non-empty.
    std::set<std::string> only;
    // Hook to tamper with analytic gradients (fault-injection tests).
    std::function<void(TensorMap&)> perturb;
};

/// Central-difference check of loss_gradients on a fixed view batch.
GradCheckReport grad_check(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                           const ViewBatch& views, Objective objective, const GradCheckOptions& opts = {});

/// Tiny configuration where every tensor has at most 200 entries.
ModelConfig tiny_model_config();

/// Gives every bias tensor uniform(-scale, scale) entries so bias gradients
/// and ReLU gating are exercised away from zero.
void jitter_biases(ModelParams& params, std::uint64_t seed, double scale = 0.1);

/// A random N-pair view batch matching `cfg` (images of cfg.image_size).
ViewBatch random_view_batch(const ModelConfig& cfg, std::size_t n, std::uint64_t seed, Objective objective);

}  // namespace convirt
