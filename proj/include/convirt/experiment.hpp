#pragma once

#include <map>
#include <string>
#include <vector>

#include "convirt/augment.hpp"
#include "convirt/data.hpp"
#include "convirt/eval.hpp"
#include "convirt/model.hpp"
#include "convirt/objective.hpp"
#include "convirt/train.hpp"

namespace convirt {

/// End-to-end synthetic experiment: pretrain on one corpus, evaluate on
/// held-out corpora drawn from the same generator.
struct ExperimentConfig {
    SyntheticSpec corpus;
    std::uint64_t eval_seed = 7919;
    AugmentConfig augment;
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    ProbeConfig probe;
    std::size_t probe_train = 800;
    std::size_t probe_validation = 200;
    std::size_t probe_test = 400;
    std::vector<double> fractions{0.01, 0.1, 1.0};
    std::size_t n_query = 10;
    std::size_t n_candidate = 100;
    std::size_t text_queries_per_class = 5;
    std::size_t text_query_tokens = 4;
    std::vector<std::size_t> ks = kDefaultRetrievalK;
    bool with_binary = true;
    bool with_correlation = true;
};

/// Desk-scale settings used by the acceptance run.
ExperimentConfig desk_experiment_config();

struct EvalCorpora {
    RetrievalSplit split;
    ClassificationData probe;
};

/// Held-out retrieval split (with keyword text queries) and probe sets.
EvalCorpora make_eval_corpora(const ExperimentConfig& cfg);

/// Text queries for category c: `n` sequences of keyword tokens.
std::vector<TokenSequence> keyword_queries(std::size_t c, const SyntheticSpec& spec, const Vocabulary& vocab,
                                           std::size_t n, std::size_t tokens, std::uint64_t seed);

/// Metric name -> value, in insertion-independent (sorted) order.
using MetricTable = std::map<std::string, double>;

std::string metrics_to_csv(const MetricTable& metrics);

/// Retrieval and probe metrics for one set of params under `prefix`.
void evaluate_representation(const ModelParams& params, const ExperimentConfig& cfg, const EvalCorpora& eval,
                             const std::string& prefix, MetricTable& out, bool with_probe = true);

struct ExperimentResult {
    PretrainResult convirt;
    PretrainResult binary;
    MetricTable metrics;
    // Per evaluation: -validation loss and image-image Prec@10 of that checkpoint.
    std::vector<double> neg_val_loss;
    std::vector<double> checkpoint_prec10;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace convirt
