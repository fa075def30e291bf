#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convirt/data.hpp"
#include "convirt/model.hpp"
#include "convirt/train.hpp"

namespace convirt {

// ---------------------------------------------------------------- metrics

/// Mann-Whitney AUC; ties count one half.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Candidate indices by descending score, ties by ascending index.
using RankedList = std::vector<std::size_t>;

RankedList rank_by_score(std::span<const double> scores);

double precision_at_k(const RankedList& ranked, const std::vector<bool>& relevant, std::size_t k);

// --------------------------------------------------------------- retrieval

struct RetrievalCandidate {
    std::string id;
    ImageTensor image;
    std::size_t category = 0;
};

struct RetrievalSplit {
    std::vector<std::string> categories;
    // Per category.
    std::vector<std::vector<ImageTensor>> image_queries;
    std::vector<std::vector<TokenSequence>> text_queries;
    std::vector<RetrievalCandidate> candidates;
};

/// Indices into the labeled pool chosen by exclusive positivity.
struct RetrievalSelection {
    std::vector<std::vector<std::size_t>> queries;     // per category
    std::vector<std::vector<std::size_t>> candidates;  // per category
};

/// An image qualifies for category c iff label c is positive and all others
/// negative. Per category, draws n_candidate candidates then n_query queries
/// (without replacement, disjoint) from the qualifying images.
RetrievalSelection build_retrieval_split(const std::vector<std::vector<int>>& labels,
                                         const std::vector<std::string>& categories, std::size_t n_query,
                                         std::size_t n_candidate, std::uint64_t seed);

RetrievalSplit materialize_split(const RetrievalSelection& sel, const std::vector<std::string>& categories,
                                 const std::vector<std::string>& ids, const std::vector<ImageTensor>& images);

using PrecisionByK = std::map<std::size_t, double>;

inline const std::vector<std::size_t> kDefaultRetrievalK{5, 10, 50};

/// Query and candidate images ranked by cosine of the pre-projection h_v.
PrecisionByK retrieve_image_image(const ModelParams& params, const ModelConfig& cfg, const RetrievalSplit& split,
                                  const std::vector<std::size_t>& ks = kDefaultRetrievalK, std::size_t workers = 1);

/// How a text query scores a candidate image.
enum class TextImageScore {
    projected_cosine,  // cosine of g_u(f_u(.)) and g_v(f_v(.))
    binary_logit,      // matching logit of the contrastive-binary head
};

PrecisionByK retrieve_text_image(const ModelParams& params, const ModelConfig& cfg, const RetrievalSplit& split,
                                 const std::vector<std::size_t>& ks = kDefaultRetrievalK, std::size_t workers = 1,
                                 TextImageScore score = TextImageScore::projected_cosine);

/// Chance level of Prec@k for random rankings and its standard error over
/// `n_queries` independent queries (hypergeometric per query).
struct ChanceLevel {
    double mean = 0.0;
    double sigma = 0.0;
};
ChanceLevel precision_chance(std::size_t n_relevant, std::size_t n_candidates, std::size_t k, std::size_t n_queries);

/// Retrieval split manifest: role<TAB>category<TAB>path. Roles are
/// `query` (image), `candidate` (image) and `text_query` (a text file with one
/// query per line). Relative paths resolve against the manifest directory.
void write_split_manifest(const RetrievalSplit& split, const std::filesystem::path& dir, const Vocabulary& vocab);
RetrievalSplit load_split_manifest(const std::filesystem::path& path, const Vocabulary& vocab);

// ------------------------------------------------------------ classification

struct LabeledImageSet {
    std::vector<std::string> ids;
    std::vector<ImageTensor> images;
    std::vector<std::vector<int>> labels;  // one-hot (multi-class) or multi-hot
    bool multi_label = false;

    std::size_t size() const { return images.size(); }
    std::size_t width() const { return labels.empty() ? 0 : labels.front().size(); }
    LabeledImageSet subset(const std::vector<std::size_t>& idx) const;
};

/// Stratified seeded sample of `fraction` of the set (at least one example
/// per class present).
LabeledImageSet stratified_fraction(const LabeledImageSet& set, double fraction, std::uint64_t seed);

struct ClassificationData {
    LabeledImageSet train, validation, test;
};

struct ProbeConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t anneal_patience = 3;
    double anneal_factor = 0.5;
    double dropout = 0.2;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    void validate() const;
    bool operator==(const ProbeConfig&) const = default;
};

struct FineTuneConfig {
    ProbeConfig head;            // optimizer settings after warmup
    double warmup_lr = 1e-3;
    std::size_t warmup_steps = 200;
    double encoder_lr = 1e-4;    // stage-2 learning rate for every tensor

    bool operator==(const FineTuneConfig&) const = default;
};

struct ClassificationMetrics {
    double accuracy = 0.0;
    double macro_auc = 0.0;
    double best_val_metric = 0.0;
};

/// Linear classifier on the frozen encoder output.
struct LinearHead {
    Tensor w;  // [C, W]
    Tensor b;  // [C]
    std::vector<double> logits(std::span<const double> h) const;
};

ClassificationMetrics evaluate_head(const LinearHead& head, const std::vector<std::vector<double>>& features,
                                    const LabeledImageSet& set);

std::vector<std::vector<double>> encode_images(const ModelParams& params, const ModelConfig& cfg,
                                               const std::vector<ImageTensor>& images, std::size_t workers = 1);

ClassificationMetrics linear_probe(const ModelParams& params, const ModelConfig& cfg, const ClassificationData& data,
                                   const ProbeConfig& probe);

struct FineTuneResult {
    ClassificationMetrics metrics;
    ModelParams params_after_warmup;
};

FineTuneResult fine_tune(const ModelParams& params, const ModelConfig& cfg, const ClassificationData& data,
                         const FineTuneConfig& ft);

/// CSV of image_id, h_0..h_{W-1}[, label], 17 significant digits.
void export_embeddings(const ModelParams& params, const ModelConfig& cfg, const std::vector<std::string>& ids,
                       const std::vector<ImageTensor>& images, const std::vector<std::optional<std::size_t>>& labels,
                       const std::filesystem::path& path);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace convirt
