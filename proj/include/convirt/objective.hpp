#pragma once

#include <vector>

#include "convirt/augment.hpp"
#include "convirt/common.hpp"
#include "convirt/data.hpp"
#include "convirt/model.hpp"

namespace convirt {

struct LossConfig {
    double temperature = 0.1;
    double lambda = 0.75;

    void validate() const;
    bool operator==(const LossConfig&) const = default;
};

/// N x d matrix of embeddings, one row per example.
struct EmbeddingBatch {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<double> values;

    EmbeddingBatch() = default;
    EmbeddingBatch(std::size_t rows, std::size_t d) : n(rows), dim(d), values(rows * d, 0.0) {}
    static EmbeddingBatch from_rows(const std::vector<std::vector<double>>& rows);

    std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    std::span<double> row(std::size_t i) { return {values.data() + i * dim, dim}; }
};

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> image_to_text;  // l^(v->u)_i
    std::vector<double> text_to_image;  // l^(u->v)_i
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Gradient of cos(a, b) with respect to a.
std::vector<double> cosine_similarity_grad(std::span<const double> a, std::span<const double> b);

/// N x N matrix of cos(v_i, u_k), row-major.
std::vector<double> cosine_matrix(const EmbeddingBatch& V, const EmbeddingBatch& U);

std::vector<double> info_nce_v2u(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature);
std::vector<double> info_nce_u2v(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature);

/// Softmax probabilities behind the two losses as an N x N row-major matrix:
/// row i holds softmax_k <v_i,u_k>/tau (image to text) or softmax_k <u_i,v_k>/tau.
std::vector<double> contrastive_softmax(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature,
                                        bool text_to_image);

LossBreakdown convirt_loss(const EmbeddingBatch& V, const EmbeddingBatch& U, const LossConfig& cfg);

/// Loss together with dL/dV and dL/dU.
struct ContrastiveGrad {
    LossBreakdown loss;
    EmbeddingBatch grad_v;
    EmbeddingBatch grad_u;
};

ContrastiveGrad convirt_loss_with_grad(const EmbeddingBatch& V, const EmbeddingBatch& U, const LossConfig& cfg);

/// Contrastive-Binary head: logit of P(real pair | h_v, h_u).
struct BinaryTrace {
    std::vector<double> h_v, h_u, joint, hidden;
};
double binary_logit(const ModelParams& params, std::span<const double> h_v, std::span<const double> h_u,
                    BinaryTrace* trace = nullptr);

/// Binary cross-entropy of the head's prediction against `is_real`.
double binary_contrastive_loss(std::span<const double> h_v, std::span<const double> h_u, bool is_real,
                               const ModelParams& params);

/// BCE from a logit, computed stably.
double bce_with_logit(double logit, bool label);

enum class Objective { convirt, binary };
std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

/// Augmented inputs for one step. The augmentation happens outside the
/// differentiated graph.
struct ViewBatch {
    std::vector<ImageTensor> images;
    std::vector<TokenSequence> texts;
    // Binary objective only: one mismatched report sentence per image.
    std::vector<TokenSequence> fake_texts;

    std::size_t size() const { return images.size(); }
};

/// Draws t_v and t_u for every pair. Each pair uses its own sub-seed
/// derive_seed(seed, step, i), so the result is independent of worker count.
/// For the binary objective, the fake report for pair i is drawn uniformly
/// from `pool` excluding the pair's own example.
ViewBatch prepare_views(const std::vector<const PairedExample*>& batch, const AugmentConfig& augment,
                        std::uint64_t seed, std::uint64_t step, Objective objective,
                        const std::vector<const PairedExample*>& pool = {}, std::size_t workers = 1);

struct LossAndGrad {
    double loss = 0.0;
    TensorMap grads;
};

/// Exact gradient of the selected objective with respect to every parameter
/// tensor (keys match params). `workers` > 1 parallelizes per-example passes;
/// results are bitwise identical for any worker count.
LossAndGrad loss_gradients(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                           const ViewBatch& views, Objective objective, std::size_t workers = 1);

/// Loss only (no gradients), same arithmetic as loss_gradients.
double batch_loss(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                  const ViewBatch& views, Objective objective, std::size_t workers = 1);

}  // namespace convirt
