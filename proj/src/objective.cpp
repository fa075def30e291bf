#include "convirt/objective.hpp"

#include <algorithm>
#include <cmath>

namespace convirt {

void LossConfig::validate() const {
    require(temperature > 0.0, "loss: temperature must be > 0");
    require(lambda >= 0.0 && lambda <= 1.0, "loss: lambda must lie in [0,1]");
}

EmbeddingBatch EmbeddingBatch::from_rows(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), "EmbeddingBatch: no rows");
    EmbeddingBatch b(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].size() == b.dim, "EmbeddingBatch: ragged rows");
        std::copy(rows[i].begin(), rows[i].end(), b.values.begin() + static_cast<long>(i * b.dim));
    }
    return b;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a), nb = norm(b);
    require(na > 0.0 && nb > 0.0, "cosine_similarity: zero-norm input");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> cosine_similarity_grad(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a), nb = norm(b);
    require(na > 0.0 && nb > 0.0, "cosine_similarity_grad: zero-norm input");
    const double ab = dot(a, b);
    std::vector<double> g(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = b[i] / (na * nb) - ab * a[i] / (na * na * na * nb);
    return g;
}

namespace {

void check_pair(const EmbeddingBatch& V, const EmbeddingBatch& U) {
    require(V.n >= 1, "contrastive loss: empty batch");
    require(V.n == U.n && V.dim == U.dim, "contrastive loss: V and U shapes differ");
}

std::vector<std::vector<double>> unit_rows(const EmbeddingBatch& B, std::vector<double>* norms = nullptr) {
    std::vector<std::vector<double>> out(B.n);
    if (norms) norms->resize(B.n);
    for (std::size_t i = 0; i < B.n; ++i) {
        const auto r = B.row(i);
        const double nr = norm(r);
        require(nr > 0.0, "contrastive loss: zero-norm embedding row " + std::to_string(i));
        out[i].resize(B.dim);
        for (std::size_t j = 0; j < B.dim; ++j) out[i][j] = r[j] / nr;
        if (norms) (*norms)[i] = nr;
    }
    return out;
}

// Row softmax of logits[i, :] (or column softmax when `by_column`), with max subtraction.
// Fills `probs` and returns -log p_ii per row.
std::vector<double> softmax_nll(const std::vector<double>& logits, std::size_t n, bool by_column, std::vector<double>& probs) {
    probs.assign(n * n, 0.0);
    std::vector<double> nll(n);
    const auto at = [&](std::size_t r, std::size_t c) { return by_column ? logits[c * n + r] : logits[r * n + c]; };
    for (std::size_t r = 0; r < n; ++r) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, at(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) sum += std::exp(at(r, c) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(at(r, c) - lse);
        nll[r] = std::max(0.0, lse - at(r, r));
    }
    return nll;
}

}  // namespace

std::vector<double> cosine_matrix(const EmbeddingBatch& V, const EmbeddingBatch& U) {
    check_pair(V, U);
    const auto vh = unit_rows(V), uh = unit_rows(U);
    std::vector<double> s(V.n * V.n);
    for (std::size_t i = 0; i < V.n; ++i)
        for (std::size_t k = 0; k < V.n; ++k) s[i * V.n + k] = std::clamp(dot(vh[i], uh[k]), -1.0, 1.0);
    return s;
}

std::vector<double> info_nce_v2u(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature) {
    require(temperature > 0.0, "info_nce: temperature must be > 0");
    auto logits = cosine_matrix(V, U);
    for (double& x : logits) x /= temperature;
    std::vector<double> probs;
    return softmax_nll(logits, V.n, false, probs);
}

std::vector<double> info_nce_u2v(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature) {
    require(temperature > 0.0, "info_nce: temperature must be > 0");
    auto logits = cosine_matrix(V, U);
    for (double& x : logits) x /= temperature;
    std::vector<double> probs;
    return softmax_nll(logits, V.n, true, probs);
}

std::vector<double> contrastive_softmax(const EmbeddingBatch& V, const EmbeddingBatch& U, double temperature,
                                        bool text_to_image) {
    require(temperature > 0.0, "info_nce: temperature must be > 0");
    auto logits = cosine_matrix(V, U);
    for (double& x : logits) x /= temperature;
    std::vector<double> probs;
    softmax_nll(logits, V.n, text_to_image, probs);
    return probs;
}

ContrastiveGrad convirt_loss_with_grad(const EmbeddingBatch& V, const EmbeddingBatch& U, const LossConfig& cfg) {
    cfg.validate();
    check_pair(V, U);
    const std::size_t n = V.n, d = V.dim;
    std::vector<double> nv, nu;
    const auto vh = unit_rows(V, &nv), uh = unit_rows(U, &nu);

    std::vector<double> logits(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) logits[i * n + k] = std::clamp(dot(vh[i], uh[k]), -1.0, 1.0) / cfg.temperature;

    std::vector<double> p_row, p_col;
    ContrastiveGrad out;
    out.loss.image_to_text = softmax_nll(logits, n, false, p_row);
    out.loss.text_to_image = softmax_nll(logits, n, true, p_col);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += cfg.lambda * out.loss.image_to_text[i] + (1.0 - cfg.lambda) * out.loss.text_to_image[i];
    out.loss.total = total / static_cast<double>(n);

    // dL/dS[i,k] where S is the cosine matrix; p_col[k*n+i] is the softmax over i of column k.
    std::vector<double> gs(n * n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double delta = i == k ? 1.0 : 0.0;
            gs[i * n + k] = inv_n / cfg.temperature *
                            (cfg.lambda * (p_row[i * n + k] - delta) + (1.0 - cfg.lambda) * (p_col[k * n + i] - delta));
        }

    // Through the normalizations: S = vh uh^T.
    out.grad_v = EmbeddingBatch(n, d);
    out.grad_u = EmbeddingBatch(n, d);
    std::vector<double> dvh(d), duh(d);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(dvh.begin(), dvh.end(), 0.0);
        std::fill(duh.begin(), duh.end(), 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            const double gv = gs[i * n + k], gu = gs[k * n + i];
            for (std::size_t j = 0; j < d; ++j) {
                dvh[j] += gv * uh[k][j];
                duh[j] += gu * vh[k][j];
            }
        }
        const double pv = dot(dvh, vh[i]), pu = dot(duh, uh[i]);
        auto gv_row = out.grad_v.row(i);
        auto gu_row = out.grad_u.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            gv_row[j] = (dvh[j] - pv * vh[i][j]) / nv[i];
            gu_row[j] = (duh[j] - pu * uh[i][j]) / nu[i];
        }
    }
    return out;
}

LossBreakdown convirt_loss(const EmbeddingBatch& V, const EmbeddingBatch& U, const LossConfig& cfg) {
    cfg.validate();
    LossBreakdown out;
    out.image_to_text = info_nce_v2u(V, U, cfg.temperature);
    out.text_to_image = info_nce_u2v(V, U, cfg.temperature);
    double total = 0.0;
    for (std::size_t i = 0; i < V.n; ++i)
        total += cfg.lambda * out.image_to_text[i] + (1.0 - cfg.lambda) * out.text_to_image[i];
    out.total = total / static_cast<double>(V.n);
    return out;
}

// ----------------------------------------------------------------- binary head

double binary_logit(const ModelParams& params, std::span<const double> h_v, std::span<const double> h_u,
                    BinaryTrace* trace) {
    const auto pv = affine_forward(params.at("bin.img.w"), params.at("bin.img.b"), h_v);
    const auto pu = affine_forward(params.at("bin.txt.w"), params.at("bin.txt.b"), h_u);
    std::vector<double> joint(pv);
    joint.insert(joint.end(), pu.begin(), pu.end());
    auto hidden = affine_forward(params.at("bin.hidden.w"), params.at("bin.hidden.b"), joint);
    for (double& x : hidden) x = std::max(0.0, x);
    const double logit = affine_forward(params.at("bin.out.w"), params.at("bin.out.b"), hidden)[0];
    if (trace) {
        trace->h_v.assign(h_v.begin(), h_v.end());
        trace->h_u.assign(h_u.begin(), h_u.end());
        trace->joint = std::move(joint);
        trace->hidden = std::move(hidden);
    }
    return logit;
}

double bce_with_logit(double logit, bool label) {
    // softplus(z) - y z
    const double softplus = logit > 0.0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
    return softplus - (label ? logit : 0.0);
}

double binary_contrastive_loss(std::span<const double> h_v, std::span<const double> h_u, bool is_real,
                               const ModelParams& params) {
    return bce_with_logit(binary_logit(params, h_v, h_u), is_real);
}

namespace {

// Accumulates head gradients for dL/dlogit = `g`; returns (dh_v, dh_u).
std::pair<std::vector<double>, std::vector<double>> binary_backward(const ModelParams& params, const BinaryTrace& tr,
                                                                    double g, TensorMap& grads) {
    const double dy[1] = {g};
    auto dhidden = affine_backward(params.at("bin.out.w"), tr.hidden, dy, grads.at("bin.out.w"), grads.at("bin.out.b"));
    for (std::size_t i = 0; i < dhidden.size(); ++i)
        if (tr.hidden[i] <= 0.0) dhidden[i] = 0.0;
    auto djoint = affine_backward(params.at("bin.hidden.w"), tr.joint, dhidden, grads.at("bin.hidden.w"),
                                  grads.at("bin.hidden.b"));
    const std::size_t w = djoint.size() / 2;
    const std::vector<double> dpv(djoint.begin(), djoint.begin() + static_cast<long>(w));
    const std::vector<double> dpu(djoint.begin() + static_cast<long>(w), djoint.end());
    auto dhv = affine_backward(params.at("bin.img.w"), tr.h_v, dpv, grads.at("bin.img.w"), grads.at("bin.img.b"));
    auto dhu = affine_backward(params.at("bin.txt.w"), tr.h_u, dpu, grads.at("bin.txt.w"), grads.at("bin.txt.b"));
    return {std::move(dhv), std::move(dhu)};
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_finite(std::span<const double> v, const std::string& what) {
    if (!all_finite(v)) throw NumericError("non-finite values in " + what);
}

struct PairForward {
    ImageTrace image;
    TextTrace text, fake;
    ProjectionTrace proj_v, proj_u;
    BinaryTrace bin_real, bin_fake;
    std::vector<double> h_v, h_u, h_fake, v, u;
    double logit_real = 0.0, logit_fake = 0.0;
};

std::vector<PairForward> forward_all(const ModelParams& params, const ModelConfig& mc, const ViewBatch& views,
                                     Objective objective, bool keep_traces, std::size_t workers) {
    const std::size_t n = views.size();
    require(views.texts.size() == n, "loss: image/text count mismatch");
    if (objective == Objective::binary) require(views.fake_texts.size() == n, "loss: binary objective needs fake texts");
    std::vector<PairForward> fw(n);
    parallel_for(n, workers, [&](std::size_t i) {
        auto& f = fw[i];
        f.h_v = encode_image(params, mc, views.images[i], keep_traces ? &f.image : nullptr);
        check_finite(f.h_v, "image encoding of pair " + std::to_string(i));
        f.h_u = encode_text(params, mc, views.texts[i], keep_traces ? &f.text : nullptr);
        check_finite(f.h_u, "text encoding of pair " + std::to_string(i));
        if (objective == Objective::convirt) {
            f.v = project(params, mc, f.h_v, Modality::image, keep_traces ? &f.proj_v : nullptr);
            f.u = project(params, mc, f.h_u, Modality::text, keep_traces ? &f.proj_u : nullptr);
            check_finite(f.v, "image projection of pair " + std::to_string(i));
            check_finite(f.u, "text projection of pair " + std::to_string(i));
        } else {
            f.h_fake = encode_text(params, mc, views.fake_texts[i], keep_traces ? &f.fake : nullptr);
            check_finite(f.h_fake, "fake text encoding of pair " + std::to_string(i));
            f.logit_real = binary_logit(params, f.h_v, f.h_u, keep_traces ? &f.bin_real : nullptr);
            f.logit_fake = binary_logit(params, f.h_v, f.h_fake, keep_traces ? &f.bin_fake : nullptr);
        }
    });
    return fw;
}

double binary_mean_loss(const std::vector<PairForward>& fw) {
    double total = 0.0;
    for (const auto& f : fw) total += bce_with_logit(f.logit_real, true) + bce_with_logit(f.logit_fake, false);
    return total / static_cast<double>(2 * fw.size());
}

EmbeddingBatch stack(const std::vector<PairForward>& fw, std::vector<double> PairForward::*member) {
    std::vector<std::vector<double>> rows;
    for (const auto& f : fw) rows.push_back(f.*member);
    return EmbeddingBatch::from_rows(rows);
}

// Fixed number of accumulation slots independent of the worker count.
constexpr std::size_t kGradSlots = 8;

}  // namespace

std::string to_string(Objective o) { return o == Objective::binary ? "binary" : "convirt"; }

Objective objective_from_string(const std::string& s) {
    if (s == "convirt") return Objective::convirt;
    if (s == "binary") return Objective::binary;
    throw ContractViolation("unknown objective '" + s + "'");
}

ViewBatch prepare_views(const std::vector<const PairedExample*>& batch, const AugmentConfig& augment,
                        std::uint64_t seed, std::uint64_t step, Objective objective,
                        const std::vector<const PairedExample*>& pool, std::size_t workers) {
    augment.validate();
    const auto& fake_pool = pool.empty() ? batch : pool;
    if (objective == Objective::binary) require(fake_pool.size() >= 2, "prepare_views: fake pairs need >= 2 examples");
    ViewBatch views;
    const std::size_t n = batch.size();
    views.images.resize(n);
    views.texts.resize(n);
    if (objective == Objective::binary) views.fake_texts.resize(n);

    parallel_for(n, workers, [&](std::size_t i) {
        Rng rng(derive_seed(seed, step, i));
        const auto t = sample_transform(augment, rng);
        views.images[i] = apply_transform(batch[i]->image, t, augment.output_size);
        views.texts[i] = sample_sentence(*batch[i], rng);
        if (objective == Objective::binary) {
            const auto self = std::find(fake_pool.begin(), fake_pool.end(), batch[i]);
            const std::size_t m = fake_pool.size() - (self == fake_pool.end() ? 0 : 1);
            std::size_t j = uniform_index(rng, m);
            if (self != fake_pool.end() && j >= static_cast<std::size_t>(self - fake_pool.begin())) ++j;
            views.fake_texts[i] = sample_sentence(*fake_pool[j], rng);
        }
    });
    return views;
}

double batch_loss(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                  const ViewBatch& views, Objective objective, std::size_t workers) {
    loss_cfg.validate();
    require(views.size() >= 1, "loss: empty batch");
    const auto fw = forward_all(params, model_cfg, views, objective, false, workers);
    if (objective == Objective::binary) return binary_mean_loss(fw);
    return convirt_loss(stack(fw, &PairForward::v), stack(fw, &PairForward::u), loss_cfg).total;
}

LossAndGrad loss_gradients(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                           const ViewBatch& views, Objective objective, std::size_t workers) {
    loss_cfg.validate();
    const std::size_t n = views.size();
    if (objective == Objective::convirt) require(n >= 2, "loss_gradients: contrastive batches need N >= 2");
    require(n >= 1, "loss_gradients: empty batch");

    const auto fw = forward_all(params, model_cfg, views, objective, true, workers);
    LossAndGrad out;
    EmbeddingBatch gv, gu;
    if (objective == Objective::convirt) {
        auto cg = convirt_loss_with_grad(stack(fw, &PairForward::v), stack(fw, &PairForward::u), loss_cfg);
        out.loss = cg.loss.total;
        gv = std::move(cg.grad_v);
        gu = std::move(cg.grad_u);
    } else {
        out.loss = binary_mean_loss(fw);
    }
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");

    const std::size_t slots = std::min(n, kGradSlots);
    std::vector<TensorMap> partial(slots);
    parallel_for(slots, workers, [&](std::size_t s) {
        TensorMap& g = partial[s];
        g = zeros_like(params.tensors);
        for (std::size_t i = s; i < n; i += slots) {
            const auto& f = fw[i];
            if (objective == Objective::convirt) {
                const auto dh_v = backward_project(params, model_cfg, f.proj_v, gv.row(i), Modality::image, g);
                const auto dh_u = backward_project(params, model_cfg, f.proj_u, gu.row(i), Modality::text, g);
                backward_image(params, model_cfg, f.image, dh_v, g);
                backward_text(params, model_cfg, f.text, dh_u, g);
            } else {
                const double scale = 1.0 / static_cast<double>(2 * n);
                auto [dv_r, du_r] = binary_backward(params, f.bin_real, (sigmoid(f.logit_real) - 1.0) * scale, g);
                auto [dv_f, du_f] = binary_backward(params, f.bin_fake, sigmoid(f.logit_fake) * scale, g);
                for (std::size_t j = 0; j < dv_r.size(); ++j) dv_r[j] += dv_f[j];
                backward_image(params, model_cfg, f.image, dv_r, g);
                backward_text(params, model_cfg, f.text, du_r, g);
                backward_text(params, model_cfg, f.fake, du_f, g);
            }
        }
    });

    out.grads = std::move(partial[0]);
    for (std::size_t s = 1; s < slots; ++s) add_into(out.grads, partial[s]);
    for (const auto& [name, t] : out.grads) check_finite(t.data, "gradient of " + name);
    return out;
}

}  // namespace convirt
