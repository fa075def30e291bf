#include "convirt/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace convirt {

void TrainConfig::validate() const {
    require(learning_rate > 0.0, "train: learning_rate must be > 0");
    require(weight_decay >= 0.0, "train: weight_decay must be >= 0");
    require(batch_size >= 2, "train: batch_size must be >= 2");
    require(eval_interval_steps >= 1, "train: eval_interval_steps must be >= 1");
    require(anneal_factor > 0.0 && anneal_factor <= 1.0, "train: anneal_factor must lie in (0,1]");
    require(anneal_patience >= 1, "train: anneal_patience must be >= 1");
    require(stop_after >= 1, "train: stop_after must be >= 1");
    require(validation_size >= 2, "train: validation_size must be >= 2");
}

OptimizerState OptimizerState::for_params(const TensorMap& params) {
    return {zeros_like(params), zeros_like(params), 0};
}

void adam_step(TensorMap& params, const TensorMap& grads, OptimizerState& state, double lr, double weight_decay,
               const std::set<std::string>& freeze, const AdamHyper& hyper) {
    require(params.size() == grads.size() && params.size() == state.m.size() && params.size() == state.v.size(),
            "adam_step: parameter, gradient and moment key sets differ");
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);

    for (auto& [name, w] : params) {
        const auto g = grads.find(name);
        const auto m = state.m.find(name);
        const auto v = state.v.find(name);
        require(g != grads.end() && m != state.m.end() && v != state.v.end(), "adam_step: missing entry for " + name);
        require(g->second.size() == w.size() && m->second.size() == w.size() && v->second.size() == w.size(),
                "adam_step: shape mismatch for " + name);
        if (freeze.count(name)) continue;
        auto& wd = w.data;
        auto& md = m->second.data;
        auto& vd = v->second.data;
        const auto& gd = g->second.data;
        for (std::size_t i = 0; i < wd.size(); ++i) {
            wd[i] -= lr * weight_decay * wd[i];
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gd[i];
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / c1, vhat = vd[i] / c2;
            wd[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

PlateauSchedule::PlateauSchedule(double lr, double factor, std::size_t patience, bool higher_is_better)
    : lr_(lr), factor_(factor), patience_(patience), higher_(higher_is_better), best_(0.0) {
    require(lr > 0.0 && factor > 0.0 && patience >= 1, "PlateauSchedule: invalid settings");
}

bool PlateauSchedule::observe(double metric) {
    const bool improved = !seen_ || (higher_ ? metric > best_ : metric < best_);
    if (improved) {
        best_ = metric;
        seen_ = true;
        bad_ = 0;
        return true;
    }
    if (++bad_ >= patience_) {
        lr_ *= factor_;
        bad_ = 0;
    }
    return false;
}

std::string TrainHistory::to_csv() const {
    std::ostringstream os;
    os << "step,train_loss,val_loss,lr\n" << std::setprecision(17);
    for (const auto& r : records) os << r.step << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << '\n';
    return os.str();
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write history " + path.string());
    out << to_csv();
}

DatasetSplit split_dataset(const std::vector<PairedExample>& dataset, std::size_t validation_size, std::uint64_t seed) {
    require(validation_size < dataset.size(), "split_dataset: validation set would consume the whole dataset");
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x73706c6974ULL));
    std::shuffle(order.begin(), order.end(), rng);
    // Keep each part in corpus order so the split does not depend on shuffle order.
    std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<long>(validation_size));
    std::vector<std::size_t> train(order.begin() + static_cast<long>(validation_size), order.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    DatasetSplit split;
    for (auto i : train) split.train.push_back(&dataset[i]);
    for (auto i : val) split.validation.push_back(&dataset[i]);
    return split;
}

std::uint64_t validation_seed(std::uint64_t seed) { return derive_seed(seed, 0x76616c6964ULL); }

double validation_loss(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                       const AugmentConfig& augment, const TrainConfig& train_cfg,
                       const std::vector<const PairedExample*>& validation, const std::vector<const PairedExample*>& pool) {
    require(validation.size() >= 2, "validation_loss: need at least two validation examples");
    const std::uint64_t vseed = validation_seed(train_cfg.seed);
    double weighted = 0.0;
    std::size_t counted = 0, batch_index = 0;
    for (std::size_t start = 0; start < validation.size(); start += train_cfg.batch_size, ++batch_index) {
        const std::size_t end = std::min(validation.size(), start + train_cfg.batch_size);
        if (end - start < 2) break;
        const std::vector<const PairedExample*> batch(validation.begin() + static_cast<long>(start),
                                                      validation.begin() + static_cast<long>(end));
        const auto views = prepare_views(batch, augment, vseed, batch_index, train_cfg.objective, pool, train_cfg.workers);
        const double l = batch_loss(params, model_cfg, loss_cfg, views, train_cfg.objective, train_cfg.workers);
        weighted += l * static_cast<double>(end - start);
        counted += end - start;
    }
    return weighted / static_cast<double>(counted);
}

PretrainResult pretrain(const std::vector<PairedExample>& dataset, const ModelConfig& model_cfg,
                        const LossConfig& loss_cfg, const AugmentConfig& augment, const TrainConfig& train_cfg,
                        const EvalCallback& on_eval) {
    model_cfg.validate();
    loss_cfg.validate();
    augment.validate();
    train_cfg.validate();
    require(augment.output_size == model_cfg.image_size, "pretrain: augment.output_size must equal model.image_size");

    const DatasetSplit split = split_dataset(dataset, train_cfg.validation_size, train_cfg.seed);
    require(split.train.size() >= train_cfg.batch_size, "pretrain: training split smaller than one batch");

    ModelParams params = init_params(model_cfg, train_cfg.seed);
    OptimizerState state = OptimizerState::for_params(params.tensors);
    PlateauSchedule schedule(train_cfg.learning_rate, train_cfg.anneal_factor, train_cfg.anneal_patience);

    PretrainResult result;
    result.params = params;
    result.initial_val_loss =
        validation_loss(params, model_cfg, loss_cfg, augment, train_cfg, split.validation, split.validation);
    spdlog::info("pretrain: {} train / {} validation pairs, initial validation loss {:.6f}", split.train.size(),
                 split.validation.size(), result.initial_val_loss);

    const std::uint64_t train_seed = derive_seed(train_cfg.seed, 0x747261696eULL);
    const std::size_t batches_per_epoch = split.train.size() / train_cfg.batch_size;
    std::vector<std::size_t> order(split.train.size());

    std::size_t step = 0, epoch = 0, since_eval = 0;
    double loss_sum = 0.0;
    while (result.history.records.size() < train_cfg.stop_after) {
        std::iota(order.begin(), order.end(), 0);
        Rng erng(derive_seed(train_seed, 0x65706f6368ULL, epoch++));
        std::shuffle(order.begin(), order.end(), erng);

        for (std::size_t b = 0; b < batches_per_epoch && result.history.records.size() < train_cfg.stop_after; ++b) {
            std::vector<const PairedExample*> batch;
            for (std::size_t i = 0; i < train_cfg.batch_size; ++i)
                batch.push_back(split.train[order[b * train_cfg.batch_size + i]]);

            LossAndGrad lg;
            try {
                const auto views =
                    prepare_views(batch, augment, train_seed, step, train_cfg.objective, split.train, train_cfg.workers);
                lg = loss_gradients(params, model_cfg, loss_cfg, views, train_cfg.objective, train_cfg.workers);
            } catch (const NumericError& e) {
                result.aborted = true;
                result.abort_reason = "step " + std::to_string(step) + ": " + e.what();
                spdlog::error("pretrain aborted at {}", result.abort_reason);
                return result;
            }
            adam_step(params.tensors, lg.grads, state, schedule.lr(), train_cfg.weight_decay, train_cfg.freeze);
            ++step;
            ++since_eval;
            loss_sum += lg.loss;

            if (step % train_cfg.eval_interval_steps != 0) continue;
            EvalRecord rec;
            rec.step = step;
            rec.train_loss = loss_sum / static_cast<double>(since_eval);
            rec.val_loss = validation_loss(params, model_cfg, loss_cfg, augment, train_cfg, split.validation,
                                           split.validation);
            rec.lr = schedule.lr();
            loss_sum = 0.0;
            since_eval = 0;
            if (!std::isfinite(rec.val_loss)) {
                result.aborted = true;
                result.abort_reason = "non-finite validation loss at step " + std::to_string(step);
                return result;
            }

            const bool best = schedule.observe(rec.val_loss);
            const std::size_t idx = result.history.records.size();
            result.history.records.push_back(rec);
            if (best) {
                result.history.best_index = idx;
                result.params = params;
            }
            spdlog::info("eval {:3d} step {:6d} train {:.6f} val {:.6f} lr {:.3g}{}", idx + 1, rec.step, rec.train_loss,
                         rec.val_loss, rec.lr, best ? " *" : "");
            if (on_eval) on_eval(idx, rec, params, best);
        }
    }
    return result;
}

// ---------------------------------------------------------------- grad check

bool GradCheckReport::passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::string GradCheckReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(28) << "tensor" << std::right << std::setw(9) << "checked" << std::setw(14)
       << "max_rel_err" << "  status\n";
    for (const auto& e : entries)
        os << std::left << std::setw(28) << e.tensor << std::right << std::setw(9) << e.checked << std::setw(14)
           << std::scientific << std::setprecision(3) << e.max_rel_error << std::defaultfloat << "  "
           << (e.passed ? "pass" : "FAIL") << '\n';
    return os.str();
}

std::string GradCheckReport::to_csv() const {
    std::ostringstream os;
    os << "tensor,checked,max_rel_error,passed\n" << std::setprecision(17);
    for (const auto& e : entries) os << e.tensor << ',' << e.checked << ',' << e.max_rel_error << ',' << (e.passed ? 1 : 0) << '\n';
    return os.str();
}

GradCheckReport grad_check(const ModelParams& params, const ModelConfig& model_cfg, const LossConfig& loss_cfg,
                           const ViewBatch& views, Objective objective, const GradCheckOptions& opts) {
    auto analytic = loss_gradients(params, model_cfg, loss_cfg, views, objective).grads;
    if (opts.perturb) opts.perturb(analytic);

    GradCheckReport report;
    report.tolerance = opts.tolerance;
    ModelParams probe = params;
    Rng rng(derive_seed(opts.seed, 0x6772616463ULL));

    for (const auto& [name, tensor] : params.tensors) {
        if (!opts.only.empty() && !opts.only.count(name)) continue;
        std::vector<std::size_t> coords(tensor.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (!is_bias(name) && coords.size() > opts.coords_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }

        GradCheckEntry entry;
        entry.tensor = name;
        for (std::size_t c : coords) {
            double& x = probe.at(name).data[c];
            const double orig = x;
            x = orig + opts.epsilon;
            const double up = batch_loss(probe, model_cfg, loss_cfg, views, objective);
            x = orig - opts.epsilon;
            const double down = batch_loss(probe, model_cfg, loss_cfg, views, objective);
            x = orig;
            const double numeric = (up - down) / (2.0 * opts.epsilon);
            const double a = analytic.at(name).data[c];
            const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), opts.denominator_floor);
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
            ++entry.checked;
        }
        entry.passed = entry.max_rel_error < opts.tolerance;
        report.entries.push_back(entry);
    }
    return report;
}

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.image_channels = {2, 3};
    cfg.image_size = 8;
    cfg.vocab_size = 12;
    cfg.embed_dim = 4;
    cfg.n_attention_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_dim = 6;
    cfg.projection_hidden = 5;
    cfg.projection_dim = 3;
    cfg.binary_width = 3;
    cfg.binary_hidden = 4;
    return cfg;
}

void jitter_biases(ModelParams& params, std::uint64_t seed, double scale) {
    Rng rng(derive_seed(seed, 0x62696173ULL));
    for (auto& [name, t] : params.tensors)
        if (is_bias(name))
            for (double& v : t.data) v = uniform(rng, -scale, scale);
}

ViewBatch random_view_batch(const ModelConfig& cfg, std::size_t n, std::uint64_t seed, Objective objective) {
    Rng rng(derive_seed(seed, 0x7669657773ULL));
    auto tokens = [&] {
        TokenSequence s;
        const std::size_t len = 2 + uniform_index(rng, 4);
        for (std::size_t t = 0; t < len; ++t) s.tokens.push_back(uniform_index(rng, cfg.vocab_size));
        return s;
    };
    ViewBatch views;
    for (std::size_t i = 0; i < n; ++i) {
        ImageTensor img(cfg.image_size, cfg.image_size);
        for (double& p : img.pixels) p = uniform(rng, 0.0, 1.0);
        views.images.push_back(std::move(img));
        views.texts.push_back(tokens());
        if (objective == Objective::binary) views.fake_texts.push_back(tokens());
    }
    return views;
}

}  // namespace convirt
