#include "convirt/experiment.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <iomanip>
#include <sstream>

namespace convirt {

ExperimentConfig desk_experiment_config() {
    ExperimentConfig cfg;
    cfg.corpus.n_classes = 8;
    cfg.corpus.n_pairs = 2000;
    cfg.corpus.image_size = 32;
    cfg.corpus.seed = 1;

    cfg.augment.output_size = 32;
    cfg.augment.crop_area_ratio = {0.8, 1.0};
    cfg.augment.blur_sigma = {0.1, 0.5};

    cfg.model.image_size = 32;

    cfg.train.learning_rate = 1e-3;
    cfg.train.batch_size = 32;
    cfg.train.validation_size = 200;
    cfg.train.eval_interval_steps = 112;
    cfg.train.anneal_patience = 3;
    cfg.train.stop_after = 15;
    cfg.train.seed = 11;

    cfg.probe.learning_rate = 1e-2;
    cfg.probe.max_epochs = 60;
    cfg.probe.seed = 5;
    return cfg;
}

std::vector<TokenSequence> keyword_queries(std::size_t c, const SyntheticSpec& spec, const Vocabulary& vocab,
                                           std::size_t n, std::size_t tokens, std::uint64_t seed) {
    const auto pool = class_keywords(c, spec);
    Rng rng(derive_seed(seed, c));
    std::vector<TokenSequence> out;
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::string> words;
        for (std::size_t t = 0; t < tokens; ++t) words.push_back(pool[uniform_index(rng, pool.size())]);
        out.push_back(vocab.encode(words));
    }
    return out;
}

namespace {

std::vector<int> one_hot(std::size_t c, std::size_t n) {
    std::vector<int> v(n, 0);
    v.at(c) = 1;
    return v;
}

LabeledImageSet labeled_range(const std::vector<PairedExample>& ex, std::size_t begin, std::size_t end,
                              std::size_t n_classes) {
    LabeledImageSet set;
    for (std::size_t i = begin; i < end; ++i) {
        set.ids.push_back(ex[i].image_id);
        set.images.push_back(ex[i].image);
        set.labels.push_back(one_hot(*ex[i].latent_label, n_classes));
    }
    return set;
}

std::string fraction_name(double f) {
    std::ostringstream os;
    os << f * 100.0;
    return os.str() + "pct";
}

}  // namespace

EvalCorpora make_eval_corpora(const ExperimentConfig& cfg) {
    EvalCorpora out;
    const std::size_t nc = cfg.corpus.n_classes;

    SyntheticSpec rspec = cfg.corpus;
    rspec.seed = derive_seed(cfg.eval_seed, 1);
    rspec.n_pairs = nc * (cfg.n_query + cfg.n_candidate);
    const auto rcorpus = generate_synthetic_corpus(rspec);
    std::vector<std::vector<int>> labels;
    std::vector<std::string> ids;
    std::vector<ImageTensor> images;
    for (const auto& ex : rcorpus.examples) {
        labels.push_back(one_hot(*ex.latent_label, nc));
        ids.push_back(ex.image_id);
        images.push_back(ex.image);
    }
    const auto sel = build_retrieval_split(labels, rcorpus.class_names, cfg.n_query, cfg.n_candidate, cfg.eval_seed);
    out.split = materialize_split(sel, rcorpus.class_names, ids, images);
    for (std::size_t c = 0; c < nc; ++c)
        out.split.text_queries[c] = keyword_queries(c, cfg.corpus, rcorpus.vocab, cfg.text_queries_per_class,
                                                    cfg.text_query_tokens, derive_seed(cfg.eval_seed, 3));

    SyntheticSpec pspec = cfg.corpus;
    pspec.seed = derive_seed(cfg.eval_seed, 2);
    pspec.n_pairs = cfg.probe_train + cfg.probe_validation + cfg.probe_test;
    const auto pcorpus = generate_synthetic_corpus(pspec);
    const auto& ex = pcorpus.examples;
    const std::size_t a = cfg.probe_train, b = a + cfg.probe_validation;
    out.probe.train = labeled_range(ex, 0, a, nc);
    out.probe.validation = labeled_range(ex, a, b, nc);
    out.probe.test = labeled_range(ex, b, ex.size(), nc);
    return out;
}

std::string metrics_to_csv(const MetricTable& metrics) {
    std::ostringstream os;
    os << "metric,value\n" << std::setprecision(17);
    for (const auto& [name, value] : metrics) os << name << ',' << value << '\n';
    return os.str();
}

void evaluate_representation(const ModelParams& params, const ExperimentConfig& cfg, const EvalCorpora& eval,
                             const std::string& prefix, MetricTable& out, bool with_probe) {
    const std::size_t w = cfg.train.workers;
    for (const auto& [k, v] : retrieve_image_image(params, cfg.model, eval.split, cfg.ks, w))
        out[prefix + "image_image_p" + std::to_string(k)] = v;
    for (const auto& [k, v] : retrieve_text_image(params, cfg.model, eval.split, cfg.ks, w))
        out[prefix + "text_image_p" + std::to_string(k)] = v;
    if (!with_probe) return;
    ProbeConfig probe = cfg.probe;
    probe.workers = w;
    for (double f : cfg.fractions) {
        ClassificationData data = eval.probe;
        data.train = stratified_fraction(eval.probe.train, f, derive_seed(cfg.probe.seed, 17));
        const auto m = linear_probe(params, cfg.model, data, probe);
        out[prefix + "probe_acc_" + fraction_name(f)] = m.accuracy;
        out[prefix + "probe_auc_" + fraction_name(f)] = m.macro_auc;
    }
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    ExperimentResult result;
    const auto corpus = generate_synthetic_corpus(cfg.corpus);
    const auto eval = make_eval_corpora(cfg);
    const auto p10 = std::size_t{10};

    spdlog::info("experiment: random-init baseline");
    const ModelParams random_init = init_params(cfg.model, cfg.train.seed);
    evaluate_representation(random_init, cfg, eval, "random_", result.metrics);

    EvalCallback on_eval;
    if (cfg.with_correlation) {
        on_eval = [&](std::size_t, const EvalRecord& rec, const ModelParams& current, bool) {
            result.neg_val_loss.push_back(-rec.val_loss);
            result.checkpoint_prec10.push_back(retrieve_image_image(current, cfg.model, eval.split, {p10},
                                                                    cfg.train.workers).at(p10));
        };
    }
    spdlog::info("experiment: convirt pretraining");
    TrainConfig tc = cfg.train;
    tc.objective = Objective::convirt;
    result.convirt = pretrain(corpus.examples, cfg.model, cfg.loss, cfg.augment, tc, on_eval);
    evaluate_representation(result.convirt.params, cfg, eval, "convirt_", result.metrics);
    result.metrics["convirt_initial_val_loss"] = result.convirt.initial_val_loss;
    if (const auto best = result.convirt.history.best_index)
        result.metrics["convirt_best_val_loss"] = result.convirt.history.records[*best].val_loss;
    if (result.checkpoint_prec10.size() >= 2)
        result.metrics["correlation_spearman"] = spearman(result.neg_val_loss, result.checkpoint_prec10);

    if (cfg.with_binary) {
        spdlog::info("experiment: contrastive-binary pretraining");
        tc.objective = Objective::binary;
        result.binary = pretrain(corpus.examples, cfg.model, cfg.loss, cfg.augment, tc);
        for (const auto& [k, v] : retrieve_text_image(result.binary.params, cfg.model, eval.split, cfg.ks,
                                                      cfg.train.workers, TextImageScore::binary_logit))
            result.metrics["binary_text_image_p" + std::to_string(k)] = v;
        for (const auto& [k, v] : retrieve_image_image(result.binary.params, cfg.model, eval.split, cfg.ks,
                                                       cfg.train.workers))
            result.metrics["binary_image_image_p" + std::to_string(k)] = v;
    }
    return result;
}

}  // namespace convirt
