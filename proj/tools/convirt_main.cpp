// convirt: corpus synthesis, pretraining, gradient checking and evaluation.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "convirt/config.hpp"
#include "convirt/experiment.hpp"

namespace fs = std::filesystem;
using namespace convirt;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t workers = 1;
};

// Tracks every file a command writes, relative to the output directory.
class Outputs {
public:
    Outputs(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
    }

    fs::path path(const std::string& rel) {
        const fs::path p = dir_ / rel;
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        if (std::find(files_.begin(), files_.end(), rel) == files_.end()) files_.push_back(rel);
        return p;
    }

    void write(const std::string& rel, const std::string& content) {
        std::ofstream out(path(rel));
        out << content;
        if (!out) throw IoError("failed writing " + (dir_ / rel).string());
    }

    void finish() {
        files_.push_back("produced_" + command_ + ".txt");
        std::ofstream out(dir_ / ("produced_" + command_ + ".txt"));
        for (const auto& f : files_) out << f << '\n';
    }

    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::string command_;
    std::vector<std::string> files_;
};

std::string fmt(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

RunConfig resolve_config(const Options& opt) {
    RunConfig cfg = opt.config.empty() ? RunConfig{} : parse_config(opt.config);
    if (opt.seed) cfg.seed = *opt.seed;
    if (!opt.out.empty()) cfg.out_dir = opt.out;
    cfg.train.seed = cfg.seed;
    cfg.train.workers = opt.workers;
    cfg.probe.optimizer.seed = derive_seed(cfg.seed, 0x70);
    cfg.probe.optimizer.workers = opt.workers;
    cfg.finetune.head.seed = derive_seed(cfg.seed, 0x66);
    cfg.finetune.head.workers = opt.workers;
    return cfg;
}

fs::path or_default(const std::string& configured, const fs::path& fallback) {
    return configured.empty() ? fallback : fs::path(configured);
}

std::optional<Vocabulary> find_vocab(const RunConfig& cfg) {
    if (!cfg.paths.vocab.empty()) return Vocabulary::load(cfg.paths.vocab);
    const fs::path local = fs::path(cfg.out_dir) / "vocab.txt";
    if (fs::exists(local)) return Vocabulary::load(local);
    return std::nullopt;
}

LoadedCorpus load_corpus(const fs::path& manifest, const RunConfig& cfg) {
    const auto vocab = find_vocab(cfg);
    auto corpus = load_manifest(manifest, vocab ? &*vocab : nullptr);
    if (corpus.vocab.size() > cfg.model.vocab_size)
        throw ContractViolation("vocabulary has " + std::to_string(corpus.vocab.size()) +
                                " entries but model.vocab_size is " + std::to_string(cfg.model.vocab_size));
    return corpus;
}

ModelParams load_params(const RunConfig& cfg) {
    if (cfg.paths.checkpoint.empty()) {
        spdlog::info("no checkpoint configured, using a random initialization (seed {})", cfg.seed);
        return init_params(cfg.model, cfg.seed);
    }
    auto ck = load_checkpoint(cfg.paths.checkpoint);
    if (!(ck.config == cfg.model))
        throw ContractViolation("checkpoint " + cfg.paths.checkpoint + " was written with a different model config");
    return std::move(ck.params);
}

struct LabeledCorpus {
    std::vector<PairedExample> examples;
    std::vector<std::size_t> labels;
    Vocabulary vocab;
};

LabeledCorpus load_labeled(const RunConfig& cfg) {
    const fs::path manifest = or_default(cfg.paths.eval_corpus, fs::path(cfg.out_dir) / "eval_corpus" / "manifest.tsv");
    auto corpus = load_corpus(manifest, cfg);
    const auto labels = load_labels(manifest.parent_path() / "labels.tsv");
    LabeledCorpus out;
    out.vocab = corpus.vocab;
    for (auto& ex : corpus.examples) {
        const auto it = labels.find(ex.image_id);
        if (it == labels.end()) throw FormatError("labels.tsv has no entry for image " + ex.image_id);
        if (it->second >= cfg.synth.n_classes)
            throw FormatError("label " + std::to_string(it->second) + " of image " + ex.image_id + " exceeds synth.n_classes");
        out.labels.push_back(it->second);
        out.examples.push_back(std::move(ex));
    }
    return out;
}

std::vector<int> one_hot(std::size_t c, std::size_t n) {
    std::vector<int> v(n, 0);
    v[c] = 1;
    return v;
}

ClassificationData classification_data(const RunConfig& cfg) {
    const auto lc = load_labeled(cfg);
    const auto& p = cfg.probe;
    const std::size_t need = p.train_size + p.validation_size + p.test_size;
    if (lc.examples.size() < need)
        throw ContractViolation("evaluation corpus has " + std::to_string(lc.examples.size()) + " images, probe needs " +
                                std::to_string(need));
    auto range = [&](std::size_t b, std::size_t e) {
        LabeledImageSet set;
        for (std::size_t i = b; i < e; ++i) {
            set.ids.push_back(lc.examples[i].image_id);
            set.images.push_back(lc.examples[i].image);
            set.labels.push_back(one_hot(lc.labels[i], cfg.synth.n_classes));
        }
        return set;
    };
    ClassificationData data;
    const std::size_t a = p.train_size, b = a + p.validation_size;
    data.train = stratified_fraction(range(0, a), p.fraction, derive_seed(cfg.seed, 0x66726163));
    data.validation = range(a, b);
    data.test = range(b, need);
    return data;
}

void write_classification_metrics(Outputs& out, const std::string& name, const ClassificationMetrics& m,
                                  const RunConfig& cfg, std::size_t train_count) {
    std::ostringstream os;
    os << "metric,value\naccuracy," << fmt(m.accuracy) << "\nmacro_auc," << fmt(m.macro_auc) << "\nbest_val_metric,"
       << fmt(m.best_val_metric) << "\nfraction," << fmt(cfg.probe.fraction) << "\ntrain_examples," << train_count << '\n';
    out.write(name, os.str());
    std::cout << std::fixed << std::setprecision(4) << "accuracy  " << m.accuracy << "\nmacro AUC " << m.macro_auc << '\n';
}

// ------------------------------------------------------------------ commands

int cmd_synth(const RunConfig& cfg, Outputs& out) {
    const auto corpus = generate_synthetic_corpus(cfg.synth);
    export_corpus(corpus.examples, corpus.vocab, out.path("corpus"));
    for (const char* f : {"corpus/manifest.tsv", "corpus/labels.tsv", "corpus/images/", "corpus/reports/"}) out.path(f);

    SyntheticSpec eval_spec = cfg.synth;
    eval_spec.seed = derive_seed(cfg.eval_seed, cfg.synth.seed);
    const auto& p = cfg.probe;
    eval_spec.n_pairs = std::max(p.train_size + p.validation_size + p.test_size,
                                 cfg.synth.n_classes * (cfg.retrieval.n_query + cfg.retrieval.n_candidate));
    const auto eval = generate_synthetic_corpus(eval_spec);
    export_corpus(eval.examples, eval.vocab, out.path("eval_corpus"));
    for (const char* f : {"eval_corpus/manifest.tsv", "eval_corpus/labels.tsv", "eval_corpus/images/", "eval_corpus/reports/"})
        out.path(f);

    corpus.vocab.save(out.path("vocab.txt"));
    spdlog::info("synth: {} training pairs, {} evaluation pairs, vocabulary {}", corpus.examples.size(),
                 eval.examples.size(), corpus.vocab.size());
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, Outputs& out) {
    const fs::path manifest = or_default(cfg.paths.corpus, fs::path(cfg.out_dir) / "corpus" / "manifest.tsv");
    auto corpus = load_corpus(manifest, cfg);
    const auto examples = filter_pairs(corpus.examples, cfg.min_tokens);
    spdlog::info("pretrain: {} of {} pairs kept after filtering", examples.size(), corpus.examples.size());
    corpus.vocab.save(out.path("vocab.txt"));

    EvalCallback on_eval = [&](std::size_t idx, const EvalRecord&, const ModelParams& current, bool is_best) {
        if (cfg.checkpoint_every_eval) {
            std::ostringstream name;
            name << "checkpoints/eval_" << std::setw(4) << std::setfill('0') << idx + 1 << ".ckpt";
            save_checkpoint(current, cfg.model, out.path(name.str()));
        }
        if (is_best) save_checkpoint(current, cfg.model, out.path("checkpoints/best.ckpt"));
    };
    const auto result = pretrain(examples, cfg.model, cfg.loss, cfg.augment, cfg.train, on_eval);
    save_checkpoint(result.params, cfg.model, out.path("checkpoints/best.ckpt"));
    result.history.write_csv(out.path("history.csv"));

    std::ostringstream m;
    m << "metric,value\ninitial_val_loss," << fmt(result.initial_val_loss);
    if (result.history.best_index) {
        const auto& best = result.history.records[*result.history.best_index];
        m << "\nbest_val_loss," << fmt(best.val_loss) << "\nbest_step," << best.step;
    }
    m << "\nevaluations," << result.history.records.size() << "\naborted," << (result.aborted ? 1 : 0) << '\n';
    out.write("pretrain_metrics.csv", m.str());
    if (result.aborted) throw NumericError("training aborted: " + result.abort_reason);
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg, Outputs& out) {
    const ModelConfig mc = cfg.gradcheck.tiny_model ? tiny_model_config() : cfg.model;
    GradCheckOptions opts;
    opts.epsilon = cfg.gradcheck.epsilon;
    opts.tolerance = cfg.gradcheck.tolerance;
    opts.coords_per_tensor = cfg.gradcheck.coords_per_tensor;

    std::ostringstream csv;
    csv << "seed,tensor,checked,max_rel_error,passed\n" << std::setprecision(17);
    std::vector<std::string> failures;
    for (std::size_t s = 0; s < cfg.gradcheck.seeds; ++s) {
        const std::uint64_t seed = derive_seed(cfg.seed, 0x6763, s);
        ModelParams params = init_params(mc, seed);
        jitter_biases(params, seed);
        const auto views = random_view_batch(mc, cfg.gradcheck.batch_size, seed, cfg.train.objective);
        opts.seed = seed;
        const auto report = grad_check(params, mc, cfg.loss, views, cfg.train.objective, opts);
        std::cout << "seed " << s << "\n" << report.to_table() << '\n';
        for (const auto& e : report.entries) {
            csv << s << ',' << e.tensor << ',' << e.checked << ',' << e.max_rel_error << ',' << (e.passed ? 1 : 0) << '\n';
            if (!e.passed) failures.push_back(e.tensor + " (seed " + std::to_string(s) + ")");
        }
    }
    out.write("gradcheck.csv", csv.str());
    if (!failures.empty()) {
        std::string list;
        for (const auto& f : failures) list += (list.empty() ? "" : ", ") + f;
        throw NumericError("gradient check failed for " + list);
    }
    return 0;
}

int cmd_probe(const RunConfig& cfg, Outputs& out) {
    const auto params = load_params(cfg);
    const auto data = classification_data(cfg);
    const auto m = linear_probe(params, cfg.model, data, cfg.probe.optimizer);
    write_classification_metrics(out, "probe_metrics.csv", m, cfg, data.train.size());
    return 0;
}

int cmd_finetune(const RunConfig& cfg, Outputs& out) {
    const auto params = load_params(cfg);
    const auto data = classification_data(cfg);
    const auto r = fine_tune(params, cfg.model, data, cfg.finetune);
    write_classification_metrics(out, "finetune_metrics.csv", r.metrics, cfg, data.train.size());
    return 0;
}

int cmd_retrieve(const RunConfig& cfg, Outputs& out) {
    const auto params = load_params(cfg);
    RetrievalSplit split;
    if (!cfg.paths.split.empty()) {
        const auto vocab = find_vocab(cfg);
        if (!vocab) throw ContractViolation("retrieve: paths.split needs a vocabulary (paths.vocab or <out>/vocab.txt)");
        split = load_split_manifest(cfg.paths.split, *vocab);
    } else {
        const auto lc = load_labeled(cfg);
        std::vector<std::vector<int>> labels;
        std::vector<std::string> ids, categories;
        std::vector<ImageTensor> images;
        for (std::size_t i = 0; i < lc.examples.size(); ++i) {
            labels.push_back(one_hot(lc.labels[i], cfg.synth.n_classes));
            ids.push_back(lc.examples[i].image_id);
            images.push_back(lc.examples[i].image);
        }
        for (std::size_t c = 0; c < cfg.synth.n_classes; ++c) categories.push_back("class" + std::to_string(c));
        const auto sel = build_retrieval_split(labels, categories, cfg.retrieval.n_query, cfg.retrieval.n_candidate,
                                               derive_seed(cfg.seed, 0x73706c));
        split = materialize_split(sel, categories, ids, images);
        for (std::size_t c = 0; c < categories.size(); ++c)
            split.text_queries[c] = keyword_queries(c, cfg.synth, lc.vocab, cfg.retrieval.text_queries_per_class,
                                                    cfg.retrieval.text_query_tokens, derive_seed(cfg.seed, 0x747874));
        write_split_manifest(split, out.path("split"), lc.vocab);
        for (const char* f : {"split/split.tsv", "split/images/", "split/text_queries/"}) out.path(f);
    }

    const auto score = cfg.train.objective == Objective::binary ? TextImageScore::binary_logit
                                                                : TextImageScore::projected_cosine;
    const auto ii = retrieve_image_image(params, cfg.model, split, cfg.retrieval.k, cfg.train.workers);
    std::size_t n_text = 0;
    for (const auto& q : split.text_queries) n_text += q.size();
    std::optional<PrecisionByK> ti;
    if (n_text > 0) ti = retrieve_text_image(params, cfg.model, split, cfg.retrieval.k, cfg.train.workers, score);

    std::ostringstream csv;
    csv << "task,k,precision\n";
    std::cout << "task          k   precision\n";
    auto emit = [&](const std::string& task, const PrecisionByK& p) {
        for (const auto& [k, v] : p) {
            csv << task << ',' << k << ',' << fmt(v) << '\n';
            std::cout << std::left << std::setw(12) << task << std::right << std::setw(4) << k << "   " << std::fixed
                      << std::setprecision(4) << v << '\n';
        }
    };
    emit("image_image", ii);
    if (ti) emit("text_image", *ti);
    out.write("retrieval_metrics.csv", csv.str());
    return 0;
}

int cmd_export(const RunConfig& cfg, Outputs& out) {
    const auto params = load_params(cfg);
    const auto lc = load_labeled(cfg);
    std::vector<std::string> ids;
    std::vector<ImageTensor> images;
    std::vector<std::optional<std::size_t>> labels;
    for (std::size_t i = 0; i < lc.examples.size(); ++i) {
        ids.push_back(lc.examples[i].image_id);
        images.push_back(lc.examples[i].image);
        labels.push_back(lc.labels[i]);
    }
    export_embeddings(params, cfg.model, ids, images, labels, out.path("embeddings.csv"));
    return 0;
}

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("convirt");
    spdlog::set_default_logger(logger);
    const char* env = std::getenv("CONVIRT_LOG");
    const std::string level = env ? env : "info";
    if (level == "quiet") spdlog::set_level(spdlog::level::off);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else throw ContractViolation("CONVIRT_LOG must be one of quiet, info, debug (got '" + level + "')");
}

int fail(const std::string& category, const std::string& msg, int code) {
    std::cerr << "error: " << category << ": " << msg << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image-text contrastive pretraining on synthetic paired corpora"};
    app.require_subcommand(1);
    Options opt;

    using Command = int (*)(const RunConfig&, Outputs&);
    const std::vector<std::tuple<std::string, std::string, Command>> commands{
        {"synth", "generate a synthetic paired corpus and a labeled evaluation corpus", cmd_synth},
        {"pretrain", "pretrain encoders with the configured objective", cmd_pretrain},
        {"gradcheck", "compare analytic gradients with central differences", cmd_gradcheck},
        {"probe", "linear probe on frozen image features", cmd_probe},
        {"finetune", "fine-tune the image encoder with head warmup", cmd_finetune},
        {"retrieve", "zero-shot image-image and text-image retrieval", cmd_retrieve},
        {"export-embeddings", "write image encoder outputs as CSV", cmd_export},
    };
    std::map<CLI::App*, std::pair<std::string, Command>> handlers;
    for (const auto& [name, help, fn] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config, "configuration file (key = value)")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "global seed, overrides the config");
        sub->add_option("--out", opt.out, "output directory, overrides out_dir");
        sub->add_option("--workers", opt.workers, "worker threads")->check(CLI::Range(1, 256));
        handlers[sub] = {name, fn};
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        configure_logging();
        const RunConfig cfg = resolve_config(opt);
        for (const auto& [sub, entry] : handlers) {
            if (!sub->parsed()) continue;
            Outputs out(cfg.out_dir, entry.first);
            out.write("effective_config_" + entry.first + ".txt", echo_config(cfg));
            int code = 0;
            try {
                code = entry.second(cfg, out);
            } catch (...) {
                out.finish();
                throw;
            }
            out.finish();
            return code;
        }
    } catch (const ConfigError& e) {
        return fail("config", e.what(), 3);
    } catch (const IoError& e) {
        return fail("io", e.what(), 4);
    } catch (const FormatError& e) {
        return fail("format", e.what(), 5);
    } catch (const ContractViolation& e) {
        return fail("contract", e.what(), 6);
    } catch (const NumericError& e) {
        return fail("numeric", e.what(), 7);
    } catch (const fs::filesystem_error& e) {
        return fail("io", e.what(), 4);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 1);
    }
    return 1;
}
