#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "convirt/augment.hpp"
#include "convirt/data.hpp"
#include "convirt/eval.hpp"
#include "convirt/model.hpp"
#include "convirt/objective.hpp"
#include "convirt/train.hpp"

namespace convirt {

/// Parse failure; line() is 0 for errors not tied to one line.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct ProbeRunConfig {
    ProbeConfig optimizer;
    double fraction = 1.0;
    std::size_t train_size = 800;
    std::size_t validation_size = 200;
    std::size_t test_size = 400;
};

struct RetrievalRunConfig {
    std::size_t n_query = 10;
    std::size_t n_candidate = 100;
    std::size_t text_queries_per_class = 5;
    std::size_t text_query_tokens = 4;
    std::vector<std::size_t> k = kDefaultRetrievalK;
};

struct GradCheckRunConfig {
    double epsilon = 1e-4;
    double tolerance = 1e-4;
    std::size_t coords_per_tensor = 50;
    std::size_t batch_size = 4;
    std::size_t seeds = 3;
    bool tiny_model = true;
};

struct PathsConfig {
    std::string corpus;       // manifest.tsv; empty = <out>/corpus/manifest.tsv
    std::string eval_corpus;  // labeled manifest for probe / retrieval / export
    std::string checkpoint;   // empty = random initialization
    std::string split;        // retrieval split manifest; empty = build one
    std::string vocab;        // empty = <out>/vocab.txt, else built from the corpus
};

struct RunConfig {
    SyntheticSpec synth;
    AugmentConfig augment;
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    std::size_t min_tokens = 3;
    bool checkpoint_every_eval = true;
    ProbeRunConfig probe;
    FineTuneConfig finetune;
    RetrievalRunConfig retrieval;
    GradCheckRunConfig gradcheck;
    PathsConfig paths;
    std::uint64_t seed = 0;
    std::uint64_t eval_seed = 7919;
    std::string out_dir = "out";

    RunConfig();
    void validate() const;
};

/// Strict parse of `key = value` lines; `#` starts a comment.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);

/// Every key in canonical order with full-precision values.
std::string echo_config(const RunConfig& cfg);

/// All recognized keys, in echo order.
std::vector<std::string> config_keys();

bool same_effective_config(const RunConfig& a, const RunConfig& b);

}  // namespace convirt
