#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "convirt/common.hpp"

namespace convirt {

/// Monochrome image, row-major, pixel values in [0,1].
struct ImageTensor {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    ImageTensor() = default;
    ImageTensor(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

    double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    bool empty() const { return pixels.empty(); }

    bool operator==(const ImageTensor&) const = default;
};

struct TokenSequence {
    std::vector<std::size_t> tokens;
    bool operator==(const TokenSequence&) const = default;
};

struct PairedExample {
    std::string image_id;
    ImageTensor image;
    std::vector<TokenSequence> sentences;
    std::optional<std::size_t> latent_label;

    std::size_t token_count() const;
};

/// Closed vocabulary. Index 0 is reserved for unknown tokens; the remaining
/// entries are sorted lexicographically so construction is order independent.
class Vocabulary {
public:
    static constexpr std::size_t kUnknown = 0;
    static constexpr const char* kUnknownToken = "<unk>";

    Vocabulary();
    static Vocabulary build(const std::vector<std::vector<std::string>>& token_lists);

    std::size_t size() const { return tokens_.size(); }
    std::size_t index_of(const std::string& token) const;
    const std::string& token(std::size_t index) const { return tokens_.at(index); }
    TokenSequence encode(const std::vector<std::string>& tokens) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize(const std::string& line);

ImageTensor read_pgm(const std::filesystem::path& path);
void write_pgm(const ImageTensor& image, const std::filesystem::path& path);

struct LoadedCorpus {
    std::vector<PairedExample> examples;
    Vocabulary vocab;
};

/// Reads a TSV manifest of (image_path, report_path) rows; relative paths are
/// resolved against the manifest's directory. When `vocab` is null a vocabulary
/// is built from the loaded reports.
LoadedCorpus load_manifest(const std::filesystem::path& path, const Vocabulary* vocab = nullptr);

std::vector<PairedExample> filter_pairs(const std::vector<PairedExample>& examples, std::size_t min_tokens = 3);

const TokenSequence& sample_sentence(const PairedExample& example, Rng& rng);

inline constexpr std::size_t kMaxSyntheticClasses = 24;

struct SyntheticSpec {
    std::size_t n_classes = 8;
    std::size_t n_pairs = 2000;
    std::size_t image_size = 32;
    double noise_std = 0.325;
    std::size_t min_sentences = 2;
    std::size_t max_sentences = 5;
    std::size_t vocab_per_class = 12;
    std::size_t shared_vocab = 24;
    std::uint64_t seed = 1;
    // Fraction of sentence tokens drawn from the class keyword pool.
    double keyword_fraction = 0.6;
    std::size_t min_sentence_tokens = 3;
    std::size_t max_sentence_tokens = 7;
    // Amplitude of smooth structured noise relative to noise_std.
    double clutter_gain = 3.0;
    // Structured noise adds 1..max_clutter_bumps smooth bumps per image.
    std::size_t max_clutter_bumps = 3;

    void validate() const;
};

struct SyntheticCorpus {
    std::vector<PairedExample> examples;
    Vocabulary vocab;
    std::vector<std::string> class_names;
};

/// Noise-free class template image for class `c`.
ImageTensor class_template(std::size_t c, std::size_t n_classes, std::size_t size);

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec);

/// Token strings of the class keyword pool. Used to author text queries.
std::vector<std::string> class_keywords(std::size_t c, const SyntheticSpec& spec);

/// Writes manifest.tsv, images/*.pgm, reports/*.txt and labels.tsv under `dir`.
void export_corpus(const std::vector<PairedExample>& examples, const Vocabulary& vocab,
                   const std::filesystem::path& dir);

/// Reads labels.tsv written by export_corpus: image_id -> label.
std::unordered_map<std::string, std::size_t> load_labels(const std::filesystem::path& path);

}  // namespace convirt
