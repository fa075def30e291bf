#include "convirt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace convirt {

namespace fs = std::filesystem;

std::size_t PairedExample::token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.tokens.size();
    return n;
}

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary() : tokens_{kUnknownToken} { index_.emplace(kUnknownToken, kUnknown); }

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& token_lists) {
    std::vector<std::string> words;
    for (const auto& list : token_lists) words.insert(words.end(), list.begin(), list.end());
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());

    Vocabulary v;
    for (auto& w : words) {
        if (w == kUnknownToken) continue;
        v.index_.emplace(w, v.tokens_.size());
        v.tokens_.push_back(std::move(w));
    }
    return v;
}

std::size_t Vocabulary::index_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnknown : it->second;
}

TokenSequence Vocabulary::encode(const std::vector<std::string>& tokens) const {
    TokenSequence seq;
    seq.tokens.reserve(tokens.size());
    for (const auto& t : tokens) seq.tokens.push_back(index_of(t));
    return seq;
}

void Vocabulary::save(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary " + path.string());
    for (std::size_t i = 1; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary " + path.string());
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (v.index_.count(line)) throw FormatError("duplicate vocabulary entry '" + line + "'");
        v.index_.emplace(line, v.tokens_.size());
        v.tokens_.push_back(line);
    }
    return v;
}

std::vector<std::string> tokenize(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char ch : line) {
        if (std::isspace(ch)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else if (!std::ispunct(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// ---------------------------------------------------------------------- PGM

namespace {

std::string next_pgm_token(std::istream& in) {
    std::string tok;
    while (in) {
        int c = in.peek();
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    in >> tok;
    return tok;
}

}  // namespace

ImageTensor read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    const std::string where = " in " + path.string();
    if (next_pgm_token(in) != "P5") throw FormatError("not a binary PGM (P5)" + where);

    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_pgm_token(in));
        h = std::stoul(next_pgm_token(in));
        maxval = std::stoul(next_pgm_token(in));
    } catch (const std::exception&) {
        throw FormatError("malformed PGM header" + where);
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError("unsupported PGM dimensions or maxval" + where);
    in.get();  // single whitespace after maxval

    std::vector<unsigned char> raw(w * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError("truncated PGM payload" + where);

    ImageTensor img(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.pixels[i] = std::min(1.0, static_cast<double>(raw[i]) / static_cast<double>(maxval));
    return img;
}

void write_pgm(const ImageTensor& image, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> raw(image.pixels.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ------------------------------------------------------------------ manifest

LoadedCorpus load_manifest(const fs::path& path, const Vocabulary* vocab) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    const fs::path base = path.parent_path();

    struct RawRow {
        std::string id;
        ImageTensor image;
        std::vector<std::vector<std::string>> sentences;
    };
    std::vector<RawRow> rows;

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        const std::string row = "manifest row " + std::to_string(lineno);
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw FormatError(row + ": expected two tab-separated columns");

        fs::path image_path = line.substr(0, tab);
        fs::path report_path = line.substr(tab + 1);
        if (image_path.is_relative()) image_path = base / image_path;
        if (report_path.is_relative()) report_path = base / report_path;

        if (!fs::exists(image_path)) throw IoError(row + ": missing image file " + image_path.string());
        if (!fs::exists(report_path)) throw IoError(row + ": missing report file " + report_path.string());

        RawRow r;
        r.id = image_path.stem().string();
        try {
            r.image = read_pgm(image_path);
        } catch (const FormatError& e) {
            throw FormatError(row + ": " + e.what());
        }
        std::ifstream report(report_path);
        if (!report) throw IoError(row + ": cannot read report file " + report_path.string());
        std::string sentence;
        while (std::getline(report, sentence)) {
            auto toks = tokenize(sentence);
            if (!toks.empty()) r.sentences.push_back(std::move(toks));
        }
        rows.push_back(std::move(r));
    }

    LoadedCorpus corpus;
    if (vocab) {
        corpus.vocab = *vocab;
    } else {
        std::vector<std::vector<std::string>> all;
        for (const auto& r : rows) all.insert(all.end(), r.sentences.begin(), r.sentences.end());
        corpus.vocab = Vocabulary::build(all);
    }
    corpus.examples.reserve(rows.size());
    for (auto& r : rows) {
        PairedExample ex;
        ex.image_id = std::move(r.id);
        ex.image = std::move(r.image);
        for (const auto& s : r.sentences) ex.sentences.push_back(corpus.vocab.encode(s));
        corpus.examples.push_back(std::move(ex));
    }
    return corpus;
}

std::vector<PairedExample> filter_pairs(const std::vector<PairedExample>& examples, std::size_t min_tokens) {
    require(min_tokens >= 1, "filter_pairs: min_tokens must be >= 1");
    std::vector<PairedExample> out;
    for (const auto& ex : examples)
        if (!ex.sentences.empty() && ex.token_count() >= min_tokens) out.push_back(ex);
    return out;
}

const TokenSequence& sample_sentence(const PairedExample& example, Rng& rng) {
    require(!example.sentences.empty(), "sample_sentence: example " + example.image_id + " has no sentences");
    return example.sentences[uniform_index(rng, example.sentences.size())];
}

// ----------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
    require(n_classes >= 2, "synthetic: n_classes must be >= 2");
    require(n_pairs >= n_classes, "synthetic: n_pairs must be >= n_classes");
    require(noise_std >= 0.0, "synthetic: noise_std must be >= 0");
    require(image_size >= 8, "synthetic: image_size must be >= 8");
    require(min_sentences >= 1 && min_sentences <= max_sentences, "synthetic: bad sentence count range");
    require(min_sentence_tokens >= 1 && min_sentence_tokens <= max_sentence_tokens, "synthetic: bad sentence length range");
    require(vocab_per_class >= 1, "synthetic: vocab_per_class must be >= 1");
    require(keyword_fraction >= 0.0 && keyword_fraction <= 1.0, "synthetic: keyword_fraction must be in [0,1]");
    require(shared_vocab >= 1 || keyword_fraction == 1.0, "synthetic: shared_vocab must be >= 1 unless keyword_fraction = 1");
    require(clutter_gain >= 0.0, "synthetic: clutter_gain must be >= 0");
    require(max_clutter_bumps >= 1, "synthetic: max_clutter_bumps must be >= 1");
    require(n_classes <= kMaxSyntheticClasses, "synthetic: at most 24 distinct class templates are available");
}

namespace {

// Smooth bump, unit height at its centre.
double bump(double dy, double dx, double sy, double sx) {
    return std::exp(-0.5 * (dy * dy / (sy * sy) + dx * dx / (sx * sx)));
}

}  // namespace

ImageTensor class_template(std::size_t c, std::size_t n_classes, std::size_t size) {
    // Shape family, then a second attribute (intensity level) once the family is exhausted.
    // Every shape carries the same total mass as the disk.
    require(c < kMaxSyntheticClasses && c < n_classes, "class_template: class index out of range");
    constexpr std::size_t kShapes = 8;
    const double s = static_cast<double>(size);
    const double cy = (s - 1.0) / 2.0, cx = (s - 1.0) / 2.0;
    const double r = 0.22 * s;
    const double w = 0.06 * s;
    const std::size_t shape = c % kShapes;
    const double level = 0.35 + 0.25 * static_cast<double>((c / kShapes) % 3);

    auto field = [&](std::size_t k, std::size_t y, std::size_t x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double rad = std::hypot(dy, dx);
        switch (k) {
            case 0: return bump(dy, dx, r * 0.6, r * 0.6);                                   // disk
            case 1: return std::exp(-0.5 * std::pow((rad - r) / w, 2));                      // ring
            case 2: return bump(dy, dx, w, r * 1.3);                                         // horizontal bar
            case 3: return bump(dy, dx, r * 1.3, w);                                         // vertical bar
            case 4: return std::max(bump(dy, dx, w, r * 1.3), bump(dy, dx, r * 1.3, w));     // cross
            case 5: return std::max(bump(dy, dx - r, r * 0.45, r * 0.45), bump(dy, dx + r, r * 0.45, r * 0.45));
            case 6: return std::max(bump(dy - r, dx, r * 0.45, r * 0.45), bump(dy + r, dx, r * 0.45, r * 0.45));
            default: {  // square frame
                const double d = std::max(std::abs(dy), std::abs(dx));
                return std::exp(-0.5 * std::pow((d - r) / w, 2));
            }
        }
    };
    auto mass = [&](std::size_t k) {
        double m = 0.0;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) m += field(k, y, x);
        return m;
    };
    const double gain = level * mass(0) / mass(shape);

    ImageTensor img(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) img.at(y, x) = 0.3 + gain * field(shape, y, x);
    return img;
}

std::vector<std::string> class_keywords(std::size_t c, const SyntheticSpec& spec) {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < spec.vocab_per_class; ++j) out.push_back("c" + std::to_string(c) + "k" + std::to_string(j));
    return out;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t n = spec.image_size;

    std::vector<std::vector<std::string>> pools(spec.n_classes);
    std::vector<std::string> filler;
    for (std::size_t c = 0; c < spec.n_classes; ++c) pools[c] = class_keywords(c, spec);
    for (std::size_t j = 0; j < spec.shared_vocab; ++j) filler.push_back("w" + std::to_string(j));

    std::vector<std::vector<std::string>> all_words(pools);
    all_words.push_back(filler);
    SyntheticCorpus corpus;
    corpus.vocab = Vocabulary::build(all_words);
    for (std::size_t c = 0; c < spec.n_classes; ++c) corpus.class_names.push_back("class" + std::to_string(c));

    std::vector<ImageTensor> templates;
    for (std::size_t c = 0; c < spec.n_classes; ++c) templates.push_back(class_template(c, spec.n_classes, n));

    // Balanced assignment, then a seeded shuffle.
    std::vector<std::size_t> labels(spec.n_pairs);
    for (std::size_t i = 0; i < spec.n_pairs; ++i) labels[i] = i % spec.n_classes;
    std::shuffle(labels.begin(), labels.end(), rng);

    std::normal_distribution<double> gauss(0.0, 1.0);
    const double clutter = spec.noise_std * spec.clutter_gain;
    const double s = static_cast<double>(n);

    for (std::size_t i = 0; i < spec.n_pairs; ++i) {
        const std::size_t c = labels[i];
        PairedExample ex;
        ex.image_id = "img" + std::to_string(i);
        ex.latent_label = c;
        ex.image = templates[c];

        if (spec.noise_std > 0.0) {
            // Structured noise: random offset plus a few wide bumps of either sign.
            const double offset = clutter * uniform(rng, -0.5, 0.5);
            const std::size_t n_bumps = 1 + uniform_index(rng, spec.max_clutter_bumps);
            struct Bump { double y, x, sig, amp; };
            std::vector<Bump> bumps;
            for (std::size_t b = 0; b < n_bumps; ++b)
                bumps.push_back({uniform(rng, 0.0, s - 1.0), uniform(rng, 0.0, s - 1.0), uniform(rng, 0.3, 0.6) * s,
                                 clutter * uniform(rng, -1.0, 1.0)});
            for (std::size_t y = 0; y < n; ++y) {
                for (std::size_t x = 0; x < n; ++x) {
                    double v = ex.image.at(y, x) + offset;
                    for (const auto& b : bumps)
                        v += b.amp * bump(static_cast<double>(y) - b.y, static_cast<double>(x) - b.x, b.sig, b.sig);
                    v = std::clamp(v, 0.0, 1.0) + spec.noise_std * gauss(rng);
                    ex.image.at(y, x) = std::clamp(v, 0.0, 1.0);
                }
            }
        }

        const std::size_t n_sent = spec.min_sentences + uniform_index(rng, spec.max_sentences - spec.min_sentences + 1);
        for (std::size_t k = 0; k < n_sent; ++k) {
            const std::size_t len =
                spec.min_sentence_tokens + uniform_index(rng, spec.max_sentence_tokens - spec.min_sentence_tokens + 1);
            std::vector<std::string> words;
            for (std::size_t t = 0; t < len; ++t) {
                const bool keyword = filler.empty() || uniform(rng, 0.0, 1.0) < spec.keyword_fraction;
                words.push_back(keyword ? pools[c][uniform_index(rng, pools[c].size())]
                                        : filler[uniform_index(rng, filler.size())]);
            }
            ex.sentences.push_back(corpus.vocab.encode(words));
        }
        corpus.examples.push_back(std::move(ex));
    }
    return corpus;
}

void export_corpus(const std::vector<PairedExample>& examples, const Vocabulary& vocab, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "reports");
    std::ofstream manifest(dir / "manifest.tsv");
    std::ofstream labels(dir / "labels.tsv");
    if (!manifest || !labels) throw IoError("cannot write corpus under " + dir.string());

    for (const auto& ex : examples) {
        const std::string img_rel = "images/" + ex.image_id + ".pgm";
        const std::string rep_rel = "reports/" + ex.image_id + ".txt";
        write_pgm(ex.image, dir / img_rel);
        std::ofstream report(dir / rep_rel);
        if (!report) throw IoError("cannot write report " + (dir / rep_rel).string());
        for (const auto& s : ex.sentences) {
            for (std::size_t t = 0; t < s.tokens.size(); ++t) report << (t ? " " : "") << vocab.token(s.tokens[t]);
            report << '\n';
        }
        manifest << img_rel << '\t' << rep_rel << '\n';
        if (ex.latent_label) labels << ex.image_id << '\t' << *ex.latent_label << '\n';
    }
}

std::unordered_map<std::string, std::size_t> load_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open labels " + path.string());
    std::unordered_map<std::string, std::size_t> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("labels line " + std::to_string(lineno) + ": expected id<TAB>label");
        try {
            out[line.substr(0, tab)] = std::stoul(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw FormatError("labels line " + std::to_string(lineno) + ": bad label");
        }
    }
    return out;
}

}  // namespace convirt
