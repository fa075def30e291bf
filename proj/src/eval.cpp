#include "convirt/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "convirt/objective.hpp"

namespace convirt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- metrics

namespace {

// 1-based average ranks, ties share the mean rank.
std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), "auc: scores and labels differ in length");
    std::size_t pos = 0;
    for (int l : labels) pos += l != 0;
    const std::size_t neg = labels.size() - pos;
    require(pos > 0 && neg > 0, "auc: need at least one positive and one negative label");
    const auto ranks = average_ranks(scores);
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i]) rank_sum += ranks[i];
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

RankedList rank_by_score(std::span<const double> scores) {
    RankedList order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

double precision_at_k(const RankedList& ranked, const std::vector<bool>& relevant, std::size_t k) {
    require(k >= 1 && k <= ranked.size(), "precision_at_k: k=" + std::to_string(k) + " outside [1, " +
                                              std::to_string(ranked.size()) + "]");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) {
        require(ranked[i] < relevant.size(), "precision_at_k: ranked index outside relevance mask");
        hits += relevant[ranked[i]] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(k);
}

double spearman(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size() && x.size() >= 2, "spearman: need two equally long series of length >= 2");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i] / n;
        my += ry[i] / n;
    }
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

ChanceLevel precision_chance(std::size_t n_relevant, std::size_t n_candidates, std::size_t k, std::size_t n_queries) {
    require(n_candidates >= 2 && k >= 1 && k <= n_candidates && n_queries >= 1, "precision_chance: bad arguments");
    const double m = static_cast<double>(n_candidates), r = static_cast<double>(n_relevant), kk = static_cast<double>(k);
    const double p = r / m;
    const double hits_var = kk * p * (1.0 - p) * (m - kk) / (m - 1.0);
    return {p, std::sqrt(hits_var / (kk * kk) / static_cast<double>(n_queries))};
}

// --------------------------------------------------------------- retrieval

RetrievalSelection build_retrieval_split(const std::vector<std::vector<int>>& labels,
                                         const std::vector<std::string>& categories, std::size_t n_query,
                                         std::size_t n_candidate, std::uint64_t seed) {
    const std::size_t nc = categories.size();
    require(nc >= 1, "build_retrieval_split: no categories");
    std::vector<std::vector<std::size_t>> exclusive(nc);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i].size() == nc, "build_retrieval_split: label width differs from category count");
        std::size_t positives = 0, which = 0;
        for (std::size_t c = 0; c < nc; ++c)
            if (labels[i][c] > 0) {
                ++positives;
                which = c;
            }
        if (positives == 1) exclusive[which].push_back(i);
    }

    RetrievalSelection sel;
    sel.queries.resize(nc);
    sel.candidates.resize(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        auto& pool = exclusive[c];
        if (pool.size() < n_query + n_candidate)
            throw ContractViolation("build_retrieval_split: category '" + categories[c] + "' has " +
                                    std::to_string(pool.size()) + " exclusively positive images, need " +
                                    std::to_string(n_query + n_candidate));
        Rng rng(derive_seed(seed, c));
        std::shuffle(pool.begin(), pool.end(), rng);
        sel.candidates[c].assign(pool.begin(), pool.begin() + static_cast<long>(n_candidate));
        sel.queries[c].assign(pool.begin() + static_cast<long>(n_candidate),
                              pool.begin() + static_cast<long>(n_candidate + n_query));
    }
    return sel;
}

RetrievalSplit materialize_split(const RetrievalSelection& sel, const std::vector<std::string>& categories,
                                 const std::vector<std::string>& ids, const std::vector<ImageTensor>& images) {
    RetrievalSplit split;
    split.categories = categories;
    split.image_queries.resize(categories.size());
    split.text_queries.resize(categories.size());
    for (std::size_t c = 0; c < categories.size(); ++c) {
        for (auto i : sel.queries[c]) split.image_queries[c].push_back(images.at(i));
        for (auto i : sel.candidates[c]) split.candidates.push_back({ids.at(i), images.at(i), c});
    }
    return split;
}

namespace {

using ScoreFn = std::function<double(std::size_t query, std::size_t candidate)>;

PrecisionByK mean_precision(std::size_t n_queries, const std::vector<std::size_t>& query_cats, std::size_t n_candidates,
                            const std::vector<std::size_t>& cand_cats, const ScoreFn& score,
                            const std::vector<std::size_t>& ks) {
    require(n_queries > 0, "retrieval: no queries");
    PrecisionByK sums;
    for (auto k : ks) sums[k] = 0.0;
    std::vector<double> scores(n_candidates);
    std::vector<bool> relevant(n_candidates);
    for (std::size_t q = 0; q < n_queries; ++q) {
        for (std::size_t c = 0; c < n_candidates; ++c) {
            scores[c] = score(q, c);
            relevant[c] = cand_cats[c] == query_cats[q];
        }
        const auto ranked = rank_by_score(scores);
        for (auto k : ks) sums[k] += precision_at_k(ranked, relevant, k);
    }
    for (auto& [k, v] : sums) v /= static_cast<double>(n_queries);
    return sums;
}

PrecisionByK cosine_precision(const std::vector<std::vector<double>>& queries, const std::vector<std::size_t>& query_cats,
                              const std::vector<std::vector<double>>& cands, const std::vector<std::size_t>& cand_cats,
                              const std::vector<std::size_t>& ks) {
    return mean_precision(queries.size(), query_cats, cands.size(), cand_cats,
                          [&](std::size_t q, std::size_t c) { return cosine_similarity(queries[q], cands[c]); }, ks);
}

}  // namespace

std::vector<std::vector<double>> encode_images(const ModelParams& params, const ModelConfig& cfg,
                                               const std::vector<ImageTensor>& images, std::size_t workers) {
    std::vector<std::vector<double>> out(images.size());
    parallel_for(images.size(), workers, [&](std::size_t i) { out[i] = encode_image(params, cfg, images[i]); });
    return out;
}

PrecisionByK retrieve_image_image(const ModelParams& params, const ModelConfig& cfg, const RetrievalSplit& split,
                                  const std::vector<std::size_t>& ks, std::size_t workers) {
    std::vector<ImageTensor> cand_images;
    std::vector<std::size_t> cand_cats;
    for (const auto& c : split.candidates) {
        cand_images.push_back(c.image);
        cand_cats.push_back(c.category);
    }
    std::vector<ImageTensor> query_images;
    std::vector<std::size_t> query_cats;
    for (std::size_t c = 0; c < split.image_queries.size(); ++c)
        for (const auto& img : split.image_queries[c]) {
            query_images.push_back(img);
            query_cats.push_back(c);
        }
    return cosine_precision(encode_images(params, cfg, query_images, workers), query_cats,
                            encode_images(params, cfg, cand_images, workers), cand_cats, ks);
}

PrecisionByK retrieve_text_image(const ModelParams& params, const ModelConfig& cfg, const RetrievalSplit& split,
                                 const std::vector<std::size_t>& ks, std::size_t workers, TextImageScore score) {
    const bool projected = score == TextImageScore::projected_cosine;
    std::vector<std::vector<double>> cand(split.candidates.size());
    std::vector<std::size_t> cand_cats(split.candidates.size());
    parallel_for(split.candidates.size(), workers, [&](std::size_t i) {
        cand[i] = encode_image(params, cfg, split.candidates[i].image);
        if (projected) cand[i] = project(params, cfg, cand[i], Modality::image);
        cand_cats[i] = split.candidates[i].category;
    });
    std::vector<std::vector<double>> queries;
    std::vector<std::size_t> query_cats;
    for (std::size_t c = 0; c < split.text_queries.size(); ++c)
        for (const auto& q : split.text_queries[c]) {
            queries.push_back(encode_text(params, cfg, q));
            if (projected) queries.back() = project(params, cfg, queries.back(), Modality::text);
            query_cats.push_back(c);
        }
    if (projected) return cosine_precision(queries, query_cats, cand, cand_cats, ks);

    std::vector<double> logits(queries.size() * cand.size());
    parallel_for(queries.size(), workers, [&](std::size_t q) {
        for (std::size_t c = 0; c < cand.size(); ++c) logits[q * cand.size() + c] = binary_logit(params, cand[c], queries[q]);
    });
    return mean_precision(queries.size(), query_cats, cand.size(), cand_cats,
                          [&](std::size_t q, std::size_t c) { return logits[q * cand.size() + c]; }, ks);
}

void write_split_manifest(const RetrievalSplit& split, const fs::path& dir, const Vocabulary& vocab) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "text_queries");
    std::ofstream out(dir / "split.tsv");
    if (!out) throw IoError("cannot write split manifest under " + dir.string());
    for (std::size_t c = 0; c < split.categories.size(); ++c) {
        const std::string& cat = split.categories[c];
        for (std::size_t j = 0; j < split.image_queries[c].size(); ++j) {
            const std::string rel = "images/query_" + cat + "_" + std::to_string(j) + ".pgm";
            write_pgm(split.image_queries[c][j], dir / rel);
            out << "query\t" << cat << '\t' << rel << '\n';
        }
        if (!split.text_queries[c].empty()) {
            const std::string rel = "text_queries/" + cat + ".txt";
            std::ofstream tq(dir / rel);
            if (!tq) throw IoError("cannot write text queries " + (dir / rel).string());
            for (const auto& q : split.text_queries[c]) {
                for (std::size_t t = 0; t < q.tokens.size(); ++t) tq << (t ? " " : "") << vocab.token(q.tokens[t]);
                tq << '\n';
            }
            out << "text_query\t" << cat << '\t' << rel << '\n';
        }
    }
    for (const auto& cand : split.candidates) {
        const std::string rel = "images/cand_" + cand.id + ".pgm";
        write_pgm(cand.image, dir / rel);
        out << "candidate\t" << split.categories[cand.category] << '\t' << rel << '\n';
    }
}

RetrievalSplit load_split_manifest(const fs::path& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split manifest " + path.string());
    const fs::path base = path.parent_path();
    RetrievalSplit split;
    auto category_index = [&](const std::string& name) {
        auto it = std::find(split.categories.begin(), split.categories.end(), name);
        if (it != split.categories.end()) return static_cast<std::size_t>(it - split.categories.begin());
        split.categories.push_back(name);
        split.image_queries.emplace_back();
        split.text_queries.emplace_back();
        return split.categories.size() - 1;
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        for (std::string col; std::getline(ls, col, '\t');) cols.push_back(col);
        const std::string where = "split manifest line " + std::to_string(lineno);
        if (cols.size() != 3) throw FormatError(where + ": expected role<TAB>category<TAB>path");
        fs::path p = cols[2];
        if (p.is_relative()) p = base / p;
        if (!fs::exists(p)) throw IoError(where + ": missing file " + p.string());
        const std::size_t c = category_index(cols[1]);
        if (cols[0] == "query") {
            split.image_queries[c].push_back(read_pgm(p));
        } else if (cols[0] == "candidate") {
            split.candidates.push_back({p.stem().string(), read_pgm(p), c});
        } else if (cols[0] == "text_query") {
            std::ifstream tq(p);
            for (std::string q; std::getline(tq, q);) {
                const auto toks = tokenize(q);
                if (!toks.empty()) split.text_queries[c].push_back(vocab.encode(toks));
            }
        } else {
            throw FormatError(where + ": unknown role '" + cols[0] + "'");
        }
    }
    return split;
}

// ------------------------------------------------------------ classification

LabeledImageSet LabeledImageSet::subset(const std::vector<std::size_t>& idx) const {
    LabeledImageSet out;
    out.multi_label = multi_label;
    for (auto i : idx) {
        out.ids.push_back(ids.at(i));
        out.images.push_back(images.at(i));
        out.labels.push_back(labels.at(i));
    }
    return out;
}

LabeledImageSet stratified_fraction(const LabeledImageSet& set, double fraction, std::uint64_t seed) {
    require(fraction > 0.0 && fraction <= 1.0, "stratified_fraction: fraction must lie in (0,1]");
    if (fraction == 1.0) return set;
    // Stratum = first positive label (or "none").
    std::map<std::size_t, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto& l = set.labels[i];
        const auto it = std::find_if(l.begin(), l.end(), [](int v) { return v > 0; });
        strata[static_cast<std::size_t>(it - l.begin())].push_back(i);
    }
    std::vector<std::size_t> chosen;
    for (auto& [key, members] : strata) {
        Rng rng(derive_seed(seed, key));
        std::shuffle(members.begin(), members.end(), rng);
        const auto take = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size()))));
        chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<long>(std::min(take, members.size())));
    }
    std::sort(chosen.begin(), chosen.end());
    return set.subset(chosen);
}

void ProbeConfig::validate() const {
    require(learning_rate > 0.0, "probe: learning_rate must be > 0");
    require(batch_size >= 1 && max_epochs >= 1 && anneal_patience >= 1, "probe: invalid schedule settings");
    require(dropout >= 0.0 && dropout < 1.0, "probe: dropout must lie in [0,1)");
}

std::vector<double> LinearHead::logits(std::span<const double> h) const { return affine_forward(w, b, h); }

namespace {

void check_labels(const LabeledImageSet& set, const std::string& what) {
    require(set.size() > 0, what + ": empty set");
    const std::size_t c = set.width();
    require(c >= 1, what + ": empty label vectors");
    std::vector<std::size_t> count(c, 0);
    for (const auto& l : set.labels) {
        require(l.size() == c, what + ": label width varies");
        for (std::size_t j = 0; j < c; ++j) count[j] += l[j] > 0;
    }
    if (set.multi_label) {
        const bool any_informative = std::any_of(count.begin(), count.end(), [&](auto n) { return n > 0 && n < set.size(); });
        require(any_informative, what + ": degenerate label distribution");
    } else {
        require(c >= 2, what + ": multi-class labels need at least two classes");
        require(std::count_if(count.begin(), count.end(), [](auto n) { return n > 0; }) >= 2,
                what + ": degenerate label distribution (single class present)");
    }
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Loss gradient wrt logits for one example; returns the loss.
double head_loss_grad(std::span<const double> logits, const std::vector<int>& label, bool multi_label,
                      std::vector<double>& dlogits) {
    const std::size_t c = logits.size();
    dlogits.assign(c, 0.0);
    double loss = 0.0;
    if (multi_label) {
        for (std::size_t j = 0; j < c; ++j) {
            const bool y = label[j] > 0;
            loss += bce_with_logit(logits[j], y);
            dlogits[j] = (sigmoid(logits[j]) - (y ? 1.0 : 0.0)) / static_cast<double>(c);
        }
        return loss / static_cast<double>(c);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) {
        dlogits[j] = std::exp(logits[j] - lse) - (label[j] > 0 ? 1.0 : 0.0);
        if (label[j] > 0) loss += lse - logits[j];
    }
    return loss;
}

// Validation metric used for model selection.
double selection_metric(const ClassificationMetrics& m, bool multi_label) { return multi_label ? m.macro_auc : m.accuracy; }

LinearHead init_head(std::size_t classes, std::size_t width, std::uint64_t seed) {
    LinearHead head{Tensor({classes, width}), Tensor({classes})};
    const double a = std::sqrt(6.0 / static_cast<double>(classes + width));
    Rng rng(derive_seed(seed, 0x68656164ULL));
    for (double& v : head.w.data) v = uniform(rng, -a, a);
    return head;
}

TensorMap head_map(const LinearHead& h) { return {{"head.b", h.b}, {"head.w", h.w}}; }
LinearHead head_from(const TensorMap& m) { return {m.at("head.w"), m.at("head.b")}; }

// Per-feature standardization fitted on the training features.
struct FeatureScaler {
    std::vector<double> mean, inv_std;

    static FeatureScaler fit(const std::vector<std::vector<double>>& f) {
        FeatureScaler sc;
        const std::size_t w = f.front().size();
        const double n = static_cast<double>(f.size());
        sc.mean.assign(w, 0.0);
        sc.inv_std.assign(w, 1.0);
        for (const auto& row : f)
            for (std::size_t j = 0; j < w; ++j) sc.mean[j] += row[j] / n;
        for (std::size_t j = 0; j < w; ++j) {
            double var = 0.0;
            for (const auto& row : f) var += (row[j] - sc.mean[j]) * (row[j] - sc.mean[j]) / n;
            sc.inv_std[j] = 1.0 / std::sqrt(var + 1e-12);
        }
        return sc;
    }
    std::vector<double> apply(std::span<const double> x) const {
        std::vector<double> y(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) y[j] = (x[j] - mean[j]) * inv_std[j];
        return y;
    }
    std::vector<std::vector<double>> apply(const std::vector<std::vector<double>>& f) const {
        std::vector<std::vector<double>> out;
        out.reserve(f.size());
        for (const auto& row : f) out.push_back(apply(row));
        return out;
    }
};

// Inverted dropout mask for one feature vector.
std::vector<double> dropout_mask(std::size_t n, double p, Rng& rng) {
    std::vector<double> mask(n, 1.0);
    if (p <= 0.0) return mask;
    for (double& m : mask) m = uniform(rng, 0.0, 1.0) < p ? 0.0 : 1.0 / (1.0 - p);
    return mask;
}

}  // namespace

ClassificationMetrics evaluate_head(const LinearHead& head, const std::vector<std::vector<double>>& features,
                                    const LabeledImageSet& set) {
    const std::size_t c = set.width();
    std::size_t correct = 0;
    std::vector<std::vector<double>> scores(c, std::vector<double>(set.size()));
    for (std::size_t i = 0; i < set.size(); ++i) {
        const auto z = head.logits(features[i]);
        if (!set.multi_label) {
            const auto& l = set.labels[i];
            if (l[argmax(z)] > 0) ++correct;
        } else {
            std::size_t ok = 0;
            for (std::size_t j = 0; j < c; ++j) ok += ((z[j] > 0.0) == (set.labels[i][j] > 0));
            correct += ok == c;
        }
        // Softmax (or sigmoid) probabilities as per-class scores.
        if (set.multi_label) {
            for (std::size_t j = 0; j < c; ++j) scores[j][i] = sigmoid(z[j]);
        } else {
            const double mx = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (double v : z) sum += std::exp(v - mx);
            for (std::size_t j = 0; j < c; ++j) scores[j][i] = std::exp(z[j] - mx) / sum;
        }
    }
    ClassificationMetrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (std::size_t j = 0; j < c; ++j) {
        std::vector<int> y(set.size());
        for (std::size_t i = 0; i < set.size(); ++i) y[i] = set.labels[i][j] > 0;
        const auto pos = std::count(y.begin(), y.end(), 1);
        if (pos == 0 || pos == static_cast<long>(y.size())) continue;
        auc_sum += auc(scores[j], y);
        ++auc_n;
    }
    m.macro_auc = auc_n ? auc_sum / static_cast<double>(auc_n) : 0.5;
    return m;
}

ClassificationMetrics linear_probe(const ModelParams& params, const ModelConfig& cfg, const ClassificationData& data,
                                   const ProbeConfig& probe) {
    probe.validate();
    check_labels(data.train, "linear_probe train");
    const bool ml = data.train.multi_label;
    const auto raw_train = encode_images(params, cfg, data.train.images, probe.workers);
    const auto scaler = FeatureScaler::fit(raw_train);
    const auto ftrain = scaler.apply(raw_train);
    const auto fval = scaler.apply(encode_images(params, cfg, data.validation.images, probe.workers));
    const auto ftest = scaler.apply(encode_images(params, cfg, data.test.images, probe.workers));

    TensorMap head = head_map(init_head(data.train.width(), cfg.image_width(), probe.seed));
    OptimizerState state = OptimizerState::for_params(head);
    PlateauSchedule schedule(probe.learning_rate, probe.anneal_factor, probe.anneal_patience, true);
    Rng rng(derive_seed(probe.seed, 0x70726f6265ULL));

    TensorMap best = head;
    double best_val = -1.0;
    std::vector<std::size_t> order(data.train.size());
    std::vector<double> dlogits, x;
    for (std::size_t epoch = 0; epoch < probe.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += probe.batch_size) {
            const std::size_t end = std::min(order.size(), start + probe.batch_size);
            TensorMap grads = zeros_like(head);
            const LinearHead h = head_from(head);
            for (std::size_t t = start; t < end; ++t) {
                const std::size_t i = order[t];
                const auto mask = dropout_mask(ftrain[i].size(), probe.dropout, rng);
                x = ftrain[i];
                for (std::size_t j = 0; j < x.size(); ++j) x[j] *= mask[j];
                head_loss_grad(h.logits(x), data.train.labels[i], ml, dlogits);
                for (double& g : dlogits) g /= static_cast<double>(end - start);
                affine_backward(h.w, x, dlogits, grads.at("head.w"), grads.at("head.b"));
            }
            adam_step(head, grads, state, schedule.lr(), probe.weight_decay);
        }
        const double val = selection_metric(evaluate_head(head_from(head), fval, data.validation), ml);
        schedule.observe(val);
        if (val > best_val) {
            best_val = val;
            best = head;
        }
    }
    auto metrics = evaluate_head(head_from(best), ftest, data.test);
    metrics.best_val_metric = best_val;
    return metrics;
}

FineTuneResult fine_tune(const ModelParams& params, const ModelConfig& cfg, const ClassificationData& data,
                         const FineTuneConfig& ft) {
    const ProbeConfig& probe = ft.head;
    probe.validate();
    require(ft.warmup_lr > 0.0 || ft.warmup_steps == 0, "fine_tune: warmup_lr must be > 0");
    require(ft.encoder_lr >= 0.0, "fine_tune: encoder_lr must be >= 0");
    check_labels(data.train, "fine_tune train");
    const bool ml = data.train.multi_label;

    // Only the image encoder and the head are trainable.
    TensorMap encoder;
    for (const auto& [name, t] : params.tensors)
        if (name.rfind(kImageEncoderPrefix, 0) == 0) encoder.emplace(name, t);
    TensorMap head = head_map(init_head(data.train.width(), cfg.image_width(), probe.seed));
    OptimizerState head_state = OptimizerState::for_params(head);
    OptimizerState enc_state = OptimizerState::for_params(encoder);
    Rng rng(derive_seed(probe.seed, 0x70726f6265ULL));

    ModelParams work = params;
    const auto scaler = FeatureScaler::fit(encode_images(params, cfg, data.train.images, probe.workers));
    auto sync = [&] {
        for (const auto& [name, t] : encoder) work.tensors.at(name) = t;
    };

    // One minibatch: head gradients always, encoder gradients when requested.
    std::vector<double> dlogits;
    auto minibatch = [&](const std::vector<std::size_t>& idx, bool with_encoder, TensorMap& ghead, TensorMap& genc) {
        ghead = zeros_like(head);
        genc = zeros_like(encoder);
        const LinearHead h = head_from(head);
        for (std::size_t i : idx) {
            ImageTrace trace;
            const auto feat = scaler.apply(encode_image(work, cfg, data.train.images[i], with_encoder ? &trace : nullptr));
            const auto mask = dropout_mask(feat.size(), probe.dropout, rng);
            std::vector<double> x(feat);
            for (std::size_t j = 0; j < x.size(); ++j) x[j] *= mask[j];
            head_loss_grad(h.logits(x), data.train.labels[i], ml, dlogits);
            for (double& g : dlogits) g /= static_cast<double>(idx.size());
            auto dx = affine_backward(h.w, x, dlogits, ghead.at("head.w"), ghead.at("head.b"));
            if (with_encoder) {
                for (std::size_t j = 0; j < dx.size(); ++j) dx[j] *= mask[j] * scaler.inv_std[j];
                backward_image(work, cfg, trace, dx, genc);
            }
        }
    };

    std::vector<std::size_t> order(data.train.size());
    std::size_t cursor = order.size();
    auto next_batch = [&] {
        if (cursor + 1 > order.size() || cursor >= order.size()) {
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t end = std::min(order.size(), cursor + probe.batch_size);
        std::vector<std::size_t> idx(order.begin() + static_cast<long>(cursor), order.begin() + static_cast<long>(end));
        cursor = end;
        return idx;
    };

    TensorMap ghead, genc;
    for (std::size_t s = 0; s < ft.warmup_steps; ++s) {
        minibatch(next_batch(), false, ghead, genc);
        adam_step(head, ghead, head_state, ft.warmup_lr, probe.weight_decay);
    }
    FineTuneResult result;
    result.params_after_warmup = work;

    PlateauSchedule schedule(probe.learning_rate, probe.anneal_factor, probe.anneal_patience, true);
    const double enc_ratio = ft.encoder_lr / probe.learning_rate;
    TensorMap best_head = head, best_encoder = encoder;
    double best_val = -1.0;
    for (std::size_t epoch = 0; epoch < probe.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += probe.batch_size) {
            const std::size_t end = std::min(order.size(), start + probe.batch_size);
            const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
            const bool train_encoder = ft.encoder_lr > 0.0;
            minibatch(idx, train_encoder, ghead, genc);
            adam_step(head, ghead, head_state, schedule.lr(), probe.weight_decay);
            if (train_encoder) {
                adam_step(encoder, genc, enc_state, schedule.lr() * enc_ratio, probe.weight_decay);
                sync();
            }
        }
        const auto fval = scaler.apply(encode_images(work, cfg, data.validation.images, probe.workers));
        const double val = selection_metric(evaluate_head(head_from(head), fval, data.validation), ml);
        schedule.observe(val);
        if (val > best_val) {
            best_val = val;
            best_head = head;
            best_encoder = encoder;
        }
    }
    encoder = best_encoder;
    sync();
    const auto ftest = scaler.apply(encode_images(work, cfg, data.test.images, probe.workers));
    result.metrics = evaluate_head(head_from(best_head), ftest, data.test);
    result.metrics.best_val_metric = best_val;
    return result;
}

void export_embeddings(const ModelParams& params, const ModelConfig& cfg, const std::vector<std::string>& ids,
                       const std::vector<ImageTensor>& images, const std::vector<std::optional<std::size_t>>& labels,
                       const fs::path& path) {
    require(ids.size() == images.size(), "export_embeddings: ids and images differ in length");
    require(labels.empty() || labels.size() == images.size(), "export_embeddings: labels and images differ in length");
    const bool with_labels = !labels.empty();
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings " + path.string());
    out << "image_id";
    for (std::size_t j = 0; j < cfg.image_width(); ++j) out << ",h" << j;
    if (with_labels) out << ",label";
    out << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto h = encode_image(params, cfg, images[i]);
        out << ids[i];
        for (double v : h) out << ',' << v;
        if (with_labels) {
            out << ',';
            if (labels[i]) out << *labels[i];
        }
        out << '\n';
    }
    if (!out) throw IoError("failed writing embeddings " + path.string());
}

}  // namespace convirt
