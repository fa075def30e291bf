#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "convirt/eval.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace convirt;

namespace {

ModelConfig small_model() {
    ModelConfig m;
    m.image_channels = {8, 16, 32};
    m.image_size = 16;
    m.embed_dim = 32;
    m.n_heads = 4;
    m.n_attention_layers = 1;
    m.ffn_dim = 64;
    m.projection_hidden = 32;
    m.projection_dim = 16;
    return m;
}

LabeledImageSet labeled(const SyntheticCorpus& c, std::size_t begin, std::size_t end, std::size_t nc) {
    LabeledImageSet s;
    for (std::size_t i = begin; i < end; ++i) {
        s.ids.push_back(c.examples[i].image_id);
        s.images.push_back(c.examples[i].image);
        std::vector<int> l(nc, 0);
        l[*c.examples[i].latent_label] = 1;
        s.labels.push_back(l);
    }
    return s;
}

ClassificationData easy_data(std::size_t nc = 4) {
    SyntheticSpec spec;
    spec.n_classes = nc;
    spec.n_pairs = 400;
    spec.image_size = 16;
    spec.noise_std = 0.02;
    spec.seed = 4;
    const auto c = generate_synthetic_corpus(spec);
    return {labeled(c, 0, 200, nc), labeled(c, 200, 280, nc), labeled(c, 280, 400, nc)};
}

}  // namespace

TEST_CASE("auc") {
    const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
    CHECK(auc(s, std::vector<int>{1, 1, 0, 0}) == 1.0);
    CHECK(auc(s, std::vector<int>{0, 0, 1, 1}) == 0.0);
    CHECK(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}) == 0.5);
    CHECK(auc(std::vector<double>{0.9, 0.4, 0.6, 0.1}, std::vector<int>{1, 1, 0, 0}) == 0.75);
    CHECK_THROWS_AS(auc(s, std::vector<int>{1, 1, 1, 1}), ContractViolation);

    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + uniform_index(rng, 40);
        std::vector<double> sc(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse scores so ties occur.
            sc[i] = std::round(uniform(rng, 0, 5));
            y[i] = uniform(rng, 0, 1) < 0.4 ? 1 : 0;
        }
        y[0] = 1;
        y[1] = 0;
        const double a = auc(sc, y);
        CHECK(a == doctest::Approx(oracle::pairwise_auc(sc, y)).epsilon(1e-12));
        std::vector<double> t(sc);
        for (double& v : t) v = std::exp(3 * v) - 7;
        CHECK(auc(t, y) == doctest::Approx(a).epsilon(1e-12));
    }
}

TEST_CASE("ranking and precision") {
    CHECK(rank_by_score(std::vector<double>{0.1, 0.9, 0.5, 0.9}) == RankedList{1, 3, 2, 0});

    const RankedList r{0, 1, 2, 3};
    const std::vector<bool> rel{true, false, true, false};
    CHECK(precision_at_k(r, rel, 1) == 1.0);
    CHECK(precision_at_k(r, rel, 2) == 0.5);
    CHECK(precision_at_k(r, rel, 3) == doctest::Approx(2.0 / 3.0));
    CHECK(precision_at_k(r, rel, 4) == 0.5);
    CHECK_THROWS_AS(precision_at_k(r, rel, 0), ContractViolation);
    CHECK_THROWS_AS(precision_at_k(r, rel, 5), ContractViolation);

    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5 + uniform_index(rng, 50);
        std::vector<double> s(n);
        std::vector<bool> m(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = uniform(rng, 0, 1);
            m[i] = uniform(rng, 0, 1) < 0.3;
        }
        const auto ranked = rank_by_score(s);
        double prev = 0;
        for (std::size_t k = 1; k <= n; ++k) {
            const double p = precision_at_k(ranked, m, k);
            REQUIRE((p >= 0 && p <= 1));
            const double hits = p * static_cast<double>(k);
            REQUIRE(hits >= prev - 1e-9);
            REQUIRE(hits <= prev + 1 + 1e-9);
            prev = hits;
        }
    }
}

TEST_CASE("precision_chance") {
    const auto c = precision_chance(10, 40, 5, 1);
    CHECK(c.mean == 0.25);
    CHECK(c.sigma == doctest::Approx(std::sqrt(5 * 0.25 * 0.75 * 35.0 / 39.0) / 5));
    CHECK(precision_chance(10, 40, 5, 4).sigma == doctest::Approx(c.sigma / 2));
    CHECK(precision_chance(10, 40, 40, 1).sigma == 0.0);
}

TEST_CASE("build_retrieval_split") {
    const std::vector<std::string> cats{"a", "b", "c", "d", "e"};
    std::vector<std::vector<int>> labels;
    Rng rng(1);
    for (std::size_t c = 0; c < 5; ++c)
        for (int i = 0; i < 400; ++i) {
            std::vector<int> l(5, 0);
            l[c] = 1;
            labels.push_back(l);
        }
    for (int i = 0; i < 200; ++i) {
        std::vector<int> l(5, 0);
        l[uniform_index(rng, 5)] = 1;
        l[uniform_index(rng, 5)] = 1;
        l[uniform_index(rng, 5)] = 1;
        labels.push_back(l);
    }
    std::vector<std::vector<int>> none(30, std::vector<int>(5, 0));
    labels.insert(labels.end(), none.begin(), none.end());

    const auto sel = build_retrieval_split(labels, cats, 16, 320, 7);
    std::size_t nq = 0, ncand = 0;
    std::set<std::size_t> used;
    for (std::size_t c = 0; c < 5; ++c) {
        nq += sel.queries[c].size();
        ncand += sel.candidates[c].size();
        for (auto idx : sel.queries[c]) {
            CHECK(used.insert(idx).second);
            CHECK(std::count(labels[idx].begin(), labels[idx].end(), 1) == 1);
            CHECK(labels[idx][c] == 1);
        }
        for (auto idx : sel.candidates[c]) {
            CHECK(used.insert(idx).second);
            CHECK(std::count(labels[idx].begin(), labels[idx].end(), 1) == 1);
            CHECK(labels[idx][c] == 1);
        }
    }
    CHECK(nq == 80);
    CHECK(ncand == 1600);

    const auto again = build_retrieval_split(labels, cats, 16, 320, 7);
    CHECK(again.queries == sel.queries);
    CHECK(again.candidates == sel.candidates);

    try {
        build_retrieval_split(labels, cats, 100, 320, 7);
        FAIL("expected a contract violation");
    } catch (const ContractViolation& e) {
        const std::string msg = e.what();
        CHECK(msg.find("'a'") != std::string::npos);
        CHECK(msg.find("420") != std::string::npos);
    }
}

TEST_CASE("retrieval") {
    const ModelConfig cfg = small_model();
    const auto p = init_params(cfg, 3);
    const std::size_t nc = 4;
    RetrievalSplit split;
    for (std::size_t c = 0; c < nc; ++c) {
        split.categories.push_back("c" + std::to_string(c));
        const auto img = class_template(c, nc, cfg.image_size);
        split.image_queries.push_back({img, img});
        split.text_queries.push_back({TokenSequence{{c + 4, c + 5}}, TokenSequence{{c + 9}}});
        for (int k = 0; k < 10; ++k) split.candidates.push_back({"c" + std::to_string(c) + "_" + std::to_string(k), img, c});
    }
    SUBCASE("duplicated queries are perfect") {
        const auto pr = retrieve_image_image(p, cfg, split, {1, 5, 10});
        for (const auto& [k, v] : pr) CHECK(v == 1.0);
    }
    SUBCASE("text retrieval is a valid precision") {
        const auto a = retrieve_text_image(p, cfg, split, {5, 10, 40});
        const auto b = retrieve_text_image(p, cfg, split, {5, 10, 40}, 3);
        CHECK(a == b);
        for (const auto& [k, v] : a) CHECK((v >= 0.0 && v <= 1.0));
        // With every candidate ranked, precision equals the relevant fraction.
        CHECK(a.at(40) == 0.25);
    }
    SUBCASE("k beyond the candidate count") {
        CHECK_THROWS_AS(retrieve_image_image(p, cfg, split, {41}), ContractViolation);
    }
    SUBCASE("manifest round trip") {
        TempDir dir("split");
        std::vector<std::string> words;
        for (int i = 0; i < 20; ++i) words.push_back("w" + std::to_string(i));
        const auto vocab = Vocabulary::build({words});
        write_split_manifest(split, dir.path(), vocab);
        const auto back = load_split_manifest(dir / "split.tsv", vocab);
        CHECK(back.categories == split.categories);
        CHECK(back.candidates.size() == split.candidates.size());
        CHECK(back.text_queries == split.text_queries);
        const auto pa = retrieve_image_image(p, cfg, back, {5});
        CHECK(pa.at(5) == 1.0);
    }
}

TEST_CASE("stratified_fraction") {
    const auto data = easy_data();
    const auto a = stratified_fraction(data.train, 0.1, 3);
    CHECK(a.size() == 20);
    CHECK(stratified_fraction(data.train, 0.1, 3).ids == a.ids);
    const auto tiny = stratified_fraction(data.train, 0.001, 3);
    CHECK(tiny.size() == 4);
    std::set<std::size_t> classes;
    for (const auto& l : tiny.labels) classes.insert(static_cast<std::size_t>(std::find(l.begin(), l.end(), 1) - l.begin()));
    CHECK(classes.size() == 4);
    CHECK(stratified_fraction(data.train, 1.0, 3).ids == data.train.ids);
    CHECK_THROWS_AS(stratified_fraction(data.train, 0.0, 3), ContractViolation);
}

TEST_CASE("linear probe and fine-tune") {
    const ModelConfig cfg = small_model();
    const auto params = init_params(cfg, 6);
    const auto data = easy_data();
    ProbeConfig probe;
    probe.learning_rate = 1e-2;
    probe.max_epochs = 40;
    probe.seed = 2;

    const auto m = linear_probe(params, cfg, data, probe);
    CHECK(m.accuracy >= 0.99);
    CHECK(m.macro_auc >= 0.99);
    CHECK(linear_probe(params, cfg, data, probe).accuracy == m.accuracy);

    FineTuneConfig ft;
    ft.head = probe;
    ft.warmup_steps = 20;
    ft.encoder_lr = 0.0;
    const auto r = fine_tune(params, cfg, data, ft);
    for (const auto& [name, t] : params.tensors) CHECK(r.params_after_warmup.at(name) == t);
    CHECK(std::abs(r.metrics.accuracy - m.accuracy) <= 0.05);
}

TEST_CASE("export_embeddings") {
    TempDir dir("emb");
    const ModelConfig cfg = small_model();
    const auto p = init_params(cfg, 1);
    const auto data = easy_data();
    std::vector<ImageTensor> imgs(data.test.images.begin(), data.test.images.begin() + 5);
    std::vector<std::string> ids(data.test.ids.begin(), data.test.ids.begin() + 5);
    std::vector<std::optional<std::size_t>> labels{0, 1, std::nullopt, 3, 2};
    export_embeddings(p, cfg, ids, imgs, labels, dir / "e.csv");
    export_embeddings(p, cfg, ids, imgs, labels, dir / "f.csv");
    const auto text = read_text(dir / "e.csv");
    CHECK(text == read_text(dir / "f.csv"));

    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    CHECK(line.rfind("image_id,h0,h1,", 0) == 0);
    CHECK(std::count(line.begin(), line.end(), ',') == static_cast<long>(cfg.image_width()) + 1);
    for (std::size_t i = 0; i < 5; ++i) {
        REQUIRE(std::getline(in, line));
        std::istringstream row(line);
        std::string cell;
        std::getline(row, cell, ',');
        CHECK(cell == ids[i]);
        const auto h = encode_image(p, cfg, imgs[i]);
        for (double v : h) {
            std::getline(row, cell, ',');
            CHECK(std::stod(cell) == v);
        }
        std::getline(row, cell, ',');
        CHECK(cell == (labels[i] ? std::to_string(*labels[i]) : std::string()));
    }
}

TEST_CASE("spearman") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    CHECK(spearman(x, std::vector<double>{2, 4, 8, 16, 32}) == doctest::Approx(1.0));
    CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    // Ranks with ties: x -> 1, 2.5, 2.5, 4
    CHECK(spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 2, 3, 4}) ==
          doctest::Approx(4.5 / std::sqrt(22.5)).epsilon(1e-12));
}
