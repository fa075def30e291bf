#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "convirt/objective.hpp"
#include "convirt/train.hpp"
#include "oracle.hpp"

using namespace convirt;

namespace {

EmbeddingBatch batch_of(const oracle::Matrix& m) { return EmbeddingBatch::from_rows(m); }

}  // namespace

TEST_CASE("cosine similarity") {
    const std::vector<double> a{1, 1}, b{1, 0}, c{0, 3};
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_similarity(b, c) == 0.0);
    CHECK(cosine_similarity(a, b) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(cosine_similarity(a, b) == doctest::Approx(0.70711).epsilon(1e-5));
    const std::vector<double> zero{0, 0};
    CHECK_THROWS_AS(cosine_similarity(zero, a), ContractViolation);
}

TEST_CASE("cosine gradient closed form") {
    const std::vector<double> a{1, 0}, b{0, 1};
    const auto g = cosine_similarity_grad(a, b);
    CHECK(g[0] == doctest::Approx(0.0));
    CHECK(g[1] == doctest::Approx(1.0));

    Rng rng(3);
    const auto m = oracle::random_matrix(rng, 2, 5);
    const auto ga = cosine_similarity_grad(m[0], m[1]);
    const double h = 1e-6;
    for (std::size_t j = 0; j < 5; ++j) {
        auto up = m[0], dn = m[0];
        up[j] += h;
        dn[j] -= h;
        const double num = (oracle::cosine(up, m[1]) - oracle::cosine(dn, m[1])) / (2 * h);
        CHECK(ga[j] == doctest::Approx(num).epsilon(1e-7));
    }
}

TEST_CASE("info_nce examples") {
    const auto one = batch_of({{0.3, -1.2, 2.0}});
    CHECK(info_nce_v2u(one, one, 0.1)[0] == 0.0);
    CHECK(info_nce_u2v(one, one, 0.1)[0] == 0.0);

    const auto V = batch_of({{1, 2}, {1, 2}, {1, 2}, {1, 2}, {1, 2}});
    const auto U = batch_of({{-3, 1}, {-3, 1}, {-3, 1}, {-3, 1}, {-3, 1}});
    for (double l : info_nce_v2u(V, U, 0.1)) CHECK(l == doctest::Approx(std::log(5.0)).epsilon(1e-14));

    const auto I = batch_of({{1, 0}, {0, 1}});
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(expected == doctest::Approx(0.31326).epsilon(1e-5));
    for (double l : info_nce_v2u(I, I, 1.0)) CHECK(l == doctest::Approx(expected).epsilon(1e-14));
    CHECK_THROWS_AS(info_nce_v2u(EmbeddingBatch(), EmbeddingBatch(), 0.1), ContractViolation);
}

TEST_CASE("info_nce_u2v is info_nce_v2u with roles swapped") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto V = batch_of(oracle::random_matrix(rng, 4, 3));
        const auto U = batch_of(oracle::random_matrix(rng, 4, 3));
        CHECK(info_nce_u2v(V, U, 0.1) == info_nce_v2u(U, V, 0.1));
    }
}

TEST_CASE("vectorized losses match the per-element oracle") {
    Rng rng(2024);
    for (double tau : {0.01, 0.1, 1.0}) {
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t n = 1 + trial % 8, d = 2 + trial % 5;
            const auto Vm = oracle::random_matrix(rng, n, d), Um = oracle::random_matrix(rng, n, d);
            const auto V = batch_of(Vm), U = batch_of(Um);
            const auto a = info_nce_v2u(V, U, tau), b = info_nce_u2v(V, U, tau);
            const auto oa = oracle::info_nce(Vm, Um, tau), ob = oracle::info_nce(Um, Vm, tau);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::abs(a[i] - oa[i]) < 1e-10);
                CHECK(std::abs(b[i] - ob[i]) < 1e-10);
            }
            const double lambda = 0.75;
            CHECK(std::abs(convirt_loss(V, U, {tau, lambda}).total - oracle::convirt_total(Vm, Um, tau, lambda)) < 1e-10);
        }
    }
}

TEST_CASE("convirt_loss weighting") {
    Rng rng(5);
    const auto Vm = oracle::random_matrix(rng, 2, 4), Um = oracle::random_matrix(rng, 2, 4);
    const auto V = batch_of(Vm), U = batch_of(Um);

    const auto l1 = convirt_loss(V, U, {0.1, 1.0});
    CHECK(l1.total == doctest::Approx((l1.image_to_text[0] + l1.image_to_text[1]) / 2).epsilon(1e-14));

    const auto half = convirt_loss(V, U, {0.1, 0.5});
    const auto ov = oracle::info_nce(Vm, Um, 0.1), ou = oracle::info_nce(Um, Vm, 0.1);
    CHECK(half.total == doctest::Approx(0.5 * ((ov[0] + ov[1]) / 2 + (ou[0] + ou[1]) / 2)).epsilon(1e-12));

    const auto same = batch_of({{1, 1, 0, 0}, {1, 1, 0, 0}});
    for (double lambda : {0.0, 0.3, 0.75, 1.0})
        CHECK(convirt_loss(same, same, {0.1, lambda}).total == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("breakdown total is the weighted mean of per-pair terms") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto V = batch_of(oracle::random_matrix(rng, 6, 3)), U = batch_of(oracle::random_matrix(rng, 6, 3));
        const LossConfig cfg{0.1, 0.75};
        const auto b = convirt_loss(V, U, cfg);
        double s = 0;
        for (std::size_t i = 0; i < 6; ++i) s += cfg.lambda * b.image_to_text[i] + (1 - cfg.lambda) * b.text_to_image[i];
        CHECK(std::abs(b.total - s / 6) < 1e-12);
    }
}

TEST_CASE("loss invariants") {
    Rng rng(77);
    std::uniform_real_distribution<double> pos(0.01, 100.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + trial % 7;
        const auto Vm = oracle::random_matrix(rng, n, 5), Um = oracle::random_matrix(rng, n, 5);
        const auto V = batch_of(Vm), U = batch_of(Um);
        const LossConfig cfg;
        const auto base = convirt_loss(V, U, cfg);

        {  // scale invariance
            auto V2 = V;
            const std::size_t row = trial % n;
            const double alpha = pos(rng);
            for (double& x : V2.row(row)) x *= alpha;
            auto U2 = U;
            const double beta = pos(rng);
            for (double& x : U2.row((row + 1) % n)) x *= beta;
            const auto scaled = convirt_loss(V2, U2, cfg);
            CHECK(std::abs(scaled.total - base.total) < 1e-10);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::abs(scaled.image_to_text[i] - base.image_to_text[i]) < 1e-10);
                CHECK(std::abs(scaled.text_to_image[i] - base.text_to_image[i]) < 1e-10);
            }
        }
        {  // permutation equivariance
            std::vector<std::size_t> perm(n);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            oracle::Matrix Vp, Up;
            for (std::size_t i : perm) {
                Vp.push_back(Vm[i]);
                Up.push_back(Um[i]);
            }
            const auto p = convirt_loss(batch_of(Vp), batch_of(Up), cfg);
            CHECK(std::abs(p.total - base.total) < 1e-12);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::abs(p.image_to_text[i] - base.image_to_text[perm[i]]) < 1e-12);
                CHECK(std::abs(p.text_to_image[i] - base.text_to_image[perm[i]]) < 1e-12);
            }
        }
        {  // symmetry at lambda one half
            const LossConfig h{0.1, 0.5};
            CHECK(convirt_loss(V, U, h).total == convirt_loss(U, V, h).total);
        }
        {  // nonnegativity
            CHECK(base.total >= 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(base.image_to_text[i] >= 0.0);
                CHECK(base.text_to_image[i] >= 0.0);
            }
        }
        {  // softmax rows sum to one
            for (bool t2i : {false, true}) {
                const auto p = contrastive_softmax(V, U, cfg.temperature, t2i);
                for (std::size_t i = 0; i < n; ++i) {
                    double s = 0;
                    for (std::size_t k = 0; k < n; ++k) s += p[i * n + k];
                    CHECK(std::abs(s - 1.0) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("tiny temperature stays finite") {
    Rng rng(1);
    const auto V = batch_of(oracle::random_matrix(rng, 8, 4)), U = batch_of(oracle::random_matrix(rng, 8, 4));
    const auto b = convirt_loss(V, U, {0.001, 0.75});
    CHECK(std::isfinite(b.total));
}

TEST_CASE("loss config validation") {
    CHECK_THROWS_AS((LossConfig{0.0, 0.5}.validate()), ContractViolation);
    CHECK_THROWS_AS((LossConfig{0.1, 1.5}.validate()), ContractViolation);
    CHECK_NOTHROW((LossConfig{0.1, 0.0}.validate()));
}

TEST_CASE("embedding gradient matches finite differences") {
    Rng rng(41);
    const auto Vm = oracle::random_matrix(rng, 5, 3), Um = oracle::random_matrix(rng, 5, 3);
    const LossConfig cfg{0.2, 0.75};
    const auto g = convirt_loss_with_grad(batch_of(Vm), batch_of(Um), cfg);
    CHECK(g.loss.total == doctest::Approx(oracle::convirt_total(Vm, Um, 0.2, 0.75)).epsilon(1e-12));
    const double h = 1e-6;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            auto up = Vm, dn = Vm;
            up[i][j] += h;
            dn[i][j] -= h;
            const double num = (oracle::convirt_total(up, Um, 0.2, 0.75) - oracle::convirt_total(dn, Um, 0.2, 0.75)) / (2 * h);
            CHECK(g.grad_v.row(i)[j] == doctest::Approx(num).epsilon(1e-6));
            auto uu = Um, ud = Um;
            uu[i][j] += h;
            ud[i][j] -= h;
            const double nu = (oracle::convirt_total(Vm, uu, 0.2, 0.75) - oracle::convirt_total(Vm, ud, 0.2, 0.75)) / (2 * h);
            CHECK(g.grad_u.row(i)[j] == doctest::Approx(nu).epsilon(1e-6));
        }
}

TEST_CASE("binary cross entropy") {
    CHECK(bce_with_logit(0.0, true) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(bce_with_logit(0.0, false) == doctest::Approx(0.69315).epsilon(1e-5));
    CHECK(bce_with_logit(40.0, true) < 1e-15);
    CHECK(bce_with_logit(-40.0, false) < 1e-15);
    CHECK(bce_with_logit(-800.0, true) == doctest::Approx(800.0));

    // A zeroed head outputs logit 0, i.e. p = 0.5.
    const ModelConfig mc = tiny_model_config();
    ModelParams params = init_params(mc, 1);
    for (auto& [name, t] : params.tensors)
        if (name.rfind("bin.out", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0);
    const std::vector<double> hv(mc.image_width(), 0.5), hu(mc.text_width(), -0.2);
    CHECK(binary_contrastive_loss(hv, hu, true, params) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(binary_contrastive_loss(hv, hu, false, params) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("fake pairs replace the report with another example's") {
    const ModelConfig mc = tiny_model_config();
    std::vector<PairedExample> pool(6);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        pool[i].image_id = std::to_string(i);
        pool[i].image = ImageTensor(8, 8, 0.5);
        pool[i].sentences = {TokenSequence{{i + 1}}};
    }
    std::vector<const PairedExample*> ptrs;
    for (const auto& e : pool) ptrs.push_back(&e);
    AugmentConfig aug;
    aug.output_size = mc.image_size;
    std::vector<int> hits(pool.size(), 0);
    for (std::uint64_t step = 0; step < 400; ++step) {
        const auto views = prepare_views({ptrs[0]}, aug, 9, step, Objective::binary, ptrs);
        REQUIRE(views.fake_texts.size() == 1);
        CHECK(views.texts[0].tokens[0] == 1);
        const std::size_t src = views.fake_texts[0].tokens[0] - 1;
        CHECK(src != 0);
        ++hits[src];
    }
    CHECK(hits[0] == 0);
    // Five alternatives, 400 draws: each expected 80, sd ~8.
    for (std::size_t j = 1; j < pool.size(); ++j) CHECK(std::abs(hits[j] - 80) < 32);
}

TEST_CASE("unused tensors get zero gradient") {
    const ModelConfig mc = tiny_model_config();
    ModelParams params = init_params(mc, 4);
    jitter_biases(params, 4);
    const auto views = random_view_batch(mc, 4, 4, Objective::convirt);
    const auto lg = loss_gradients(params, mc, LossConfig{}, views, Objective::convirt);
    CHECK(lg.grads.size() == params.tensors.size());
    for (const auto& [name, t] : lg.grads) {
        CHECK(t.shape == params.at(name).shape);
        if (name.rfind("bin.", 0) == 0)
            for (double x : t.data) CHECK(x == 0.0);
    }
    CHECK(lg.loss == doctest::Approx(batch_loss(params, mc, LossConfig{}, views, Objective::convirt)).epsilon(1e-14));
}

TEST_CASE("contrastive gradients need two pairs") {
    const ModelConfig mc = tiny_model_config();
    const ModelParams params = init_params(mc, 4);
    const auto views = random_view_batch(mc, 1, 4, Objective::convirt);
    CHECK_THROWS_AS(loss_gradients(params, mc, LossConfig{}, views, Objective::convirt), ContractViolation);
}

TEST_CASE("gradients are identical for any worker count") {
    const ModelConfig mc = tiny_model_config();
    ModelParams params = init_params(mc, 6);
    jitter_biases(params, 6);
    for (Objective obj : {Objective::convirt, Objective::binary}) {
        const auto views = random_view_batch(mc, 11, 6, obj);
        const auto a = loss_gradients(params, mc, LossConfig{}, views, obj, 1);
        const auto b = loss_gradients(params, mc, LossConfig{}, views, obj, 4);
        CHECK(a.loss == b.loss);
        CHECK(a.grads == b.grads);
    }
}

TEST_CASE("binary objective loss decreases under gradient descent") {
    const ModelConfig mc = tiny_model_config();
    ModelParams params = init_params(mc, 12);
    jitter_biases(params, 12);
    const auto views = random_view_batch(mc, 6, 12, Objective::binary);
    const double before = batch_loss(params, mc, LossConfig{}, views, Objective::binary);
    OptimizerState st = OptimizerState::for_params(params.tensors);
    for (int i = 0; i < 200; ++i) {
        const auto lg = loss_gradients(params, mc, LossConfig{}, views, Objective::binary);
        adam_step(params.tensors, lg.grads, st, 1e-2, 0.0);
    }
    const double after = batch_loss(params, mc, LossConfig{}, views, Objective::binary);
    CHECK(after < 0.5 * before);
}
