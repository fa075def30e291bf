#include <doctest.h>

#include <cmath>

#include "convirt/data.hpp"
#include "convirt/train.hpp"

using namespace convirt;

namespace {

struct Setup {
    SyntheticCorpus corpus;
    ModelConfig model;
    LossConfig loss;
    AugmentConfig augment;
    TrainConfig train;
};

Setup small_setup(double noise = 0.05) {
    Setup s;
    SyntheticSpec spec;
    spec.n_classes = 4;
    spec.n_pairs = 320;
    spec.image_size = 16;
    spec.noise_std = noise;
    spec.seed = 3;
    s.corpus = generate_synthetic_corpus(spec);

    s.model.image_channels = {4, 8};
    s.model.image_size = 16;
    s.model.embed_dim = 16;
    s.model.n_heads = 2;
    s.model.n_attention_layers = 1;
    s.model.ffn_dim = 32;
    s.model.projection_hidden = 16;
    s.model.projection_dim = 8;

    s.augment.output_size = 16;
    s.augment.crop_area_ratio = {0.8, 1.0};
    s.augment.blur_sigma = {0.1, 0.5};

    s.train.learning_rate = 3e-3;
    s.train.batch_size = 16;
    s.train.validation_size = 64;
    s.train.eval_interval_steps = 16;
    s.train.anneal_patience = 2;
    s.train.stop_after = 4;
    s.train.seed = 2;
    return s;
}

PretrainResult run(const Setup& s) {
    return pretrain(s.corpus.examples, s.model, s.loss, s.augment, s.train);
}

}  // namespace

TEST_CASE("adam_step") {
    TensorMap params{{"w", Tensor({1}, 1.0)}};
    TensorMap zero{{"w", Tensor({1}, 0.0)}};
    auto state = OptimizerState::for_params(params);

    SUBCASE("zero gradient leaves weights unchanged") {
        adam_step(params, zero, state, 1e-3, 0.0);
        CHECK(params.at("w")[0] == 1.0);
        CHECK(state.t == 1);
    }
    SUBCASE("first step moves by lr times the gradient sign") {
        TensorMap g{{"w", Tensor({1}, 0.5)}};
        adam_step(params, g, state, 1e-3, 0.0);
        // m_hat = 0.5, v_hat = 0.25
        CHECK(params.at("w")[0] == doctest::Approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    }
    SUBCASE("decoupled weight decay") {
        adam_step(params, zero, state, 0.1, 0.01);
        CHECK(params.at("w")[0] == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-14));
    }
    SUBCASE("frozen tensors are untouched") {
        TensorMap g{{"w", Tensor({1}, 0.5)}};
        adam_step(params, g, state, 1e-3, 0.1, {"w"});
        CHECK(params.at("w")[0] == 1.0);
    }
    SUBCASE("bias correction over several steps") {
        const std::vector<double> gs{0.3, -0.1, 0.7};
        double w = 1.0, m = 0, v = 0;
        for (std::size_t t = 1; t <= gs.size(); ++t) {
            TensorMap g{{"w", Tensor({1}, gs[t - 1])}};
            adam_step(params, g, state, 1e-2, 0.0);
            m = 0.9 * m + 0.1 * gs[t - 1];
            v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
            const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
            w -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
            CHECK(params.at("w")[0] == doctest::Approx(w).epsilon(1e-12));
        }
    }
}

TEST_CASE("plateau schedule") {
    PlateauSchedule s(1.0, 0.5, 2);
    CHECK(s.observe(3.0));
    CHECK(s.observe(2.0));
    CHECK(!s.observe(2.0));
    CHECK(s.lr() == 1.0);
    CHECK(!s.observe(2.5));
    CHECK(s.lr() == 0.5);
    CHECK(!s.observe(2.1));
    CHECK(!s.observe(2.1));
    CHECK(s.lr() == 0.25);
    CHECK(s.observe(1.0));
    CHECK(s.best() == 1.0);

    PlateauSchedule h(1.0, 0.5, 1, true);
    CHECK(h.observe(0.1));
    CHECK(!h.observe(0.05));
    CHECK(h.lr() == 0.5);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ContractViolation);
    c = {};
    c.anneal_factor = 1.5;
    CHECK_THROWS_AS(c.validate(), ContractViolation);
    c = {};
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ContractViolation);
}

TEST_CASE("split_dataset") {
    const auto s = small_setup();
    const auto a = split_dataset(s.corpus.examples, 64, 9), b = split_dataset(s.corpus.examples, 64, 9);
    CHECK(a.validation.size() == 64);
    CHECK(a.train.size() == 256);
    CHECK(a.validation == b.validation);
    std::set<const PairedExample*> seen(a.train.begin(), a.train.end());
    for (const auto* p : a.validation) CHECK(seen.insert(p).second);
    CHECK_THROWS(split_dataset(s.corpus.examples, 320, 9));
}

TEST_CASE("pretrain") {
    auto s = small_setup();

    SUBCASE("stop_after 1 gives a single evaluation") {
        s.train.stop_after = 1;
        const auto r = run(s);
        CHECK(r.history.records.size() == 1);
        CHECK(r.history.records[0].step == s.train.eval_interval_steps);
    }
    SUBCASE("learning rate trace only halves") {
        s.train.stop_after = 8;
        s.train.anneal_patience = 1;
        s.train.learning_rate = 2e-2;
        const auto r = run(s);
        REQUIRE(r.history.records.size() >= 2);
        CHECK(r.history.records[0].lr == s.train.learning_rate);
        for (std::size_t i = 1; i < r.history.records.size(); ++i) {
            const double prev = r.history.records[i - 1].lr, cur = r.history.records[i].lr;
            CHECK((cur == prev || cur == prev * 0.5));
        }
    }
    SUBCASE("deterministic, and the best params reproduce the best loss") {
        const auto a = run(s), b = run(s);
        CHECK(a.history.to_csv() == b.history.to_csv());
        CHECK(a.params == b.params);
        REQUIRE(a.history.best_index);
        const auto split = split_dataset(s.corpus.examples, s.train.validation_size, s.train.seed);
        const double v = validation_loss(a.params, s.model, s.loss, s.augment, s.train, split.validation, split.train);
        CHECK(std::abs(v - a.history.records[*a.history.best_index].val_loss) < 1e-9);
    }
    SUBCASE("worker count does not change the result") {
        s.train.stop_after = 2;
        const auto a = run(s);
        s.train.workers = 4;
        const auto b = run(s);
        CHECK(a.history.to_csv() == b.history.to_csv());
    }
    SUBCASE("history csv") {
        s.train.stop_after = 1;
        const auto csv = run(s).history.to_csv();
        CHECK(csv.rfind("step,train_loss,val_loss,lr\n", 0) == 0);
    }
}

TEST_CASE("validation loss drops on an easy corpus") {
    auto s = small_setup(0.02);
    s.model.image_channels = {8, 16, 32};
    s.model.embed_dim = 32;
    s.model.n_heads = 4;
    s.model.ffn_dim = 64;
    s.model.projection_hidden = 32;
    s.model.projection_dim = 16;
    s.train.learning_rate = 1e-3;
    s.train.stop_after = 8;
    s.train.eval_interval_steps = 32;
    const auto r = run(s);
    REQUIRE(r.history.best_index);
    const double best = r.history.records[*r.history.best_index].val_loss;
    MESSAGE("initial " << r.initial_val_loss << " best " << best);
    CHECK(best < r.initial_val_loss - 0.5);
}

TEST_CASE("grad_check") {
    const ModelConfig tiny = tiny_model_config();
    for (const auto& [name, t] : init_params(tiny, 0).tensors) CHECK(t.size() <= 200);

    SUBCASE("linear projection mode") {
        ModelConfig cfg = tiny;
        cfg.projection_mode = ProjectionMode::linear;
        auto p = init_params(cfg, 1);
        jitter_biases(p, 1);
        GradCheckOptions opts;
        opts.tolerance = 1e-6;
        opts.epsilon = 1e-5;
        opts.only = {"proj_v.w", "proj_v.b", "proj_u.w", "proj_u.b"};
        const auto rep = grad_check(p, cfg, LossConfig{}, random_view_batch(cfg, 4, 1, Objective::convirt),
                                    Objective::convirt, opts);
        INFO(rep.to_table());
        CHECK(rep.entries.size() == 4);
        CHECK(rep.passed());
    }
    SUBCASE("full model, both objectives") {
        for (Objective o : {Objective::convirt, Objective::binary}) {
            auto p = init_params(tiny, 2);
            jitter_biases(p, 2);
            const auto rep = grad_check(p, tiny, LossConfig{}, random_view_batch(tiny, 4, 2, o), o);
            INFO(rep.to_table());
            CHECK(rep.passed());
        }
    }
    SUBCASE("a perturbed gradient is flagged") {
        auto p = init_params(tiny, 3);
        jitter_biases(p, 3);
        GradCheckOptions opts;
        opts.only = {"proj_u.w2"};
        opts.perturb = [](TensorMap& g) {
            for (double& v : g.at("proj_u.w2").data) v *= 1.1;
        };
        const auto rep = grad_check(p, tiny, LossConfig{}, random_view_batch(tiny, 4, 3, Objective::convirt),
                                    Objective::convirt, opts);
        REQUIRE(rep.entries.size() == 1);
        CHECK(!rep.passed());
        CHECK(rep.entries[0].max_rel_error > 0.04);
    }
}
