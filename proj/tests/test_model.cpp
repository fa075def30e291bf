#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "convirt/model.hpp"
#include "convirt/train.hpp"
#include "test_util.hpp"

using namespace convirt;

namespace {

ImageTensor random_image(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    ImageTensor img(n, n);
    for (double& p : img.pixels) p = uniform(rng, 0.0, 1.0);
    return img;
}

void zero_biases(ModelParams& p) {
    for (auto& [name, t] : p.tensors)
        if (is_bias(name)) std::fill(t.data.begin(), t.data.end(), 0.0);
}

// Direct loop convolution: zero padding k/2, then ReLU, then spatial mean.
std::vector<double> naive_image(const ModelParams& p, const ModelConfig& cfg, const ImageTensor& img) {
    std::vector<std::vector<std::vector<double>>> a(1, std::vector<std::vector<double>>(img.height, std::vector<double>(img.width)));
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) a[0][y][x] = img.at(y, x);
    const long k = static_cast<long>(cfg.conv_kernel), s = static_cast<long>(cfg.conv_stride), pad = k / 2;
    for (std::size_t l = 0; l < cfg.image_channels.size(); ++l) {
        const auto& w = p.at("img.conv" + std::to_string(l) + ".w");
        const auto& b = p.at("img.conv" + std::to_string(l) + ".b");
        const long cin = static_cast<long>(a.size()), h = static_cast<long>(a[0].size()), wd = static_cast<long>(a[0][0].size());
        const long ho = (h + 2 * pad - k) / s + 1, wo = (wd + 2 * pad - k) / s + 1;
        const long cout = static_cast<long>(cfg.image_channels[l]);
        std::vector<std::vector<std::vector<double>>> o(cout, std::vector<std::vector<double>>(ho, std::vector<double>(wo)));
        for (long co = 0; co < cout; ++co)
            for (long oy = 0; oy < ho; ++oy)
                for (long ox = 0; ox < wo; ++ox) {
                    double acc = b[co];
                    for (long ci = 0; ci < cin; ++ci)
                        for (long ky = 0; ky < k; ++ky)
                            for (long kx = 0; kx < k; ++kx) {
                                const long iy = oy * s + ky - pad, ix = ox * s + kx - pad;
                                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                                acc += w[((co * cin + ci) * k + ky) * k + kx] * a[ci][iy][ix];
                            }
                    o[co][oy][ox] = std::max(0.0, acc);
                }
        a = std::move(o);
    }
    std::vector<double> out;
    for (const auto& ch : a) {
        double s2 = 0;
        for (const auto& row : ch)
            for (double v : row) s2 += v;
        out.push_back(s2 / static_cast<double>(ch.size() * ch[0].size()));
    }
    return out;
}

using Mat = std::vector<std::vector<double>>;

Mat linear(const Mat& x, const Tensor& w, const Tensor* b) {
    const std::size_t out = w.rows(), in = w.cols();
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b ? (*b)[o] : 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[t][i];
            y[t][o] = acc;
        }
    return y;
}

// Reference transformer encoder with max pooling, written independently of the Eigen path.
std::vector<double> naive_text(const ModelParams& p, const ModelConfig& cfg, const std::vector<std::size_t>& toks) {
    const std::size_t T = toks.size(), D = cfg.embed_dim, H = cfg.n_heads, dh = D / H;
    Mat x(T, std::vector<double>(D));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < D; ++i) {
            x[t][i] = p.at("txt.embed")[toks[t] * D + i];
            if (cfg.position_encoding) {
                const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(D));
                x[t][i] += i % 2 == 0 ? std::sin(angle) : std::cos(angle);
            }
        }
    for (std::size_t l = 0; l < cfg.n_attention_layers; ++l) {
        auto P = [&](const char* n) -> const Tensor& { return p.at("txt.layer" + std::to_string(l) + "." + n); };
        const Mat q = linear(x, P("wq"), &P("bq")), k = linear(x, P("wk"), nullptr), v = linear(x, P("wv"), &P("bv"));
        Mat ctx(T, std::vector<double>(D, 0.0));
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < T; ++i) {
                std::vector<double> sc(T);
                double mx = -1e300, z = 0;
                for (std::size_t j = 0; j < T; ++j) {
                    double d = 0;
                    for (std::size_t e = 0; e < dh; ++e) d += q[i][h * dh + e] * k[j][h * dh + e];
                    sc[j] = d / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, sc[j]);
                }
                for (double& s : sc) z += (s = std::exp(s - mx));
                for (std::size_t j = 0; j < T; ++j)
                    for (std::size_t e = 0; e < dh; ++e) ctx[i][h * dh + e] += sc[j] / z * v[j][h * dh + e];
            }
        const Mat att = linear(ctx, P("wo"), &P("bo"));
        Mat mid = x;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < D; ++i) mid[t][i] += att[t][i];
        Mat hid = linear(mid, P("ffn1.w"), &P("ffn1.b"));
        for (auto& r : hid)
            for (double& h2 : r) h2 = std::max(0.0, h2);
        const Mat f = linear(hid, P("ffn2.w"), &P("ffn2.b"));
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t i = 0; i < D; ++i) x[t][i] = mid[t][i] + f[t][i];
    }
    std::vector<double> out(D, -1e300);
    for (const auto& r : x)
        for (std::size_t i = 0; i < D; ++i) out[i] = std::max(out[i], r[i]);
    return out;
}

}  // namespace

TEST_CASE("init_params") {
    const ModelConfig cfg;
    const auto a = init_params(cfg, 3), b = init_params(cfg, 3), c = init_params(cfg, 4);
    CHECK(a == b);
    CHECK(!(a == c));
    for (const auto& [name, t] : a.tensors) {
        for (double v : t.data) REQUIRE(std::isfinite(v));
        if (is_bias(name)) {
            for (double v : t.data) CHECK(v == 0.0);
            continue;
        }
        double fan_in, fan_out;
        if (t.shape.size() == 4) {
            fan_in = static_cast<double>(t.shape[1] * t.shape[2] * t.shape[3]);
            fan_out = static_cast<double>(t.shape[0] * t.shape[2] * t.shape[3]);
        } else {
            fan_in = static_cast<double>(t.shape[1]);
            fan_out = static_cast<double>(t.shape[0]);
        }
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        double mx = 0;
        for (double v : t.data) mx = std::max(mx, std::abs(v));
        CHECK(mx <= bound);
        if (t.size() >= 100) CHECK(mx > 0.9 * bound);
    }
}

TEST_CASE("parameter shapes follow the config") {
    const ModelConfig cfg;
    const auto p = init_params(cfg, 1);
    CHECK(p.at("img.conv0.w").shape == std::vector<std::size_t>{16, 1, 3, 3});
    CHECK(p.at("img.conv3.w").shape == std::vector<std::size_t>{128, 64, 3, 3});
    CHECK(p.at("txt.embed").shape == std::vector<std::size_t>{128, 64});
    CHECK(p.at("proj_v.w1").shape == std::vector<std::size_t>{128, 128});
    CHECK(p.at("proj_u.w2").shape == std::vector<std::size_t>{64, 128});
    CHECK(p.at("bin.hidden.w").shape == std::vector<std::size_t>{64, 128});

    ModelConfig bad;
    bad.n_heads = 5;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    bad = {};
    bad.projection_dim = 1;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("encode_image") {
    ModelConfig cfg;
    auto p = init_params(cfg, 5);
    CHECK(encode_image(p, cfg, ImageTensor(32, 32, 0.0)).size() == 128);
    for (double v : encode_image(p, cfg, ImageTensor(32, 32, 0.0))) CHECK(v == 0.0);
    CHECK_THROWS_AS(encode_image(p, cfg, ImageTensor(16, 16)), ContractViolation);

    const auto img = random_image(32, 9);
    CHECK(encode_image(p, cfg, img) == encode_image(p, cfg, img));

    jitter_biases(p, 5);
    const auto fast = encode_image(p, cfg, img), slow = naive_image(p, cfg, img);
    REQUIRE(fast.size() == slow.size());
    for (std::size_t i = 0; i < fast.size(); ++i) CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));
}

TEST_CASE("one-channel 1x1 conv on a 2x2 input") {
    ModelConfig cfg = tiny_model_config();
    cfg.image_channels = {1};
    cfg.conv_kernel = 1;
    cfg.conv_stride = 1;
    cfg.image_size = 2;
    auto p = init_params(cfg, 1);
    p.at("img.conv0.w").data = {2.0};
    p.at("img.conv0.b").data = {-0.5};
    ImageTensor img(2, 2);
    img.pixels = {0.1, 0.4, 0.6, 0.9};
    // relu(2x - 0.5) = [0, 0.3, 0.7, 1.3]
    const auto h = encode_image(p, cfg, img);
    REQUIRE(h.size() == 1);
    CHECK(h[0] == doctest::Approx(0.575).epsilon(1e-14));
}

TEST_CASE("encode_text") {
    const ModelConfig cfg = tiny_model_config();
    auto p = init_params(cfg, 8);
    jitter_biases(p, 8);

    SUBCASE("matches the reference encoder") {
        for (const auto& toks : std::vector<std::vector<std::size_t>>{{3}, {1, 7}, {4, 4, 11, 0, 2}}) {
            const auto a = encode_text(p, cfg, TokenSequence{toks});
            const auto b = naive_text(p, cfg, toks);
            REQUIRE(a.size() == cfg.embed_dim);
            for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
        }
    }
    SUBCASE("single token returns its final vector") {
        TextTrace tr;
        const auto h = encode_text(p, cfg, TokenSequence{{6}}, &tr);
        CHECK(h == tr.output);
    }
    SUBCASE("order does not matter without position or attention") {
        ModelConfig c2 = cfg;
        c2.position_encoding = false;
        auto q = p;
        for (const char* n : {"wq", "wk", "wv", "wo", "bq", "bv", "bo"})
            std::fill(q.at(std::string("txt.layer0.") + n).data.begin(), q.at(std::string("txt.layer0.") + n).data.end(), 0.0);
        CHECK(encode_text(q, c2, TokenSequence{{2, 9}}) == encode_text(q, c2, TokenSequence{{9, 2}}));
    }
    SUBCASE("zero layers is a max over embedding rows") {
        ModelConfig c0 = cfg;
        c0.n_attention_layers = 0;
        c0.position_encoding = false;
        const auto q = init_params(c0, 2);
        const auto h = encode_text(q, c0, TokenSequence{{2, 5}});
        const auto& e = q.at("txt.embed");
        for (std::size_t i = 0; i < c0.embed_dim; ++i)
            CHECK(h[i] == std::max(e[2 * c0.embed_dim + i], e[5 * c0.embed_dim + i]));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(encode_text(p, cfg, TokenSequence{}), ContractViolation);
        CHECK_THROWS_AS(encode_text(p, cfg, TokenSequence{{cfg.vocab_size}}), ContractViolation);
    }
}

TEST_CASE("position encoding") {
    const auto pe0 = position_encoding(0, 6);
    CHECK(pe0 == std::vector<double>{0, 1, 0, 1, 0, 1});
    const auto pe3 = position_encoding(3, 4);
    CHECK(pe3[0] == doctest::Approx(std::sin(3.0)));
    CHECK(pe3[1] == doctest::Approx(std::cos(3.0)));
    CHECK(pe3[2] == doctest::Approx(std::sin(3.0 / 100.0)));
}

TEST_CASE("project") {
    ModelConfig cfg;
    const auto p = init_params(cfg, 2);
    const std::vector<double> zi(cfg.image_width(), 0.0), zt(cfg.text_width(), 0.0);
    for (double v : project(p, cfg, zi, Modality::image)) CHECK(v == 0.0);
    CHECK(project(p, cfg, zi, Modality::image).size() == cfg.projection_dim);
    CHECK(project(p, cfg, zt, Modality::text).size() == cfg.projection_dim);
    CHECK_THROWS_AS(project(p, cfg, zt, Modality::image), ContractViolation);

    ModelConfig small = tiny_model_config();
    small.image_channels = {2};
    small.projection_hidden = 2;
    small.projection_dim = 2;
    auto q = init_params(small, 1);
    std::fill(q.at("proj_v.w1").data.begin(), q.at("proj_v.w1").data.end(), 1.0);
    std::fill(q.at("proj_v.w2").data.begin(), q.at("proj_v.w2").data.end(), 1.0);
    const std::vector<double> h{1.0, -1.0};
    CHECK(project(q, small, h, Modality::image) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("linear projection is positively homogeneous") {
    ModelConfig cfg = tiny_model_config();
    cfg.projection_mode = ProjectionMode::linear;
    const auto p = init_params(cfg, 4);
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> h(cfg.text_width());
        for (double& v : h) v = uniform(rng, -2, 2);
        const double alpha = uniform(rng, 0, 10);
        auto scaled = h;
        for (double& v : scaled) v *= alpha;
        const auto a = project(p, cfg, h, Modality::text), b = project(p, cfg, scaled, Modality::text);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(alpha * a[i]).epsilon(1e-12));
    }
}

TEST_CASE("forward outputs are finite for random params") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelConfig cfg = tiny_model_config();
        auto p = init_params(cfg, static_cast<std::uint64_t>(trial));
        for (auto& [name, t] : p.tensors)
            for (double& v : t.data) v = uniform(rng, -3, 3);
        const auto hv = encode_image(p, cfg, random_image(cfg.image_size, static_cast<std::uint64_t>(trial)));
        TokenSequence s;
        for (int i = 0; i < 6; ++i) s.tokens.push_back(uniform_index(rng, cfg.vocab_size));
        const auto hu = encode_text(p, cfg, s);
        CHECK(all_finite(hv));
        CHECK(all_finite(hu));
        CHECK(all_finite(project(p, cfg, hv, Modality::image)));
        CHECK(all_finite(project(p, cfg, hu, Modality::text)));
    }
}

TEST_CASE("checkpoint round trip") {
    TempDir dir("ckpt");
    ModelConfig cfg = tiny_model_config();
    cfg.projection_mode = ProjectionMode::linear;
    const auto p = init_params(cfg, 7);
    save_checkpoint(p, cfg, dir / "m.ckpt");
    const auto ck = load_checkpoint(dir / "m.ckpt");
    CHECK(ck.config == cfg);
    CHECK(ck.params == p);
    const auto img = random_image(cfg.image_size, 1);
    CHECK(encode_image(ck.params, ck.config, img) == encode_image(init_params(cfg, 7), cfg, img));

    const std::string bytes = read_text(dir / "m.ckpt");
    SUBCASE("truncated") {
        write_text(dir / "t.ckpt", bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), FormatError);
    }
    SUBCASE("corrupt payload names the tensor") {
        std::string bad = bytes;
        const auto pos = bad.find("txt.embed");
        REQUIRE(pos != std::string::npos);
        bad[pos + 9 + 4 + 2 * 8 + 3] ^= 0x5a;
        write_text(dir / "c.ckpt", bad);
        try {
            load_checkpoint(dir / "c.ckpt");
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("txt.embed") != std::string::npos);
        }
    }
    SUBCASE("bad magic") {
        write_text(dir / "m2.ckpt", "XXXXXXXX" + bytes.substr(8));
        CHECK_THROWS_AS(load_checkpoint(dir / "m2.ckpt"), FormatError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(dir / "none.ckpt"), IoError); }
}
