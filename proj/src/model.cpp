#include "convirt/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace convirt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

ConstMatMap as_mat(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
MatMap as_mat(Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }
ConstMatMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
    return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
MatMap as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
    return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
ConstVecMap as_vec(std::span<const double> v) { return {v.data(), static_cast<Eigen::Index>(v.size())}; }
VecMap as_vec(std::vector<double>& v) { return {v.data(), static_cast<Eigen::Index>(v.size())}; }
VecMap as_vec(Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.size())}; }
ConstVecMap as_vec(const Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.size())}; }

std::string conv_name(std::size_t l, const char* what) { return "img.conv" + std::to_string(l) + "." + what; }
std::string layer_name(std::size_t l, const char* what) { return "txt.layer" + std::to_string(l) + "." + what; }
std::string proj_prefix(Modality m) { return m == Modality::image ? "proj_v." : "proj_u."; }

Tensor& grad_of(TensorMap& grads, const std::string& name) {
    auto it = grads.find(name);
    require(it != grads.end(), "gradient map lacks tensor " + name);
    return it->second;
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s) {
    const std::size_t pad = k / 2;
    return (in + 2 * pad - k) / s + 1;
}

// Unfolds [C, H, W] into [C*k*k, Ho*Wo] with zero padding k/2.
void im2col(const std::vector<double>& in, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s,
            std::size_t ho, std::size_t wo, std::vector<double>& col) {
    const auto pad = static_cast<long>(k / 2);
    col.assign(c * k * k * ho * wo, 0.0);
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                double* dst = col.data() + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * s + ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    const double* src = in.data() + (ci * h + static_cast<std::size_t>(iy)) * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * s + kx) - pad;
                        if (ix >= 0 && ix < static_cast<long>(w)) dst[oy * wo + ox] = src[ix];
                    }
                }
            }
}

void col2im(const std::vector<double>& col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s,
            std::size_t ho, std::size_t wo, std::vector<double>& out) {
    const auto pad = static_cast<long>(k / 2);
    out.assign(c * h * w, 0.0);
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                const double* src = col.data() + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * s + ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    double* dst = out.data() + (ci * h + static_cast<std::size_t>(iy)) * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox * s + kx) - pad;
                        if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
}

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void update(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    }
};

void relu_inplace(std::vector<double>& v) {
    for (double& x : v) x = x > 0.0 ? x : 0.0;
}

}  // namespace

std::string to_string(ProjectionMode m) { return m == ProjectionMode::linear ? "linear" : "nonlinear"; }

ProjectionMode projection_mode_from_string(const std::string& s) {
    if (s == "linear") return ProjectionMode::linear;
    if (s == "nonlinear") return ProjectionMode::nonlinear;
    throw ContractViolation("unknown projection mode '" + s + "'");
}

void ModelConfig::validate() const {
    require(!image_channels.empty(), "model: image_channels must be non-empty");
    for (auto c : image_channels) require(c >= 1, "model: channel widths must be >= 1");
    require(conv_kernel >= 1 && conv_stride >= 1, "model: conv kernel and stride must be >= 1");
    require(image_size >= 1, "model: image_size must be >= 1");
    require(vocab_size >= 1 && embed_dim >= 1 && ffn_dim >= 1 && n_heads >= 1, "model: text dims must be >= 1");
    require(embed_dim % n_heads == 0, "model: n_heads must divide embed_dim");
    require(projection_hidden >= 1, "model: projection_hidden must be >= 1");
    require(projection_dim >= 2, "model: projection_dim must be >= 2");
    require(binary_width >= 1 && binary_hidden >= 1, "model: binary head dims must be >= 1");
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "missing parameter tensor " + name);
    return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "missing parameter tensor " + name);
    return it->second;
}

bool is_bias(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot != std::string::npos && name.compare(dot + 1, 1, "b") == 0;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    auto& t = p.tensors;
    const std::size_t k = cfg.conv_kernel;

    std::size_t cin = 1;
    for (std::size_t l = 0; l < cfg.image_channels.size(); ++l) {
        const std::size_t cout = cfg.image_channels[l];
        t.emplace(conv_name(l, "w"), Tensor({cout, cin, k, k}));
        t.emplace(conv_name(l, "b"), Tensor({cout}));
        cin = cout;
    }

    const std::size_t d = cfg.embed_dim, f = cfg.ffn_dim;
    t.emplace("txt.embed", Tensor({cfg.vocab_size, d}));
    for (std::size_t l = 0; l < cfg.n_attention_layers; ++l) {
        for (const char* m : {"wq", "wk", "wv", "wo"}) t.emplace(layer_name(l, m), Tensor({d, d}));
        for (const char* m : {"bq", "bv", "bo"}) t.emplace(layer_name(l, m), Tensor({d}));
        t.emplace(layer_name(l, "ffn1.w"), Tensor({f, d}));
        t.emplace(layer_name(l, "ffn1.b"), Tensor({f}));
        t.emplace(layer_name(l, "ffn2.w"), Tensor({d, f}));
        t.emplace(layer_name(l, "ffn2.b"), Tensor({d}));
    }

    for (Modality m : {Modality::image, Modality::text}) {
        const std::string pre = proj_prefix(m);
        const std::size_t in = m == Modality::image ? cfg.image_width() : cfg.text_width();
        if (cfg.projection_mode == ProjectionMode::nonlinear) {
            t.emplace(pre + "w1", Tensor({cfg.projection_hidden, in}));
            t.emplace(pre + "b1", Tensor({cfg.projection_hidden}));
            t.emplace(pre + "w2", Tensor({cfg.projection_dim, cfg.projection_hidden}));
            t.emplace(pre + "b2", Tensor({cfg.projection_dim}));
        } else {
            t.emplace(pre + "w", Tensor({cfg.projection_dim, in}));
            t.emplace(pre + "b", Tensor({cfg.projection_dim}));
        }
    }

    t.emplace("bin.img.w", Tensor({cfg.binary_width, cfg.image_width()}));
    t.emplace("bin.img.b", Tensor({cfg.binary_width}));
    t.emplace("bin.txt.w", Tensor({cfg.binary_width, cfg.text_width()}));
    t.emplace("bin.txt.b", Tensor({cfg.binary_width}));
    t.emplace("bin.hidden.w", Tensor({cfg.binary_hidden, 2 * cfg.binary_width}));
    t.emplace("bin.hidden.b", Tensor({cfg.binary_hidden}));
    t.emplace("bin.out.w", Tensor({1, cfg.binary_hidden}));
    t.emplace("bin.out.b", Tensor({1}));

    // std::map iteration order is by name, so draws are independent of insertion order.
    for (auto& [name, tensor] : t) {
        if (is_bias(name)) continue;
        const std::size_t receptive = tensor.shape.size() > 2 ? tensor.shape[2] * tensor.shape[3] : 1;
        const double fan_out = static_cast<double>(tensor.shape[0] * receptive);
        const double fan_in = static_cast<double>(tensor.shape[1] * receptive);
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        Fnv1a name_hash;
        name_hash.update(name.data(), name.size());
        Rng rng(derive_seed(seed, name_hash.h));
        for (double& v : tensor.data) v = uniform(rng, -a, a);
    }
    return p;
}

// ------------------------------------------------------------------- image

std::vector<double> encode_image(const ModelParams& params, const ModelConfig& cfg, const ImageTensor& image,
                                 ImageTrace* trace) {
    require(image.height == cfg.image_size && image.width == cfg.image_size,
            "encode_image: expected " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                " image, got " + std::to_string(image.height) + "x" + std::to_string(image.width));
    const std::size_t k = cfg.conv_kernel, s = cfg.conv_stride;
    std::vector<double> act = image.pixels, col;
    std::size_t c = 1, h = image.height, w = image.width;
    if (trace) {
        *trace = {};
        trace->acts.push_back(act);
        trace->heights.push_back(h);
        trace->widths.push_back(w);
        trace->channels.push_back(c);
    }

    for (std::size_t l = 0; l < cfg.image_channels.size(); ++l) {
        const Tensor& wt = params.at(conv_name(l, "w"));
        const Tensor& bt = params.at(conv_name(l, "b"));
        const std::size_t co = cfg.image_channels[l];
        const std::size_t ho = conv_out(h, k, s), wo = conv_out(w, k, s);
        require(ho >= 1 && wo >= 1, "encode_image: feature map vanished at block " + std::to_string(l));
        im2col(act, c, h, w, k, s, ho, wo, col);

        std::vector<double> out(co * ho * wo);
        auto om = as_mat(out, co, ho * wo);
        om.noalias() = ConstMatMap(wt.data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(c * k * k)) *
                       as_mat(col, c * k * k, ho * wo);
        om.colwise() += as_vec(bt);
        relu_inplace(out);

        act = std::move(out);
        c = co;
        h = ho;
        w = wo;
        if (trace) {
            trace->acts.push_back(act);
            trace->heights.push_back(h);
            trace->widths.push_back(w);
            trace->channels.push_back(c);
        }
    }

    std::vector<double> pooled(c);
    as_vec(pooled) = as_mat(act, c, h * w).rowwise().mean();
    return pooled;
}

void backward_image(const ModelParams& params, const ModelConfig& cfg, const ImageTrace& trace,
                    std::span<const double> grad_h, TensorMap& grads) {
    const std::size_t n_blocks = cfg.image_channels.size();
    require(trace.acts.size() == n_blocks + 1, "backward_image: trace does not match config");
    require(grad_h.size() == cfg.image_width(), "backward_image: gradient width mismatch");
    const std::size_t k = cfg.conv_kernel, s = cfg.conv_stride;

    const std::size_t hl = trace.heights.back(), wl = trace.widths.back(), cl = trace.channels.back();
    std::vector<double> dact(cl * hl * wl);
    const double inv = 1.0 / static_cast<double>(hl * wl);
    for (std::size_t ch = 0; ch < cl; ++ch)
        std::fill_n(dact.begin() + static_cast<long>(ch * hl * wl), hl * wl, grad_h[ch] * inv);

    std::vector<double> col, dcol;
    for (std::size_t l = n_blocks; l-- > 0;) {
        const auto& out = trace.acts[l + 1];
        for (std::size_t i = 0; i < dact.size(); ++i)
            if (out[i] <= 0.0) dact[i] = 0.0;

        const std::size_t c = trace.channels[l], h = trace.heights[l], w = trace.widths[l];
        const std::size_t co = trace.channels[l + 1], ho = trace.heights[l + 1], wo = trace.widths[l + 1];
        im2col(trace.acts[l], c, h, w, k, s, ho, wo, col);

        const auto dout = as_mat(std::as_const(dact), co, ho * wo);
        Tensor& dw = grad_of(grads, conv_name(l, "w"));
        Tensor& db = grad_of(grads, conv_name(l, "b"));
        MatMap(dw.data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(c * k * k)).noalias() +=
            dout * as_mat(std::as_const(col), c * k * k, ho * wo).transpose();
        as_vec(db) += dout.rowwise().sum();

        if (l == 0) break;
        const Tensor& wt = params.at(conv_name(l, "w"));
        dcol.resize(c * k * k * ho * wo);
        as_mat(dcol, c * k * k, ho * wo).noalias() =
            ConstMatMap(wt.data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(c * k * k)).transpose() *
            dout;
        col2im(dcol, c, h, w, k, s, ho, wo, dact);
    }
}

// -------------------------------------------------------------------- text

std::vector<double> position_encoding(std::size_t pos, std::size_t dim) {
    std::vector<double> pe(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
        const double angle = static_cast<double>(pos) * rate;
        pe[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return pe;
}

std::vector<double> encode_text(const ModelParams& params, const ModelConfig& cfg, const TokenSequence& tokens,
                                TextTrace* trace) {
    require(!tokens.tokens.empty(), "encode_text: empty token sequence");
    const std::size_t T = tokens.tokens.size(), D = cfg.embed_dim, F = cfg.ffn_dim, H = cfg.n_heads, dh = D / H;
    const Tensor& embed = params.at("txt.embed");

    std::vector<double> x(T * D);
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t id = tokens.tokens[t];
        require(id < cfg.vocab_size, "encode_text: token index " + std::to_string(id) + " outside vocabulary");
        std::copy_n(embed.data.begin() + static_cast<long>(id * D), D, x.begin() + static_cast<long>(t * D));
        if (cfg.position_encoding) {
            const auto pe = position_encoding(t, D);
            for (std::size_t i = 0; i < D; ++i) x[t * D + i] += pe[i];
        }
    }
    if (trace) {
        *trace = {};
        trace->tokens = tokens.tokens;
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg.n_attention_layers; ++l) {
        AttentionTrace at;
        at.input = x;
        const auto X = as_mat(std::as_const(x), T, D);
        auto lin = [&](const char* wn, const char* bn) {
            std::vector<double> y(T * D);
            auto Y = as_mat(y, T, D);
            Y.noalias() = X * as_mat(params.at(layer_name(l, wn))).transpose();
            if (bn) Y.rowwise() += as_vec(params.at(layer_name(l, bn))).transpose();
            return y;
        };
        at.q = lin("wq", "bq");
        at.k = lin("wk", nullptr);
        at.v = lin("wv", "bv");

        at.probs.assign(H * T * T, 0.0);
        at.context.assign(T * D, 0.0);
        for (std::size_t hd = 0; hd < H; ++hd) {
            for (std::size_t i = 0; i < T; ++i) {
                double* p = at.probs.data() + (hd * T + i) * T;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < T; ++j) {
                    double sdot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) sdot += at.q[i * D + hd * dh + e] * at.k[j * D + hd * dh + e];
                    p[j] = sdot * scale;
                    mx = std::max(mx, p[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < T; ++j) sum += (p[j] = std::exp(p[j] - mx));
                for (std::size_t j = 0; j < T; ++j) p[j] /= sum;
                for (std::size_t j = 0; j < T; ++j)
                    for (std::size_t e = 0; e < dh; ++e) at.context[i * D + hd * dh + e] += p[j] * at.v[j * D + hd * dh + e];
            }
        }

        at.mid = x;
        auto M = as_mat(at.mid, T, D);
        M.noalias() += as_mat(std::as_const(at.context), T, D) * as_mat(params.at(layer_name(l, "wo"))).transpose();
        M.rowwise() += as_vec(params.at(layer_name(l, "bo"))).transpose();

        at.ffn_hidden.assign(T * F, 0.0);
        auto Fh = as_mat(at.ffn_hidden, T, F);
        Fh.noalias() = as_mat(std::as_const(at.mid), T, D) * as_mat(params.at(layer_name(l, "ffn1.w"))).transpose();
        Fh.rowwise() += as_vec(params.at(layer_name(l, "ffn1.b"))).transpose();
        relu_inplace(at.ffn_hidden);

        x = at.mid;
        auto Xo = as_mat(x, T, D);
        Xo.noalias() += as_mat(std::as_const(at.ffn_hidden), T, F) * as_mat(params.at(layer_name(l, "ffn2.w"))).transpose();
        Xo.rowwise() += as_vec(params.at(layer_name(l, "ffn2.b"))).transpose();

        if (trace) trace->layers.push_back(std::move(at));
    }

    std::vector<double> pooled(D);
    std::vector<std::size_t> argmax(D, 0);
    for (std::size_t i = 0; i < D; ++i) {
        pooled[i] = x[i];
        for (std::size_t t = 1; t < T; ++t)
            if (x[t * D + i] > pooled[i]) {
                pooled[i] = x[t * D + i];
                argmax[i] = t;
            }
    }
    if (trace) {
        trace->output = std::move(x);
        trace->argmax = std::move(argmax);
    }
    return pooled;
}

void backward_text(const ModelParams& params, const ModelConfig& cfg, const TextTrace& trace,
                   std::span<const double> grad_h, TensorMap& grads) {
    require(grad_h.size() == cfg.embed_dim, "backward_text: gradient width mismatch");
    require(trace.layers.size() == cfg.n_attention_layers, "backward_text: trace does not match config");
    const std::size_t T = trace.tokens.size(), D = cfg.embed_dim, F = cfg.ffn_dim, H = cfg.n_heads, dh = D / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> dx(T * D, 0.0);
    for (std::size_t i = 0; i < D; ++i) dx[trace.argmax[i] * D + i] = grad_h[i];

    for (std::size_t l = cfg.n_attention_layers; l-- > 0;) {
        const AttentionTrace& at = trace.layers[l];
        const auto dX = as_mat(std::as_const(dx), T, D);

        // FFN residual branch.
        std::vector<double> dmid = dx;
        auto dM = as_mat(dmid, T, D);
        as_mat(grad_of(grads, layer_name(l, "ffn2.w"))).noalias() += dX.transpose() * as_mat(at.ffn_hidden, T, F);
        as_vec(grad_of(grads, layer_name(l, "ffn2.b"))) += dX.colwise().sum().transpose();
        std::vector<double> dhid(T * F);
        auto dHid = as_mat(dhid, T, F);
        dHid.noalias() = dX * as_mat(params.at(layer_name(l, "ffn2.w")));
        for (std::size_t i = 0; i < dhid.size(); ++i)
            if (at.ffn_hidden[i] <= 0.0) dhid[i] = 0.0;
        as_mat(grad_of(grads, layer_name(l, "ffn1.w"))).noalias() += dHid.transpose() * as_mat(at.mid, T, D);
        as_vec(grad_of(grads, layer_name(l, "ffn1.b"))) += dHid.colwise().sum().transpose();
        dM.noalias() += dHid * as_mat(params.at(layer_name(l, "ffn1.w")));

        // Attention residual branch.
        std::vector<double> din = dmid;
        const auto dMc = as_mat(std::as_const(dmid), T, D);
        as_mat(grad_of(grads, layer_name(l, "wo"))).noalias() += dMc.transpose() * as_mat(at.context, T, D);
        as_vec(grad_of(grads, layer_name(l, "bo"))) += dMc.colwise().sum().transpose();
        std::vector<double> dctx(T * D);
        as_mat(dctx, T, D).noalias() = dMc * as_mat(params.at(layer_name(l, "wo")));

        std::vector<double> dq(T * D, 0.0), dk(T * D, 0.0), dv(T * D, 0.0), dp(T);
        for (std::size_t hd = 0; hd < H; ++hd) {
            for (std::size_t i = 0; i < T; ++i) {
                const double* p = at.probs.data() + (hd * T + i) * T;
                double row = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    double g = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        g += dctx[i * D + hd * dh + e] * at.v[j * D + hd * dh + e];
                        dv[j * D + hd * dh + e] += p[j] * dctx[i * D + hd * dh + e];
                    }
                    dp[j] = g;
                    row += g * p[j];
                }
                for (std::size_t j = 0; j < T; ++j) {
                    const double ds = p[j] * (dp[j] - row) * scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dq[i * D + hd * dh + e] += ds * at.k[j * D + hd * dh + e];
                        dk[j * D + hd * dh + e] += ds * at.q[i * D + hd * dh + e];
                    }
                }
            }
        }

        auto dIn = as_mat(din, T, D);
        const auto Xin = as_mat(at.input, T, D);
        const std::pair<const char*, const char*> names[] = {{"wq", "bq"}, {"wk", nullptr}, {"wv", "bv"}};
        const std::vector<double>* dys[] = {&dq, &dk, &dv};
        for (int m = 0; m < 3; ++m) {
            const auto dY = as_mat(*dys[m], T, D);
            as_mat(grad_of(grads, layer_name(l, names[m].first))).noalias() += dY.transpose() * Xin;
            if (names[m].second)
                as_vec(grad_of(grads, layer_name(l, names[m].second))) += dY.colwise().sum().transpose();
            dIn.noalias() += dY * as_mat(params.at(layer_name(l, names[m].first)));
        }
        dx = std::move(din);
    }

    Tensor& de = grad_of(grads, "txt.embed");
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t id = trace.tokens[t];
        for (std::size_t i = 0; i < D; ++i) de.data[id * D + i] += dx[t * D + i];
    }
}

// -------------------------------------------------------------- projection

std::vector<double> affine_forward(const Tensor& w, const Tensor& b, std::span<const double> x) {
    require(w.cols() == x.size(), "dense layer: input width " + std::to_string(x.size()) + " != " + std::to_string(w.cols()));
    std::vector<double> y(w.rows());
    as_vec(y).noalias() = as_mat(w) * as_vec(x);
    as_vec(y) += as_vec(b);
    return y;
}

std::vector<double> affine_backward(const Tensor& w, std::span<const double> x, std::span<const double> dy, Tensor& dw,
                                    Tensor& db) {
    as_mat(dw).noalias() += as_vec(dy) * as_vec(x).transpose();
    as_vec(db) += as_vec(dy);
    std::vector<double> dx(w.cols());
    as_vec(dx).noalias() = as_mat(w).transpose() * as_vec(dy);
    return dx;
}

std::vector<double> project(const ModelParams& params, const ModelConfig& cfg, std::span<const double> h,
                            Modality modality, ProjectionTrace* trace) {
    const std::size_t expected = modality == Modality::image ? cfg.image_width() : cfg.text_width();
    require(h.size() == expected, "project: input width " + std::to_string(h.size()) + " != encoder width " +
                                      std::to_string(expected));
    const std::string pre = proj_prefix(modality);
    if (trace) trace->input.assign(h.begin(), h.end());
    if (cfg.projection_mode == ProjectionMode::linear) return affine_forward(params.at(pre + "w"), params.at(pre + "b"), h);

    auto hidden = affine_forward(params.at(pre + "w1"), params.at(pre + "b1"), h);
    relu_inplace(hidden);
    auto z = affine_forward(params.at(pre + "w2"), params.at(pre + "b2"), hidden);
    if (trace) trace->hidden = std::move(hidden);
    return z;
}

std::vector<double> backward_project(const ModelParams& params, const ModelConfig& cfg, const ProjectionTrace& trace,
                                     std::span<const double> grad_z, Modality modality, TensorMap& grads) {
    const std::string pre = proj_prefix(modality);
    if (cfg.projection_mode == ProjectionMode::linear)
        return affine_backward(params.at(pre + "w"), trace.input, grad_z, grad_of(grads, pre + "w"), grad_of(grads, pre + "b"));

    auto dhidden = affine_backward(params.at(pre + "w2"), trace.hidden, grad_z, grad_of(grads, pre + "w2"),
                                   grad_of(grads, pre + "b2"));
    for (std::size_t i = 0; i < dhidden.size(); ++i)
        if (trace.hidden[i] <= 0.0) dhidden[i] = 0.0;
    return affine_backward(params.at(pre + "w1"), trace.input, dhidden, grad_of(grads, pre + "w1"),
                           grad_of(grads, pre + "b1"));
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'C', 'V', 'R', 'T', 'C', 'K', 'P', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        sum_.update(p, n);
    }
    template <class T> void pod(T v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::uint64_t checksum() const { return sum_.h; }

private:
    std::ostream& out_;
    Fnv1a sum_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}
    void bytes(void* p, std::size_t n, const std::string& what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n)) throw FormatError("checkpoint truncated while reading " + what);
        sum_.update(p, n);
    }
    template <class T> T pod(const std::string& what) {
        T v{};
        bytes(&v, sizeof v, what);
        return v;
    }
    std::string str(const std::string& what, std::size_t limit = 1u << 20) {
        const auto n = pod<std::uint32_t>(what);
        if (n > limit) throw FormatError("checkpoint: implausible string length in " + what);
        std::string s(n, '\0');
        bytes(s.data(), n, what);
        return s;
    }
    std::uint64_t checksum() const { return sum_.h; }

private:
    std::istream& in_;
    Fnv1a sum_;
};

std::string model_config_text(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "image_channels=";
    for (std::size_t i = 0; i < cfg.image_channels.size(); ++i) os << (i ? "," : "") << cfg.image_channels[i];
    os << "\nconv_kernel=" << cfg.conv_kernel << "\nconv_stride=" << cfg.conv_stride << "\nimage_size=" << cfg.image_size
       << "\nvocab_size=" << cfg.vocab_size << "\nembed_dim=" << cfg.embed_dim
       << "\nn_attention_layers=" << cfg.n_attention_layers << "\nn_heads=" << cfg.n_heads << "\nffn_dim=" << cfg.ffn_dim
       << "\nposition_encoding=" << (cfg.position_encoding ? 1 : 0) << "\nprojection_hidden=" << cfg.projection_hidden
       << "\nprojection_dim=" << cfg.projection_dim << "\nprojection_mode=" << to_string(cfg.projection_mode)
       << "\nbinary_width=" << cfg.binary_width << "\nbinary_hidden=" << cfg.binary_hidden << "\n";
    return os.str();
}

ModelConfig parse_model_config_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    auto num = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };
    try {
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            if (key == "image_channels") {
                cfg.image_channels.clear();
                std::istringstream vs(val);
                std::string item;
                while (std::getline(vs, item, ',')) cfg.image_channels.push_back(num(item));
            } else if (key == "conv_kernel") cfg.conv_kernel = num(val);
            else if (key == "conv_stride") cfg.conv_stride = num(val);
            else if (key == "image_size") cfg.image_size = num(val);
            else if (key == "vocab_size") cfg.vocab_size = num(val);
            else if (key == "embed_dim") cfg.embed_dim = num(val);
            else if (key == "n_attention_layers") cfg.n_attention_layers = num(val);
            else if (key == "n_heads") cfg.n_heads = num(val);
            else if (key == "ffn_dim") cfg.ffn_dim = num(val);
            else if (key == "position_encoding") cfg.position_encoding = num(val) != 0;
            else if (key == "projection_hidden") cfg.projection_hidden = num(val);
            else if (key == "projection_dim") cfg.projection_dim = num(val);
            else if (key == "projection_mode") cfg.projection_mode = projection_mode_from_string(val);
            else if (key == "binary_width") cfg.binary_width = num(val);
            else if (key == "binary_hidden") cfg.binary_hidden = num(val);
            else throw FormatError("checkpoint: unknown model config key '" + key + "'");
        }
        cfg.validate();
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
    }
    return cfg;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg, const std::filesystem::path& path) {
    std::ostringstream buf(std::ios::binary);
    Writer w(buf);
    w.bytes(kMagic, sizeof kMagic);
    w.str(model_config_text(cfg));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& [name, t] : params.tensors) {
        w.str(name);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.pod<std::uint64_t>(d);
        w.bytes(t.data.data(), t.data.size() * sizeof(double));
        Fnv1a payload;
        payload.update(t.data.data(), t.data.size() * sizeof(double));
        w.pod<std::uint64_t>(payload.h);
    }
    w.pod<std::uint64_t>(w.checksum());

    // Write to a temporary then rename, so readers never see a half-written file.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + path.string());
        const std::string bytes = buf.str();
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    Reader r(in);
    char magic[8];
    r.bytes(magic, sizeof magic, "header");
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("checkpoint: bad magic header in " + path.string());

    Checkpoint ck;
    ck.config = parse_model_config_text(r.str("model config"));
    const auto n = r.pod<std::uint32_t>("tensor count");
    TensorMap tensors;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = r.str("tensor name #" + std::to_string(i), 4096);
        const auto ndim = r.pod<std::uint32_t>("tensor " + name);
        if (ndim == 0 || ndim > 4) throw FormatError("checkpoint: bad rank for tensor " + name);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>("tensor " + name));
        const std::size_t count = Tensor::count(shape);
        if (count > (std::size_t{1} << 28)) throw FormatError("checkpoint: implausible size for tensor " + name);
        Tensor t(shape);
        r.bytes(t.data.data(), count * sizeof(double), "tensor " + name);
        Fnv1a payload;
        payload.update(t.data.data(), count * sizeof(double));
        if (r.pod<std::uint64_t>("tensor " + name) != payload.h)
            throw FormatError("checkpoint: payload checksum mismatch in tensor " + name);
        tensors.emplace(name, std::move(t));
    }
    const std::uint64_t expected = r.checksum();
    const auto stored = r.pod<std::uint64_t>("checksum");
    if (stored != expected) throw FormatError("checkpoint: checksum mismatch in " + path.string());
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes in " + path.string());

    // Shape check against the stored config.
    const ModelParams reference = init_params(ck.config, 0);
    for (const auto& [name, t] : reference.tensors) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint: missing tensor " + name);
        if (it->second.shape != t.shape) throw FormatError("checkpoint: shape mismatch for tensor " + name);
    }
    if (tensors.size() != reference.tensors.size()) throw FormatError("checkpoint: unexpected extra tensors");
    ck.params.tensors = std::move(tensors);
    return ck;
}

}  // namespace convirt
