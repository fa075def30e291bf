#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "convirt/common.hpp"
#include "convirt/data.hpp"

namespace convirt {

enum class ProjectionMode { nonlinear, linear };
enum class Modality { image, text };

std::string to_string(ProjectionMode m);
ProjectionMode projection_mode_from_string(const std::string& s);

struct ModelConfig {
    // Image encoder: one conv -> ReLU block per entry.
    std::vector<std::size_t> image_channels{16, 32, 64, 128};
    std::size_t conv_kernel = 3;
    std::size_t conv_stride = 2;
    std::size_t image_size = 32;

    // Text encoder.
    std::size_t vocab_size = 128;
    std::size_t embed_dim = 64;
    std::size_t n_attention_layers = 1;
    std::size_t n_heads = 4;
    std::size_t ffn_dim = 128;
    bool position_encoding = true;

    // Projection heads g_v, g_u.
    std::size_t projection_hidden = 128;
    std::size_t projection_dim = 64;
    ProjectionMode projection_mode = ProjectionMode::nonlinear;

    // Contrastive-binary baseline head.
    std::size_t binary_width = 64;
    std::size_t binary_hidden = 64;

    void validate() const;
    std::size_t image_width() const { return image_channels.back(); }
    std::size_t text_width() const { return embed_dim; }

    bool operator==(const ModelConfig&) const = default;
};

/// All trainable tensors, keyed by name. Weight matrices are [out, in].
struct ModelParams {
    TensorMap tensors;

    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool operator==(const ModelParams&) const = default;
};

// Tensor name prefixes, used for freeze masks.
inline constexpr const char* kImageEncoderPrefix = "img.";
inline constexpr const char* kTextEncoderPrefix = "txt.";
inline constexpr const char* kBinaryHeadPrefix = "bin.";

bool is_bias(const std::string& name);

/// Glorot-uniform weights, zero biases.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// -------------------------------------------------------------- image encoder

struct ImageTrace {
    // acts[0] is the input; acts[l+1] is the post-ReLU output of block l, [C, H, W].
    std::vector<std::vector<double>> acts;
    std::vector<std::size_t> heights, widths, channels;
};

std::vector<double> encode_image(const ModelParams& params, const ModelConfig& cfg, const ImageTensor& image,
                                 ImageTrace* trace = nullptr);

/// Accumulates parameter gradients given dL/dh_v.
void backward_image(const ModelParams& params, const ModelConfig& cfg, const ImageTrace& trace,
                    std::span<const double> grad_h, TensorMap& grads);

// --------------------------------------------------------------- text encoder

struct AttentionTrace {
    std::vector<double> input;                   // [T, D]
    std::vector<double> q, k, v;                 // [T, D]
    std::vector<double> probs;                   // [heads, T, T]
    std::vector<double> context;                 // [T, D]
    std::vector<double> mid;                     // input + attention output
    std::vector<double> ffn_hidden;              // post-ReLU [T, F]
};

struct TextTrace {
    std::vector<std::size_t> tokens;
    std::vector<AttentionTrace> layers;
    std::vector<double> output;                  // [T, D]
    std::vector<std::size_t> argmax;             // [D]
};

std::vector<double> encode_text(const ModelParams& params, const ModelConfig& cfg, const TokenSequence& tokens,
                                TextTrace* trace = nullptr);

void backward_text(const ModelParams& params, const ModelConfig& cfg, const TextTrace& trace,
                   std::span<const double> grad_h, TensorMap& grads);

/// Sinusoidal position encoding for position `pos`, width `dim`.
std::vector<double> position_encoding(std::size_t pos, std::size_t dim);

// ----------------------------------------------------------------- projection

struct ProjectionTrace {
    std::vector<double> input;
    std::vector<double> hidden;  // post-ReLU, nonlinear mode only
};

std::vector<double> project(const ModelParams& params, const ModelConfig& cfg, std::span<const double> h,
                            Modality modality, ProjectionTrace* trace = nullptr);

/// Accumulates parameter gradients and returns dL/dh.
std::vector<double> backward_project(const ModelParams& params, const ModelConfig& cfg, const ProjectionTrace& trace,
                                     std::span<const double> grad_z, Modality modality, TensorMap& grads);

// ------------------------------------------------------------- dense helpers

/// y = W x + b with W [out, in].
std::vector<double> affine_forward(const Tensor& w, const Tensor& b, std::span<const double> x);

/// Accumulates dW, db; returns dx.
std::vector<double> affine_backward(const Tensor& w, std::span<const double> x, std::span<const double> dy, Tensor& dw,
                                    Tensor& db);

// ----------------------------------------------------------------- checkpoint

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg, const std::filesystem::path& path);

struct Checkpoint {
    ModelParams params;
    ModelConfig config;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace convirt
