#pragma once

#include "convirt/common.hpp"
#include "convirt/data.hpp"

namespace convirt {

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double v) const { return v >= lo && v <= hi; }
    bool operator==(const Interval&) const = default;
};

/// Parameter ranges of the stochastic image transformation family.
struct AugmentConfig {
    Interval crop_area_ratio{0.6, 1.0};
    double hflip_prob = 0.5;
    Interval affine_degrees{-20.0, 20.0};
    double max_translate_frac = 0.1;
    Interval affine_scale{0.95, 1.05};
    Interval brightness{0.6, 1.4};
    Interval contrast{0.6, 1.4};
    Interval blur_sigma{0.1, 3.0};
    std::size_t output_size = 224;

    void validate() const;
    bool operator==(const AugmentConfig&) const = default;
};

/// One concrete draw from the transformation family.
struct TransformInstance {
    double crop_area_ratio = 1.0;
    // Position of the crop window as a fraction of the free space on each axis.
    double crop_x_frac = 0.0;
    double crop_y_frac = 0.0;
    bool hflip = false;
    double rotation_degrees = 0.0;
    double translate_x_frac = 0.0;
    double translate_y_frac = 0.0;
    double scale = 1.0;
    double brightness = 1.0;
    double contrast = 1.0;
    // <= 0 disables the blur stage.
    double blur_sigma = 0.0;

    static TransformInstance identity() { return {}; }
    bool within(const AugmentConfig& cfg) const;
    bool operator==(const TransformInstance&) const = default;
};

TransformInstance sample_transform(const AugmentConfig& cfg, Rng& rng);

/// crop -> flip -> affine -> brightness/contrast -> blur, output clamped to [0,1].
ImageTensor apply_transform(const ImageTensor& image, const TransformInstance& t, std::size_t output_size);

ImageTensor gaussian_blur(const ImageTensor& image, double sigma);

/// Normalized 1-D kernel with radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

ImageTensor adjust_brightness_contrast(const ImageTensor& image, double brightness, double contrast);

ImageTensor hflip(const ImageTensor& image);

}  // namespace convirt
