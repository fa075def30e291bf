#include "convirt/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace convirt {

void AugmentConfig::validate() const {
    for (const Interval* iv : {&crop_area_ratio, &affine_degrees, &affine_scale, &brightness, &contrast, &blur_sigma})
        require(iv->lo <= iv->hi, "augment: interval bounds out of order");
    require(crop_area_ratio.lo > 0.0 && crop_area_ratio.hi <= 1.0, "augment: crop_area_ratio must lie in (0,1]");
    require(hflip_prob >= 0.0 && hflip_prob <= 1.0, "augment: hflip_prob must lie in [0,1]");
    require(max_translate_frac >= 0.0 && max_translate_frac < 1.0, "augment: max_translate_frac must lie in [0,1)");
    require(affine_scale.lo > 0.0, "augment: affine_scale must be positive");
    require(brightness.lo > 0.0 && contrast.lo > 0.0, "augment: brightness/contrast factors must be positive");
    require(blur_sigma.lo >= 0.0, "augment: blur_sigma must be non-negative");
    require(output_size >= 8, "augment: output_size must be >= 8");
}

bool TransformInstance::within(const AugmentConfig& cfg) const {
    const auto frac_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
    return cfg.crop_area_ratio.contains(crop_area_ratio) && frac_ok(crop_x_frac) && frac_ok(crop_y_frac) &&
           cfg.affine_degrees.contains(rotation_degrees) && std::abs(translate_x_frac) <= cfg.max_translate_frac &&
           std::abs(translate_y_frac) <= cfg.max_translate_frac && cfg.affine_scale.contains(scale) &&
           cfg.brightness.contains(brightness) && cfg.contrast.contains(contrast) && cfg.blur_sigma.contains(blur_sigma);
}

TransformInstance sample_transform(const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    TransformInstance t;
    t.crop_area_ratio = uniform(rng, cfg.crop_area_ratio.lo, cfg.crop_area_ratio.hi);
    t.crop_x_frac = uniform(rng, 0.0, 1.0);
    t.crop_y_frac = uniform(rng, 0.0, 1.0);
    t.hflip = uniform(rng, 0.0, 1.0) < cfg.hflip_prob;
    t.rotation_degrees = uniform(rng, cfg.affine_degrees.lo, cfg.affine_degrees.hi);
    t.translate_x_frac = uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac);
    t.translate_y_frac = uniform(rng, -cfg.max_translate_frac, cfg.max_translate_frac);
    t.scale = uniform(rng, cfg.affine_scale.lo, cfg.affine_scale.hi);
    t.brightness = uniform(rng, cfg.brightness.lo, cfg.brightness.hi);
    t.contrast = uniform(rng, cfg.contrast.lo, cfg.contrast.hi);
    t.blur_sigma = uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi);
    return t;
}

namespace {

// Bilinear sample at continuous pixel coordinates (pixel centres at integers).
// Coordinates outside [-0.5, size-0.5] return `fill`; inside, neighbours are edge-clamped.
double bilinear(const ImageTensor& img, double y, double x, double fill) {
    const double h = static_cast<double>(img.height), w = static_cast<double>(img.width);
    if (!(y >= -0.5 && y <= h - 0.5 && x >= -0.5 && x <= w - 0.5)) return fill;
    y = std::clamp(y, 0.0, h - 1.0);
    x = std::clamp(x, 0.0, w - 1.0);
    const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    if (fy == 0.0 && fx == 0.0) return img.at(y0, x0);
    const double top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
    const double bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
    return top * (1.0 - fy) + bot * fy;
}

ImageTensor crop_resize(const ImageTensor& img, const TransformInstance& t, std::size_t out) {
    require(t.crop_area_ratio > 0.0 && t.crop_area_ratio <= 1.0, "apply_transform: crop rectangle larger than image");
    require(t.crop_x_frac >= 0.0 && t.crop_x_frac <= 1.0 && t.crop_y_frac >= 0.0 && t.crop_y_frac <= 1.0,
            "apply_transform: crop rectangle outside image");
    const double side = std::sqrt(t.crop_area_ratio);
    const double h = static_cast<double>(img.height), w = static_cast<double>(img.width);
    const double ch = side * h, cw = side * w;
    const double y0 = t.crop_y_frac * (h - ch), x0 = t.crop_x_frac * (w - cw);
    const double sy = ch / static_cast<double>(out), sx = cw / static_cast<double>(out);

    ImageTensor res(out, out);
    for (std::size_t i = 0; i < out; ++i)
        for (std::size_t j = 0; j < out; ++j)
            res.at(i, j) = bilinear(img, y0 + (static_cast<double>(i) + 0.5) * sy - 0.5,
                                    x0 + (static_cast<double>(j) + 0.5) * sx - 0.5, 0.0);
    return res;
}

ImageTensor affine(const ImageTensor& img, const TransformInstance& t) {
    if (t.rotation_degrees == 0.0 && t.translate_x_frac == 0.0 && t.translate_y_frac == 0.0 && t.scale == 1.0)
        return img;
    require(t.scale > 0.0, "apply_transform: affine scale must be positive");
    const double h = static_cast<double>(img.height), w = static_cast<double>(img.width);
    const double cy = (h - 1.0) / 2.0, cx = (w - 1.0) / 2.0;
    const double theta = t.rotation_degrees * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    const double ty = t.translate_y_frac * h, tx = t.translate_x_frac * w;

    // Inverse map: output -> source.
    ImageTensor res(img.height, img.width);
    for (std::size_t i = 0; i < img.height; ++i) {
        for (std::size_t j = 0; j < img.width; ++j) {
            const double oy = static_cast<double>(i) - cy - ty, ox = static_cast<double>(j) - cx - tx;
            const double sx = (c * ox + s * oy) / t.scale + cx;
            const double sy = (-s * ox + c * oy) / t.scale + cy;
            res.at(i, j) = bilinear(img, sy, sx, 0.0);
        }
    }
    return res;
}

// Half-sample symmetric reflection: -1 -> 0, n -> n-1.
std::size_t reflect(long i, long n) {
    const long period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

}  // namespace

ImageTensor hflip(const ImageTensor& image) {
    ImageTensor res(image.height, image.width);
    for (std::size_t i = 0; i < image.height; ++i)
        for (std::size_t j = 0; j < image.width; ++j) res.at(i, j) = image.at(i, image.width - 1 - j);
    return res;
}

std::vector<double> gaussian_kernel(double sigma) {
    require(sigma > 0.0, "gaussian_blur: sigma must be positive");
    const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (long i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

ImageTensor gaussian_blur(const ImageTensor& image, double sigma) {
    require(!image.empty(), "gaussian_blur: empty image");
    const auto k = gaussian_kernel(sigma);
    const auto radius = static_cast<long>(k.size() / 2);
    const auto h = static_cast<long>(image.height), w = static_cast<long>(image.width);

    ImageTensor tmp(image.height, image.width), res(image.height, image.width);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long d = -radius; d <= radius; ++d)
                acc += k[static_cast<std::size_t>(d + radius)] * image.at(static_cast<std::size_t>(y), reflect(x + d, w));
            tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
        }
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long d = -radius; d <= radius; ++d)
                acc += k[static_cast<std::size_t>(d + radius)] * tmp.at(reflect(y + d, h), static_cast<std::size_t>(x));
            res.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = acc;
        }
    return res;
}

ImageTensor adjust_brightness_contrast(const ImageTensor& image, double brightness, double contrast) {
    require(brightness > 0.0 && contrast > 0.0, "adjust_brightness_contrast: factors must be positive");
    ImageTensor res = image;
    if (brightness != 1.0)
        for (double& v : res.pixels) v = std::clamp(brightness * v, 0.0, 1.0);
    if (contrast != 1.0 && !res.empty()) {
        double mean = 0.0;
        for (double v : res.pixels) mean += v;
        mean /= static_cast<double>(res.pixels.size());
        for (double& v : res.pixels) v = std::clamp(mean + contrast * (v - mean), 0.0, 1.0);
    }
    return res;
}

ImageTensor apply_transform(const ImageTensor& image, const TransformInstance& t, std::size_t output_size) {
    require(!image.empty(), "apply_transform: empty image");
    require(output_size >= 1, "apply_transform: output_size must be positive");

    ImageTensor img;
    if (t.crop_area_ratio == 1.0 && image.height == output_size && image.width == output_size)
        img = image;
    else
        img = crop_resize(image, t, output_size);
    if (t.hflip) img = hflip(img);
    img = affine(img, t);
    img = adjust_brightness_contrast(img, t.brightness, t.contrast);
    if (t.blur_sigma > 0.0) img = gaussian_blur(img, t.blur_sigma);
    for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
    return img;
}

}  // namespace convirt
