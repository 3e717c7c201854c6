// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>

#include "ccm/geometry.hpp"
#include "ccm/rng.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Images are Tensor[C,H,W] with C in {1,3}. The data pipeline works in
// [0,1]; model code works in [-1,1]. PNG files are 8-bit sRGB.

Tensor read_png(const std::string& path);              // [3,H,W] in [0,1]
Tensor read_png_gray(const std::string& path);         // [1,H,W] in [0,1]
void write_png(const std::string& path, const Tensor& img01);

Tensor to_model_range(const Tensor& img01);            // [0,1] -> [-1,1]
Tensor from_model_range(const Tensor& img_pm1);        // [-1,1] -> [0,1], clamped

// Crop a pixel-space window (may be fractional) and resize to (oh, ow)
// with bilinear sampling, border clamp.
Tensor crop_resize(const Tensor& img, double wx0, double wy0, double wx1, double wy1, int oh, int ow);
Tensor resize_bilinear(const Tensor& img, int oh, int ow);
// Nearest-neighbor resampling; preserves {0,1} masks exactly.
Tensor resize_nearest(const Tensor& img, int oh, int ow);

// Binary box mask [1,H,W]: pixel is 1 when its center lies in the box.
Tensor rasterize_box_mask(int h, int w, const BoundingBox& box);

struct ColorJitterParams {
    double brightness = 1.0;
    double saturation = 1.0;
    double contrast = 1.0;
    double hue = 0.0;
    std::array<int, 4> order = {0, 1, 2, 3};
};

// Factors ~ U[0.8,1.2], hue ~ U[-0.05,0.05], order randomized.
ColorJitterParams sample_color_jitter(Rng& rng);
// Applies the four adjustments in `params.order`, clamping to [0,1]
// after each. Factors exactly 1 (hue exactly 0) are skipped, so the
// all-identity parameter set reproduces the input bitwise.
Tensor apply_color_jitter(const Tensor& img01, const ColorJitterParams& params);
Tensor color_jitter(const Tensor& img01, Rng& rng);

// 5x5 Gaussian blur, border replicate.
Tensor gaussian_blur(const Tensor& img, double sigma, int ksize = 5);

// Row-major 3x3 projective transform on pixel coordinates.
struct Homography {
    std::array<double, 9> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    void apply(double x, double y, double& ox, double& oy) const;
    Homography inverse() const;
    static Homography identity() { return {}; }
    static Homography compose(const Homography& a, const Homography& b); // a after b
    static Homography rotation(double radians, double cx, double cy);
    static Homography hflip(double cx);
    // Maps the four src corners onto the four dst corners.
    static Homography from_corners(const std::array<std::array<double, 2>, 4>& src,
                                   const std::array<std::array<double, 2>, 4>& dst);
    bool is_identity() const;
};

// Warps an alpha-masked layer (img, mask01) with H and composites it
// over `background`; output pixels with zero warped alpha are bitwise
// copies of the background, alpha-one pixels bitwise copies of the
// sampled layer. The returned binary mask is the support of the warped
// alpha, so it covers every pixel the layer touched.
struct WarpResult {
    Tensor image;
    Tensor mask;
    std::int64_t mask_pixels = 0;
};
WarpResult warp_layer_over(const Tensor& layer, const Tensor& mask01, const Homography& h, const Tensor& background);

// Tight pixel bounding box of a binary mask; throws GeometryError when empty.
struct PixelBox {
    int x0, y0, x1, y1; // half-open
};
PixelBox mask_tight_box(const Tensor& mask);

double cosine_similarity(const Tensor& a, const Tensor& b);

} // namespace ccm
