// SPDX-License-Identifier: Apache-2.0
#include "ccm/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <png.h>

#include "ccm/error.hpp"

namespace ccm {

namespace {

unsigned char quantize(double v) {
    double s = std::round(v * 255.0);
    return static_cast<unsigned char>(s < 0.0 ? 0.0 : (s > 255.0 ? 255.0 : s));
}

struct Taps {
    int x0, x1, y0, y1;
    double w00, w01, w10, w11;
};

Taps taps_at(int H, int W, double x, double y) {
    double u = x - 0.5, v = y - 0.5;
    double xf = std::floor(u), yf = std::floor(v);
    double fx = u - xf, fy = v - yf;
    auto cl = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
    Taps t;
    t.x0 = cl(static_cast<int>(xf), W);
    t.x1 = cl(static_cast<int>(xf) + 1, W);
    t.y0 = cl(static_cast<int>(yf), H);
    t.y1 = cl(static_cast<int>(yf) + 1, H);
    t.w00 = (1 - fy) * (1 - fx);
    t.w01 = (1 - fy) * fx;
    t.w10 = fy * (1 - fx);
    t.w11 = fy * fx;
    return t;
}

double sample_plane(const double* p, int H, int W, const Taps& t) {
    (void)H;
    return t.w00 * p[static_cast<std::int64_t>(t.y0) * W + t.x0] + t.w01 * p[static_cast<std::int64_t>(t.y0) * W + t.x1] +
           t.w10 * p[static_cast<std::int64_t>(t.y1) * W + t.x0] + t.w11 * p[static_cast<std::int64_t>(t.y1) * W + t.x1];
}

void check_image(const Tensor& img, const char* what) {
    if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw ShapeError(std::string(what) + ": expected [1|3,H,W] image, got " + img.shape_str());
}

} // namespace

Tensor read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG: " + path + " (" + image.message + ")");
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr))
        throw IoError("failed decoding PNG: " + path + " (" + image.message + ")");
    int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
    Tensor out({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) = buffer[(static_cast<size_t>(y) * w + x) * 3 + static_cast<size_t>(c)] / 255.0;
    return out;
}

Tensor read_png_gray(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG: " + path + " (" + image.message + ")");
    image.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr))
        throw IoError("failed decoding PNG: " + path + " (" + image.message + ")");
    int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
    Tensor out({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(0, y, x) = buffer[static_cast<size_t>(y) * w + x] / 255.0;
    return out;
}

void write_png(const std::string& path, const Tensor& img01) {
    check_image(img01, "write_png");
    int c = img01.dim(0), h = img01.dim(1), w = img01.dim(2);
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<png_byte> buffer(static_cast<size_t>(h) * w * c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                buffer[(static_cast<size_t>(y) * w + x) * c + static_cast<size_t>(ch)] = quantize(img01.at(ch, y, x));
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
        throw IoError("cannot write PNG: " + path + " (" + image.message + ")");
}

Tensor to_model_range(const Tensor& img01) {
    Tensor out(img01.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = img01[i] * 2.0 - 1.0;
    return out;
}

Tensor from_model_range(const Tensor& img_pm1) {
    Tensor out(img_pm1.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = std::min(1.0, std::max(0.0, (img_pm1[i] + 1.0) * 0.5));
    return out;
}

Tensor crop_resize(const Tensor& img, double wx0, double wy0, double wx1, double wy1, int oh, int ow) {
    check_image(img, "crop_resize");
    if (!(wx0 < wx1) || !(wy0 < wy1))
        throw GeometryError("crop_resize: empty window");
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    double sx = (wx1 - wx0) / ow, sy = (wy1 - wy0) / oh;
    Tensor out({C, oh, ow});
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            Taps t = taps_at(H, W, wx0 + (j + 0.5) * sx, wy0 + (i + 0.5) * sy);
            for (int c = 0; c < C; ++c)
                out.at(c, i, j) = sample_plane(img.data() + static_cast<std::int64_t>(c) * H * W, H, W, t);
        }
    return out;
}

Tensor resize_bilinear(const Tensor& img, int oh, int ow) {
    check_image(img, "resize_bilinear");
    return crop_resize(img, 0.0, 0.0, img.dim(2), img.dim(1), oh, ow);
}

Tensor resize_nearest(const Tensor& img, int oh, int ow) {
    check_image(img, "resize_nearest");
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out({C, oh, ow});
    for (int i = 0; i < oh; ++i) {
        int sy = std::min(H - 1, static_cast<int>((i + 0.5) * H / oh));
        for (int j = 0; j < ow; ++j) {
            int sx = std::min(W - 1, static_cast<int>((j + 0.5) * W / ow));
            for (int c = 0; c < C; ++c)
                out.at(c, i, j) = img.at(c, sy, sx);
        }
    }
    return out;
}

Tensor rasterize_box_mask(int h, int w, const BoundingBox& box) {
    Tensor m({1, h, w});
    for (int y = 0; y < h; ++y) {
        double cy = (y + 0.5) / h;
        for (int x = 0; x < w; ++x) {
            double cx = (x + 0.5) / w;
            m.at(0, y, x) = (cx >= box.x0 && cx < box.x1 && cy >= box.y0 && cy < box.y1) ? 1.0 : 0.0;
        }
    }
    return m;
}

ColorJitterParams sample_color_jitter(Rng& rng) {
    ColorJitterParams p;
    p.brightness = rng.uniform(0.8, 1.2);
    p.saturation = rng.uniform(0.8, 1.2);
    p.contrast = rng.uniform(0.8, 1.2);
    p.hue = rng.uniform(-0.05, 0.05);
    for (int i = 3; i > 0; --i)
        std::swap(p.order[static_cast<size_t>(i)], p.order[static_cast<size_t>(rng.uniform_int(i + 1))]);
    return p;
}

namespace {

void clamp01(Tensor& img) {
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[i] = std::min(1.0, std::max(0.0, img[i]));
}

double luma(double r, double g, double b) {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double d = mx - mn;
    s = mx == 0.0 ? 0.0 : d / mx;
    if (d == 0.0) {
        h = 0.0;
    } else if (mx == r) {
        h = (g - b) / d + (g < b ? 6.0 : 0.0);
    } else if (mx == g) {
        h = (b - r) / d + 2.0;
    } else {
        h = (r - g) / d + 4.0;
    }
    h /= 6.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1.0 - s);
    double q = v * (1.0 - f * s);
    double t = v * (1.0 - (1.0 - f) * s);
    switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
    }
}

} // namespace

Tensor apply_color_jitter(const Tensor& img01, const ColorJitterParams& params) {
    check_image(img01, "apply_color_jitter");
    Tensor img = img01;
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int step : params.order) {
        switch (step) {
        case 0: { // brightness
            if (params.brightness == 1.0)
                break;
            for (std::int64_t i = 0; i < img.numel(); ++i)
                img[i] *= params.brightness;
            clamp01(img);
            break;
        }
        case 1: { // saturation: blend toward per-pixel gray
            if (params.saturation == 1.0 || C == 1)
                break;
            double f = params.saturation;
            for (std::int64_t i = 0; i < plane; ++i) {
                double r = img[i], g = img[plane + i], b = img[2 * plane + i];
                double gray = luma(r, g, b);
                img[i] = f * r + (1 - f) * gray;
                img[plane + i] = f * g + (1 - f) * gray;
                img[2 * plane + i] = f * b + (1 - f) * gray;
            }
            clamp01(img);
            break;
        }
        case 2: { // contrast: blend toward mean gray level
            if (params.contrast == 1.0)
                break;
            double mean = 0.0;
            if (C == 3) {
                for (std::int64_t i = 0; i < plane; ++i)
                    mean += luma(img[i], img[plane + i], img[2 * plane + i]);
            } else {
                for (std::int64_t i = 0; i < plane; ++i)
                    mean += img[i];
            }
            mean /= static_cast<double>(plane);
            double f = params.contrast;
            for (std::int64_t i = 0; i < img.numel(); ++i)
                img[i] = f * img[i] + (1 - f) * mean;
            clamp01(img);
            break;
        }
        case 3: { // hue rotation in HSV
            if (params.hue == 0.0 || C == 1)
                break;
            for (std::int64_t i = 0; i < plane; ++i) {
                double h, s, v;
                rgb_to_hsv(img[i], img[plane + i], img[2 * plane + i], h, s, v);
                h += params.hue;
                h -= std::floor(h);
                hsv_to_rgb(h, s, v, img[i], img[plane + i], img[2 * plane + i]);
            }
            clamp01(img);
            break;
        }
        default:
            throw ValidationError("bad color jitter op index");
        }
    }
    return img;
}

Tensor color_jitter(const Tensor& img01, Rng& rng) {
    return apply_color_jitter(img01, sample_color_jitter(rng));
}

Tensor gaussian_blur(const Tensor& img, double sigma, int ksize) {
    check_image(img, "gaussian_blur");
    if (ksize % 2 != 1 || ksize < 1)
        throw ConfigError("gaussian_blur: kernel size must be odd");
    if (sigma <= 0.0)
        throw ConfigError("gaussian_blur: sigma must be positive");
    int r = ksize / 2;
    std::vector<double> k(static_cast<size_t>(ksize));
    double z = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        z += k[static_cast<size_t>(i + r)];
    }
    for (auto& v : k)
        v /= z;
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor tmp(img.shape()), out(img.shape());
    auto cl = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<size_t>(i + r)] * img.at(c, y, cl(x + i, W));
                tmp.at(c, y, x) = acc;
            }
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[static_cast<size_t>(i + r)] * tmp.at(c, cl(y + i, H), x);
                out.at(c, y, x) = acc;
            }
    return out;
}

void Homography::apply(double x, double y, double& ox, double& oy) const {
    double w = m[6] * x + m[7] * y + m[8];
    if (w == 0.0)
        throw GeometryError("homography maps point to infinity");
    ox = (m[0] * x + m[1] * y + m[2]) / w;
    oy = (m[3] * x + m[4] * y + m[5]) / w;
}

Homography Homography::inverse() const {
    const auto& a = m;
    std::array<double, 9> c;
    c[0] = a[4] * a[8] - a[5] * a[7];
    c[1] = a[2] * a[7] - a[1] * a[8];
    c[2] = a[1] * a[5] - a[2] * a[4];
    c[3] = a[5] * a[6] - a[3] * a[8];
    c[4] = a[0] * a[8] - a[2] * a[6];
    c[5] = a[2] * a[3] - a[0] * a[5];
    c[6] = a[3] * a[7] - a[4] * a[6];
    c[7] = a[1] * a[6] - a[0] * a[7];
    c[8] = a[0] * a[4] - a[1] * a[3];
    double det = a[0] * c[0] + a[1] * c[3] + a[2] * c[6];
    if (det == 0.0)
        throw GeometryError("homography is singular");
    Homography h;
    for (int i = 0; i < 9; ++i)
        h.m[static_cast<size_t>(i)] = c[static_cast<size_t>(i)] / det;
    return h;
}

Homography Homography::compose(const Homography& a, const Homography& b) {
    Homography r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int t = 0; t < 3; ++t)
                acc += a.m[static_cast<size_t>(i * 3 + t)] * b.m[static_cast<size_t>(t * 3 + j)];
            r.m[static_cast<size_t>(i * 3 + j)] = acc;
        }
    return r;
}

Homography Homography::rotation(double radians, double cx, double cy) {
    double c = std::cos(radians), s = std::sin(radians);
    Homography h;
    h.m = {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy, 0, 0, 1};
    return h;
}

Homography Homography::hflip(double cx) {
    Homography h;
    h.m = {-1, 0, 2 * cx, 0, 1, 0, 0, 0, 1};
    return h;
}

bool Homography::is_identity() const {
    static const std::array<double, 9> id = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return m == id;
}

Homography Homography::from_corners(const std::array<std::array<double, 2>, 4>& src,
                                    const std::array<std::array<double, 2>, 4>& dst) {
    // 8x8 system for the first 8 entries; m[8] = 1.
    double A[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = src[static_cast<size_t>(i)][0], y = src[static_cast<size_t>(i)][1];
        double u = dst[static_cast<size_t>(i)][0], v = dst[static_cast<size_t>(i)][1];
        double* r0 = A[2 * i];
        double* r1 = A[2 * i + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    // Gaussian elimination with partial pivoting.
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::fabs(A[r][col]) > std::fabs(A[piv][col]))
                piv = r;
        if (std::fabs(A[piv][col]) < 1e-12)
            throw GeometryError("degenerate corner correspondence");
        if (piv != col)
            for (int c = 0; c < 9; ++c)
                std::swap(A[piv][c], A[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col)
                continue;
            double f = A[r][col] / A[col][col];
            if (f == 0.0)
                continue;
            for (int c = col; c < 9; ++c)
                A[r][c] -= f * A[col][c];
        }
    }
    Homography h;
    for (int i = 0; i < 8; ++i)
        h.m[static_cast<size_t>(i)] = A[i][8] / A[i][i];
    h.m[8] = 1.0;
    return h;
}

WarpResult warp_layer_over(const Tensor& layer, const Tensor& mask01, const Homography& h, const Tensor& background) {
    check_image(layer, "warp_layer_over");
    if (mask01.rank() != 3 || mask01.dim(0) != 1 || mask01.dim(1) != layer.dim(1) || mask01.dim(2) != layer.dim(2))
        throw ShapeError("warp_layer_over: mask must be [1,H,W] matching layer");
    if (!background.same_shape(layer))
        throw ShapeError("warp_layer_over: background shape mismatch");
    int C = layer.dim(0), H = layer.dim(1), W = layer.dim(2);
    Homography inv = h.inverse();
    bool identity = h.is_identity();
    WarpResult res;
    res.image = background;
    res.mask = Tensor::zeros({1, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double sxf, syf;
            if (identity) {
                sxf = x + 0.5;
                syf = y + 0.5;
            } else {
                inv.apply(x + 0.5, y + 0.5, sxf, syf);
            }
            if (sxf < -1.0 || sxf > W + 1.0 || syf < -1.0 || syf > H + 1.0)
                continue;
            Taps t = taps_at(H, W, sxf, syf);
            double alpha = sample_plane(mask01.data(), H, W, t);
            if (alpha <= 0.0)
                continue;
            res.mask.at(0, y, x) = 1.0;
            for (int c = 0; c < C; ++c) {
                double lv = sample_plane(layer.data() + static_cast<std::int64_t>(c) * H * W, H, W, t);
                if (alpha >= 1.0)
                    res.image.at(c, y, x) = lv;
                else
                    res.image.at(c, y, x) = background.at(c, y, x) + alpha * (lv - background.at(c, y, x));
            }
        }
    for (std::int64_t i = 0; i < res.mask.numel(); ++i)
        res.mask_pixels += res.mask[i] > 0.5 ? 1 : 0;
    return res;
}

PixelBox mask_tight_box(const Tensor& mask) {
    if (mask.rank() != 3 || mask.dim(0) != 1)
        throw ShapeError("mask_tight_box expects [1,H,W]");
    int H = mask.dim(1), W = mask.dim(2);
    PixelBox b{W, H, 0, 0};
    bool any = false;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (mask.at(0, y, x) > 0.5) {
                any = true;
                b.x0 = std::min(b.x0, x);
                b.y0 = std::min(b.y0, y);
                b.x1 = std::max(b.x1, x + 1);
                b.y1 = std::max(b.y1, y + 1);
            }
    if (!any)
        throw GeometryError("mask is empty");
    return b;
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("cosine_similarity: shape mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace ccm
