// SPDX-License-Identifier: Apache-2.0
#include "ccm/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include <json.hpp>

#include "ccm/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ccm {

void PipelineConfig::validate() const {
    if (source_size < 8 || image_size < 8 || fg_size < 8)
        throw ConfigError("pipeline extents too small");
    if (source_size < fg_size)
        throw ConfigError("source_size must be >= fg_size (background swap crops a full patch)");
    if (!(0.0 < min_area && min_area < max_area && max_area <= 1.0))
        throw ConfigError("invalid box area bounds");
    if (hflip_prob < 0 || hflip_prob > 1 || blur_prob < 0 || blur_prob > 1)
        throw ConfigError("probabilities must lie in [0,1]");
    if (blur_kernel % 2 != 1)
        throw ConfigError("blur kernel must be odd");
}

bool GeometryParams::is_identity() const {
    if (hflip || rotation_deg != 0.0)
        return false;
    for (double d : corner_offsets)
        if (d != 0.0)
            return false;
    return true;
}

namespace {

double clamp01(double v) {
    return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

enum class ShapeKind { ellipse, rectangle, polygon };

struct ShapeSpec {
    ShapeKind kind;
    std::vector<double> poly_x, poly_y; // normalized box coords, convex
};

bool inside_shape(const ShapeSpec& s, double u, double v) {
    switch (s.kind) {
    case ShapeKind::ellipse: {
        double du = (u - 0.5) / 0.46, dv = (v - 0.5) / 0.46;
        return du * du + dv * dv <= 1.0;
    }
    case ShapeKind::rectangle:
        return u >= 0.05 && u <= 0.95 && v >= 0.05 && v <= 0.95;
    case ShapeKind::polygon: {
        size_t n = s.poly_x.size();
        for (size_t i = 0; i < n; ++i) {
            size_t j = (i + 1) % n;
            double cr = (s.poly_x[j] - s.poly_x[i]) * (v - s.poly_y[i]) - (s.poly_y[j] - s.poly_y[i]) * (u - s.poly_x[i]);
            if (cr < 0.0)
                return false;
        }
        return true;
    }
    }
    return false;
}

} // namespace

SourceRecord generate_synthetic_source(Rng& rng, int h, int w, const PipelineConfig& cfg) {
    cfg.validate();
    SourceRecord rec;
    rec.image = Tensor({3, h, w});

    // Background: oriented two-color gradient plus a low-frequency wave.
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = rng.uniform(0.05, 0.95);
        c1[c] = rng.uniform(0.05, 0.95);
    }
    double theta = rng.uniform(0.0, 2.0 * M_PI);
    double dx = std::cos(theta), dy = std::sin(theta);
    double amp = rng.uniform(0.0, 0.08);
    double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5), phase = rng.uniform(0.0, 2.0 * M_PI);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double u = (x + 0.5) / w, v = (y + 0.5) / h;
            double s = clamp01(0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) * 2.0);
            double wave = amp * std::sin(2.0 * M_PI * (fx * u + fy * v) + phase);
            for (int c = 0; c < 3; ++c)
                rec.image.at(c, y, x) = clamp01(c0[c] + s * (c1[c] - c0[c]) + wave);
        }

    // Box with area fraction inside the filter bounds.
    double area = rng.uniform(cfg.min_area, cfg.max_area);
    double bw, bh;
    for (;;) {
        double aspect = rng.uniform(0.6, 1.6);
        bw = std::sqrt(area * aspect);
        bh = std::sqrt(area / aspect);
        if (bw <= 0.95 && bh <= 0.95)
            break;
    }
    double bx0 = rng.uniform(0.0, 1.0 - bw);
    double by0 = rng.uniform(0.0, 1.0 - bh);
    rec.box = {bx0, by0, bx0 + bw, by0 + bh};
    rec.box.validate();

    // One anti-aliased shape inscribed in the box. Degenerate draws
    // (sliver polygons with an empty binary mask) are redrawn; after
    // enough retries an ellipse is forced.
    int px0 = std::max(0, static_cast<int>(std::floor(rec.box.x0 * w)));
    int py0 = std::max(0, static_cast<int>(std::floor(rec.box.y0 * h)));
    int px1 = std::min(w, static_cast<int>(std::ceil(rec.box.x1 * w)));
    int py1 = std::min(h, static_cast<int>(std::ceil(rec.box.y1 * h)));
    const int ss = 4;
    std::int64_t box_px = static_cast<std::int64_t>(px1 - px0) * (py1 - py0);
    Tensor coverage({1, h, w});
    for (int attempt = 0;; ++attempt) {
        ShapeSpec shape;
        int kind = attempt >= 20 ? 0 : rng.uniform_int(3);
        shape.kind = kind == 0 ? ShapeKind::ellipse : (kind == 1 ? ShapeKind::rectangle : ShapeKind::polygon);
        if (shape.kind == ShapeKind::polygon) {
            int nv = 5 + rng.uniform_int(4);
            std::vector<double> angles;
            for (int i = 0; i < nv; ++i)
                angles.push_back(rng.uniform(0.0, 2.0 * M_PI));
            std::sort(angles.begin(), angles.end());
            for (double a : angles) {
                double r = rng.uniform(0.28, 0.45);
                shape.poly_x.push_back(0.5 + r * std::cos(a));
                shape.poly_y.push_back(0.5 + r * std::sin(a));
            }
        }
        coverage = Tensor::zeros({1, h, w});
        std::int64_t solid = 0;
        for (int y = py0; y < py1; ++y)
            for (int x = px0; x < px1; ++x) {
                int hits = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx) {
                        double u = ((x + (sx + 0.5) / ss) / w - rec.box.x0) / bw;
                        double v = ((y + (sy + 0.5) / ss) / h - rec.box.y0) / bh;
                        if (u >= 0.0 && u < 1.0 && v >= 0.0 && v < 1.0 && inside_shape(shape, u, v))
                            ++hits;
                    }
                double cov = static_cast<double>(hits) / (ss * ss);
                coverage.at(0, y, x) = cov;
                if (cov >= 0.5)
                    ++solid;
            }
        if (solid >= std::max<std::int64_t>(4, box_px / 8) || attempt >= 20)
            break;
    }
    double oc[3];
    for (int c = 0; c < 3; ++c)
        oc[c] = rng.uniform(0.05, 0.95);
    double shade = rng.uniform(0.2, 0.6);
    rec.object_mask = Tensor::zeros({1, h, w});
    for (int y = py0; y < py1; ++y)
        for (int x = px0; x < px1; ++x) {
            double cov = coverage.at(0, y, x);
            if (cov == 0.0)
                continue;
            double v = ((y + 0.5) / h - rec.box.y0) / bh;
            for (int c = 0; c < 3; ++c) {
                double col = clamp01(oc[c] * (1.0 - shade * (v - 0.5)));
                rec.image.at(c, y, x) = clamp01(rec.image.at(c, y, x) + cov * (col - rec.image.at(c, y, x)));
            }
            if (cov >= 0.5)
                rec.object_mask.at(0, y, x) = 1.0;
        }
    return rec;
}

bool filter_box(const SourceRecord& record, double min_area, double max_area) {
    double frac = record.box.area();
    return frac >= min_area && frac <= max_area;
}

SourceRecord load_source_record(const std::string& image_png, const std::string& mask_png,
                                const std::optional<BoundingBox>& box, double min_area, double max_area) {
    SourceRecord rec;
    rec.image = read_png(image_png);
    Tensor raw = read_png_gray(mask_png);
    if (raw.dim(1) != rec.image.dim(1) || raw.dim(2) != rec.image.dim(2))
        throw ValidationError("mask extents do not match the image: " + mask_png);
    rec.object_mask = Tensor(raw.shape());
    for (std::int64_t i = 0; i < raw.numel(); ++i)
        rec.object_mask[i] = raw[i] >= 0.5 ? 1.0 : 0.0;
    if (box) {
        rec.box = *box;
        rec.box.validate();
    } else {
        PixelBox tight = mask_tight_box(rec.object_mask);
        int H = rec.image.dim(1), W = rec.image.dim(2);
        rec.box = {static_cast<double>(tight.x0) / W, static_cast<double>(tight.y0) / H,
                   static_cast<double>(tight.x1) / W, static_cast<double>(tight.y1) / H};
    }
    // Mask pixels outside the box violate the record invariant.
    int H = rec.image.dim(1), W = rec.image.dim(2);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (rec.object_mask.at(0, y, x) > 0.5) {
                double cx = (x + 0.5) / W, cy = (y + 0.5) / H;
                if (cx < rec.box.x0 || cx > rec.box.x1 || cy < rec.box.y0 || cy > rec.box.y1)
                    throw ValidationError("object mask extends beyond the box: " + mask_png);
            }
    if (!filter_box(rec, min_area, max_area))
        throw ValidationError("box area fraction outside the filter bounds: " + image_png);
    return rec;
}

CompositeAugment augment_composite(const Tensor& source, const BoundingBox& box, Rng& rng,
                                   const PipelineConfig& cfg) {
    box.validate();
    int H = source.dim(1), W = source.dim(2);
    double bx0 = box.x0 * W, bx1 = box.x1 * W;
    double by0 = box.y0 * H, by1 = box.y1 * H;
    double bw = bx1 - bx0, bh = by1 - by0;

    // Window always contains the box; a full-image box forces identity.
    double ww = bw >= W ? W : rng.uniform(bw, W);
    double wh = bh >= H ? H : rng.uniform(bh, H);
    double x_lo = std::max(0.0, bx1 - ww), x_hi = std::min(bx0, W - ww);
    double y_lo = std::max(0.0, by1 - wh), y_hi = std::min(by0, H - wh);
    double wx0 = x_lo >= x_hi ? x_lo : rng.uniform(x_lo, x_hi);
    double wy0 = y_lo >= y_hi ? y_lo : rng.uniform(y_lo, y_hi);

    CompositeAugment out;
    out.crop = {wx0, wy0, wx0 + ww, wy0 + wh};
    out.jitter = sample_color_jitter(rng);
    out.image = apply_color_jitter(crop_resize(source, wx0, wy0, wx0 + ww, wy0 + wh, cfg.image_size, cfg.image_size),
                                   out.jitter);
    out.box = {(bx0 - wx0) / ww, (by0 - wy0) / wh, (bx1 - wx0) / ww, (by1 - wy0) / wh};
    out.box.validate();
    return out;
}

ForegroundAugment augment_foreground(const SourceRecord& record, const Tensor& other_source, Rng& rng,
                                     const PipelineConfig& cfg) {
    if (other_source.same_shape(record.image)) {
        bool identical = true;
        for (std::int64_t i = 0; i < other_source.numel() && identical; ++i)
            identical = other_source[i] == record.image[i];
        if (identical)
            throw ValidationError("background swap needs a distinct other source");
    }
    int H = record.image.dim(1), W = record.image.dim(2);
    int F = cfg.fg_size;

    // Foreground crop of the source box, resized to the fg frame.
    double bx0 = record.box.x0 * W, bx1 = record.box.x1 * W;
    double by0 = record.box.y0 * H, by1 = record.box.y1 * H;
    Tensor fg_base = crop_resize(record.image, bx0, by0, bx1, by1, F, F);
    Tensor alpha = crop_resize(record.object_mask, bx0, by0, bx1, by1, F, F);
    Tensor mask_u({1, F, F});
    for (std::int64_t i = 0; i < mask_u.numel(); ++i)
        mask_u[i] = alpha[i] >= 0.5 ? 1.0 : 0.0;

    ForegroundAugment out;
    // Background swap: an fg-sized patch from the other source, object
    // pasted at the center of the patch (the crop keeps it centered).
    int OH = other_source.dim(1), OW = other_source.dim(2);
    out.swap_x0 = rng.uniform_int(OW - F + 1);
    out.swap_y0 = rng.uniform_int(OH - F + 1);
    Tensor patch = crop_resize(other_source, out.swap_x0, out.swap_y0, out.swap_x0 + F, out.swap_y0 + F, F, F);
    // Hard-mask paste: every non-object pixel stays a bitwise copy of
    // the other source's patch.
    Tensor swapped = patch;
    for (int y = 0; y < F; ++y)
        for (int x = 0; x < F; ++x)
            if (mask_u.at(0, y, x) > 0.5)
                for (int c = 0; c < 3; ++c)
                    swapped.at(c, y, x) = fg_base.at(c, y, x);

    // Illumination augmentation over the whole image.
    out.jitter = sample_color_jitter(rng);
    Tensor fg_u = apply_color_jitter(swapped, out.jitter);
    Tensor patch_jittered = apply_color_jitter(patch, out.jitter);
    out.mask_u = mask_u;

    // Geometry augmentation on object pixels only.
    PixelBox tight = mask_tight_box(mask_u);
    double side_w = tight.x1 - tight.x0, side_h = tight.y1 - tight.y0;
    std::array<std::array<double, 2>, 4> src = {{{static_cast<double>(tight.x0), static_cast<double>(tight.y0)},
                                                 {static_cast<double>(tight.x1), static_cast<double>(tight.y0)},
                                                 {static_cast<double>(tight.x1), static_cast<double>(tight.y1)},
                                                 {static_cast<double>(tight.x0), static_cast<double>(tight.y1)}}};
    double cx = 0.5 * (tight.x0 + tight.x1), cy = 0.5 * (tight.y0 + tight.y1);

    // Hole-filled background: object region replaced by the swapped
    // patch so a moved object uncovers background, not stale pixels.
    Tensor holed = fg_u;
    for (int y = 0; y < F; ++y)
        for (int x = 0; x < F; ++x)
            if (mask_u.at(0, y, x) > 0.5)
                for (int c = 0; c < 3; ++c)
                    holed.at(c, y, x) = patch_jittered.at(c, y, x);

    WarpResult warped;
    GeometryParams geo;
    for (int attempt = 0;; ++attempt) {
        geo.hflip = rng.bernoulli(cfg.hflip_prob);
        geo.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
        for (int i = 0; i < 8; ++i)
            geo.corner_offsets[static_cast<size_t>(i)] =
                rng.uniform(-cfg.perspective_mag, cfg.perspective_mag) * (i % 2 == 0 ? side_w : side_h);
        geo.retries = attempt;

        Homography hg;
        if (geo.is_identity()) {
            hg = Homography::identity();
        } else {
            Homography base = Homography::identity();
            if (geo.hflip)
                base = Homography::hflip(cx);
            base = Homography::compose(Homography::rotation(geo.rotation_deg * M_PI / 180.0, cx, cy), base);
            std::array<std::array<double, 2>, 4> dst;
            for (int i = 0; i < 4; ++i) {
                double tx, ty;
                base.apply(src[static_cast<size_t>(i)][0], src[static_cast<size_t>(i)][1], tx, ty);
                dst[static_cast<size_t>(i)] = {tx + geo.corner_offsets[static_cast<size_t>(2 * i)],
                                               ty + geo.corner_offsets[static_cast<size_t>(2 * i + 1)]};
            }
            hg = Homography::from_corners(src, dst);
        }
        warped = warp_layer_over(fg_u, mask_u, hg, holed);
        if (warped.mask_pixels > 0)
            break;
        if (attempt >= 10)
            throw GeometryError("geometry augmentation lost the object after 10 retries");
    }
    out.geometry = geo;
    out.fg_g_preblur = warped.image;
    out.mask_g = warped.mask;
    out.fg_u_preblur = fg_u;

    // Random blur, decided independently per variant.
    out.blur_u = rng.bernoulli(cfg.blur_prob);
    out.blur_sigma_u = rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
    out.blur_g = rng.bernoulli(cfg.blur_prob);
    out.blur_sigma_g = rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
    out.fg_u = out.blur_u ? gaussian_blur(out.fg_u_preblur, out.blur_sigma_u, cfg.blur_kernel) : out.fg_u_preblur;
    out.fg_g = out.blur_g ? gaussian_blur(out.fg_g_preblur, out.blur_sigma_g, cfg.blur_kernel) : out.fg_g_preblur;
    return out;
}

Tensor paste_object(const Tensor& composite, const Tensor& foreground, const BoundingBox& box, const Tensor& fg_mask) {
    box.validate();
    int H = composite.dim(1), W = composite.dim(2);
    int x0 = std::clamp(static_cast<int>(std::floor(box.x0 * W)), 0, W - 1);
    int y0 = std::clamp(static_cast<int>(std::floor(box.y0 * H)), 0, H - 1);
    int x1 = std::clamp(static_cast<int>(std::ceil(box.x1 * W)), x0 + 1, W);
    int y1 = std::clamp(static_cast<int>(std::ceil(box.y1 * H)), y0 + 1, H);
    int bw = x1 - x0, bh = y1 - y0;
    Tensor obj = resize_bilinear(foreground, bh, bw);
    Tensor m = resize_bilinear(fg_mask, bh, bw);
    if (m.abs_max() <= 0.0)
        throw GeometryError("paste_object: mask is empty within the box");
    Tensor out = composite;
    for (int y = 0; y < bh; ++y)
        for (int x = 0; x < bw; ++x) {
            double a = m.at(0, y, x);
            if (a <= 0.0)
                continue;
            for (int c = 0; c < 3; ++c) {
                double ov = obj.at(c, y, x);
                double& dst = out.at(c, y0 + y, x0 + x);
                dst = a >= 1.0 ? ov : dst + a * (ov - dst);
            }
        }
    return out;
}

AugmentedPair build_pair(const SourceRecord& record, const SourceRecord& other, Rng& rng, const PipelineConfig& cfg) {
    cfg.validate();
    AugmentedPair pair;
    Rng rc = rng.stream("composite");
    Rng rf = rng.stream("foreground");
    CompositeAugment ca = augment_composite(record.image, record.box, rc, cfg);
    ForegroundAugment fa = augment_foreground(record, other.image, rf, cfg);
    pair.composite_u = ca.image;
    pair.box = ca.box;
    // I_c^n: the composite's object replaced by the (pre-blur) I_f^u object.
    pair.composite_n = paste_object(ca.image, fa.fg_u_preblur, ca.box, fa.mask_u);
    pair.fg_u = fa.fg_u;
    pair.fg_g = fa.fg_g;
    pair.fg_mask_u = fa.mask_u;
    pair.fg_mask_g = fa.mask_g;
    pair.params.jitter_composite = ca.jitter;
    pair.params.jitter_foreground = fa.jitter;
    pair.params.crop = ca.crop;
    pair.params.swap_x0 = fa.swap_x0;
    pair.params.swap_y0 = fa.swap_y0;
    pair.params.geometry = fa.geometry;
    pair.params.blur_u = fa.blur_u;
    pair.params.blur_g = fa.blur_g;
    pair.params.blur_sigma_u = fa.blur_sigma_u;
    pair.params.blur_sigma_g = fa.blur_sigma_g;
    return pair;
}

TrainingTuple make_tuple(const AugmentedPair& pair, Indicator indicator, double fill) {
    indicator.validate();
    TrainingTuple t;
    t.indicator = indicator;
    t.box = pair.box;
    t.foreground = indicator.pose == 0 ? pair.fg_u : pair.fg_g;
    t.fg_object_mask = indicator.pose == 0 ? pair.fg_mask_u : pair.fg_mask_g;
    t.composite = indicator.illumination == 0 ? pair.composite_n : pair.composite_u;
    int H = t.composite.dim(1), W = t.composite.dim(2);
    t.mask = rasterize_box_mask(H, W, pair.box);
    t.background = t.composite;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (t.mask.at(0, y, x) > 0.5)
                for (int c = 0; c < 3; ++c)
                    t.background.at(c, y, x) = fill;
    return t;
}

namespace {

json jitter_to_json(const ColorJitterParams& p) {
    return json{{"brightness", p.brightness},
                {"saturation", p.saturation},
                {"contrast", p.contrast},
                {"hue", p.hue},
                {"order", p.order}};
}

json box_to_json(const BoundingBox& b) {
    return json{b.x0, b.y0, b.x1, b.y1};
}

BoundingBox box_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

struct TupleJob {
    std::string dir;
    Indicator indicator;
    int source_index;
};

void write_tuple_dir(const std::string& dir, const TrainingTuple& t, const AugmentedPair& pair) {
    fs::create_directories(dir);
    write_png(dir + "/background.png", t.background);
    write_png(dir + "/foreground.png", t.foreground);
    write_png(dir + "/composite.png", t.composite);
    write_png(dir + "/mask.png", t.mask);
    write_png(dir + "/fg_mask.png", t.fg_object_mask);
    json meta;
    meta["schema_version"] = 1;
    meta["indicator"] = {t.indicator.illumination, t.indicator.pose};
    meta["task"] = t.indicator.name();
    meta["box"] = box_to_json(t.box);
    meta["paste_mode"] = "stretch_to_box";
    json aug;
    aug["jitter_composite"] = jitter_to_json(pair.params.jitter_composite);
    aug["jitter_foreground"] = jitter_to_json(pair.params.jitter_foreground);
    aug["crop"] = {pair.params.crop.x0, pair.params.crop.y0, pair.params.crop.x1, pair.params.crop.y1};
    aug["swap_origin"] = {pair.params.swap_x0, pair.params.swap_y0};
    aug["hflip"] = pair.params.geometry.hflip;
    aug["rotation_deg"] = pair.params.geometry.rotation_deg;
    aug["corner_offsets"] = pair.params.geometry.corner_offsets;
    aug["geometry_retries"] = pair.params.geometry.retries;
    aug["blur"] = {{"u", pair.params.blur_u}, {"g", pair.params.blur_g}};
    aug["blur_sigma"] = {{"u", pair.params.blur_sigma_u}, {"g", pair.params.blur_sigma_g}};
    meta["augmentation"] = aug;
    std::ofstream os(dir + "/meta.json");
    if (!os)
        throw IoError("cannot write " + dir + "/meta.json");
    os << meta.dump(2) << "\n";
}

} // namespace

Manifest build_dataset(int n_sources, std::uint64_t seed, const std::string& out_dir, const PipelineConfig& cfg,
                       int threads) {
    cfg.validate();
    if (n_sources < 1)
        throw ConfigError("need at least one source");
    fs::create_directories(out_dir);

    Manifest mf;
    mf.n_sources = n_sources;
    mf.seed = seed;
    mf.entries.resize(static_cast<size_t>(n_sources) * 4);

    Rng root(seed);
    auto run_source = [&](int i) {
        Rng ri = root.stream("source", static_cast<std::uint64_t>(i));
        Rng rgen = ri.stream("gen");
        SourceRecord rec = generate_synthetic_source(rgen, cfg.source_size, cfg.source_size, cfg);
        Rng rother = ri.stream("other");
        SourceRecord other = generate_synthetic_source(rother, cfg.source_size, cfg.source_size, cfg);
        Rng raug = ri.stream("aug");
        AugmentedPair pair = build_pair(rec, other, raug, cfg);
        for (int k = 0; k < 4; ++k) {
            Indicator ind = Indicator::kAll[k];
            TrainingTuple t = make_tuple(pair, ind, cfg.fill_value);
            char dirname[64];
            std::snprintf(dirname, sizeof dirname, "tuple_%05d_%s", i, ind.name().c_str());
            std::string dir = out_dir + "/" + dirname;
            write_tuple_dir(dir, t, pair);
            mf.entries[static_cast<size_t>(i) * 4 + static_cast<size_t>(k)] = {dirname, ind, i};
        }
    };

    threads = std::max(1, threads);
    if (threads == 1) {
        for (int i = 0; i < n_sources; ++i)
            run_source(i);
    } else {
        std::vector<std::future<void>> futs;
        for (int w = 0; w < threads; ++w)
            futs.push_back(std::async(std::launch::async, [&, w] {
                for (int i = w; i < n_sources; i += threads)
                    run_source(i);
            }));
        for (auto& f : futs)
            f.get();
    }

    for (const auto& e : mf.entries)
        mf.per_task_counts[static_cast<size_t>(e.indicator.index())]++;

    json j;
    j["schema_version"] = 1;
    j["n_sources"] = n_sources;
    j["seed"] = seed;
    j["per_task_counts"] = {{"blend", mf.per_task_counts[Indicator::blend().index()]},
                            {"view", mf.per_task_counts[Indicator::view_synthesis().index()]},
                            {"harmonize", mf.per_task_counts[Indicator::harmonize().index()]},
                            {"compose", mf.per_task_counts[Indicator::compose().index()]}};
    j["config"] = {{"source_size", cfg.source_size}, {"image_size", cfg.image_size},   {"fg_size", cfg.fg_size},
                   {"min_area", cfg.min_area},       {"max_area", cfg.max_area},       {"hflip_prob", cfg.hflip_prob},
                   {"blur_prob", cfg.blur_prob},     {"rotation_deg", cfg.rotation_deg}};
    json entries = json::array();
    for (const auto& e : mf.entries)
        entries.push_back({{"dir", e.dir},
                           {"indicator", {e.indicator.illumination, e.indicator.pose}},
                           {"source_index", e.source_index}});
    j["tuples"] = entries;
    std::ofstream os(out_dir + "/manifest.json");
    if (!os)
        throw IoError("cannot write manifest in " + out_dir);
    os << j.dump(2) << "\n";
    return mf;
}

Manifest read_manifest(const std::string& dataset_dir) {
    std::ifstream is(dataset_dir + "/manifest.json");
    if (!is)
        throw StateError("no manifest.json under " + dataset_dir);
    json j = json::parse(is, nullptr, true);
    Manifest mf;
    mf.n_sources = j.at("n_sources").get<int>();
    mf.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("tuples")) {
        ManifestEntry me;
        me.dir = e.at("dir").get<std::string>();
        me.indicator = {e.at("indicator").at(0).get<int>(), e.at("indicator").at(1).get<int>()};
        me.indicator.validate();
        me.source_index = e.at("source_index").get<int>();
        mf.entries.push_back(me);
        mf.per_task_counts[static_cast<size_t>(me.indicator.index())]++;
    }
    return mf;
}

TrainingTuple load_tuple_dir(const std::string& tuple_dir) {
    TrainingTuple t;
    t.background = read_png(tuple_dir + "/background.png");
    t.foreground = read_png(tuple_dir + "/foreground.png");
    t.composite = read_png(tuple_dir + "/composite.png");
    Tensor m = read_png_gray(tuple_dir + "/mask.png");
    t.mask = Tensor(m.shape());
    for (std::int64_t i = 0; i < m.numel(); ++i)
        t.mask[i] = m[i] >= 0.5 ? 1.0 : 0.0;
    if (fs::exists(tuple_dir + "/fg_mask.png")) {
        Tensor fm = read_png_gray(tuple_dir + "/fg_mask.png");
        t.fg_object_mask = Tensor(fm.shape());
        for (std::int64_t i = 0; i < fm.numel(); ++i)
            t.fg_object_mask[i] = fm[i] >= 0.5 ? 1.0 : 0.0;
    }
    std::ifstream is(tuple_dir + "/meta.json");
    if (!is)
        throw StateError("no meta.json under " + tuple_dir);
    json j = json::parse(is);
    t.box = box_from_json(j.at("box"));
    t.indicator = {j.at("indicator").at(0).get<int>(), j.at("indicator").at(1).get<int>()};
    t.indicator.validate();
    t.box.validate();
    return t;
}

std::vector<TrainingTuple> load_dataset(const std::string& dataset_dir) {
    Manifest mf = read_manifest(dataset_dir);
    std::vector<TrainingTuple> out;
    out.reserve(mf.entries.size());
    for (const auto& e : mf.entries)
        out.push_back(load_tuple_dir(dataset_dir + "/" + e.dir));
    return out;
}

} // namespace ccm
