// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ccm/geometry.hpp"
#include "ccm/image.hpp"
#include "ccm/rng.hpp"

namespace ccm {

// Pipeline images live in [0,1]; conversion to the model's [-1,1] range
// happens at training/evaluation time.

struct PipelineConfig {
    int source_size = 96; // synthetic source extent (square)
    int image_size = 64;  // composite/background extent
    int fg_size = 64;     // foreground image extent
    double min_area = 0.02;
    double max_area = 0.80;
    double hflip_prob = 0.2;
    double rotation_deg = 20.0;
    double perspective_mag = 0.1; // corner shift as a fraction of the object side
    double blur_prob = 0.3;
    double blur_sigma_lo = 0.5;
    double blur_sigma_hi = 1.5;
    int blur_kernel = 5;
    double fill_value = 0.5; // mid-gray box fill for backgrounds
    void validate() const;
};

struct SourceRecord {
    Tensor image;       // [3,H,W]
    BoundingBox box;    // B_s, normalized
    Tensor object_mask; // [1,H,W] binary, nonzero only inside box
};

struct CropParams {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0; // window in source pixels
};

struct GeometryParams {
    bool hflip = false;
    double rotation_deg = 0.0;
    std::array<double, 8> corner_offsets{}; // (dx,dy) x 4, in pixels
    int retries = 0;
    bool is_identity() const;
};

struct AugmentationParams {
    ColorJitterParams jitter_composite;
    ColorJitterParams jitter_foreground;
    CropParams crop;
    int swap_x0 = 0, swap_y0 = 0; // patch position in the other source
    GeometryParams geometry;
    bool blur_u = false, blur_g = false;
    double blur_sigma_u = 0.0, blur_sigma_g = 0.0;
};

struct AugmentedPair {
    Tensor composite_u; // I_c^u [3,S,S]
    Tensor composite_n; // I_c^n, differs from I_c^u only inside the object area
    Tensor fg_u;        // I_f^u [3,F,F]
    Tensor fg_g;        // I_f^g, object-only geometric variant of I_f^u
    Tensor fg_mask_u;   // [1,F,F] binary
    Tensor fg_mask_g;
    BoundingBox box;    // in composite coordinates
    AugmentationParams params;
};

struct TrainingTuple {
    Tensor background; // I_b = composite with the box filled
    Tensor foreground; // I_f
    Tensor composite;  // pseudo ground-truth I_c
    Tensor mask;       // [1,H,W] box mask M
    BoundingBox box;
    Indicator indicator;
    // Object mask of the chosen foreground variant; carried for metric
    // computation, not part of the generator's input tuple.
    Tensor fg_object_mask;
};

// Procedurally rendered background + one anti-aliased shape with exact
// mask; the box area fraction is drawn inside the filter bounds.
SourceRecord generate_synthetic_source(Rng& rng, int h, int w, const PipelineConfig& cfg = {});

// True iff the record's box area fraction lies in [min_area, max_area],
// inclusive on both ends.
bool filter_box(const SourceRecord& record, double min_area = 0.02, double max_area = 0.80);

// Loader for real data: an RGB image plus a binary object-mask PNG.
// The box defaults to the mask's tight pixel bounds; pass one explicitly
// to override. Records failing filter_box are rejected.
SourceRecord load_source_record(const std::string& image_png, const std::string& mask_png,
                                const std::optional<BoundingBox>& box = std::nullopt, double min_area = 0.02,
                                double max_area = 0.80);

struct CompositeAugment {
    Tensor image; // I_c^u
    BoundingBox box;
    CropParams crop;
    ColorJitterParams jitter;
};
// Random crop window fully containing the box, resized to image_size,
// then color jitter. A full-image box forces the identity window.
CompositeAugment augment_composite(const Tensor& source, const BoundingBox& box, Rng& rng, const PipelineConfig& cfg);

struct ForegroundAugment {
    Tensor fg_u, fg_g;
    Tensor mask_u, mask_g;
    ColorJitterParams jitter;
    int swap_x0 = 0, swap_y0 = 0;
    GeometryParams geometry;
    bool blur_u = false, blur_g = false;
    double blur_sigma_u = 0.0, blur_sigma_g = 0.0;
    Tensor fg_u_preblur, fg_g_preblur;
};
// Background swap, illumination jitter (-> I_f^u), object-only geometry
// warp (-> I_f^g), then independent random blur on each variant.
ForegroundAugment augment_foreground(const SourceRecord& record, const Tensor& other_source, Rng& rng,
                                     const PipelineConfig& cfg);

// Replaces the box interior of the composite with the foreground's
// object, mask-weighted and bilinear-resized to the box extent. Pixels
// with zero resized mask are bitwise untouched.
Tensor paste_object(const Tensor& composite, const Tensor& foreground, const BoundingBox& box, const Tensor& fg_mask);

// Runs the full augmentation flow for one source.
AugmentedPair build_pair(const SourceRecord& record, const SourceRecord& other, Rng& rng, const PipelineConfig& cfg);

// Task table: (0,0)->(I_f^u, I_c^n), (1,0)->(I_f^u, I_c^u),
//             (0,1)->(I_f^g, I_c^n), (1,1)->(I_f^g, I_c^u).
TrainingTuple make_tuple(const AugmentedPair& pair, Indicator indicator, double fill = 0.5);

struct ManifestEntry {
    std::string dir;
    Indicator indicator;
    int source_index = 0;
};

struct Manifest {
    int n_sources = 0;
    std::uint64_t seed = 0;
    std::array<int, 4> per_task_counts{};
    std::vector<ManifestEntry> entries;
};

// Emits all four indicator tuples per source as PNG directories plus a
// manifest.json; rebuilding with the same seed is bitwise identical.
Manifest build_dataset(int n_sources, std::uint64_t seed, const std::string& out_dir,
                       const PipelineConfig& cfg = {}, int threads = 1);

Manifest read_manifest(const std::string& dataset_dir);
std::vector<TrainingTuple> load_dataset(const std::string& dataset_dir);
TrainingTuple load_tuple_dir(const std::string& tuple_dir);

} // namespace ccm
