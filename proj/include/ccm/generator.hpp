// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ccm/encoders.hpp"
#include "ccm/geometry.hpp"
#include "ccm/nn.hpp"

namespace ccm {

// Model variants, ordered so that parameter censuses are nested:
// global_only_class == plus_aug < le_no_fm < full. plus_aug differs
// from global_only_class only in how training data is prepared;
// global_all_tokens shares the class-only architecture but feeds every
// foreground token to the cross-attention context.
enum class Ablation {
    global_all_tokens,
    global_only_class,
    plus_aug,
    le_no_fm,
    full,
};

std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& s);

struct GeneratorConfig {
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2};
    std::vector<int> attention_resolutions = {16, 8};
    std::vector<int> le_resolutions = {16, 8}; // local enhancement attachment points
    int p = 8;                                 // RoIAlign output size
    int time_embed_dim = 128;
    double cfg_drop_prob = 0.2;
    int res_blocks = 1;
    int heads = 4;
    int norm_groups = 8;
    Ablation ablation = Ablation::full;
    bool zero_init_residuals = true;
    // Open question: whether the unconditional CFG pass also disables
    // local enhancement. Default keeps LE active with the real E_l.
    bool null_le_in_uncond = false;

    bool has_local_enhancement() const {
        return ablation == Ablation::le_no_fm || ablation == Ablation::full;
    }
    bool has_feature_modulation() const { return ablation == Ablation::full; }
    bool all_tokens_context() const { return ablation == Ablation::global_all_tokens; }

    void validate(int latent_size) const;
};

struct UNetInput {
    Tensor z_t;           // [4,h,w]
    Tensor bg_latent;     // [4,h,w]
    Tensor mask_ds;       // [1,h,w], values in {0,1}
    Tensor indicator_map; // [2,h,w], spatially constant
    int t = 0;
    Tensor stacked() const; // [11,h,w]
};

// Builds the 11-channel U-Net input: noisy latent, encoded background,
// nearest-downsampled box mask, and the broadcast indicator.
UNetInput assemble_input(const Tensor& z_t, const Tensor& bg_latent, const BoundingBox& box, Indicator indicator,
                         int latent_factor, int t);

// Box-interior window in feature-map pixels (floor/ceil cover, at least
// one pixel per axis).
struct FeatureWindow {
    int y0, x0, h, w;
};
FeatureWindow box_feature_window(const BoundingBox& box, int fh, int fw);

class UNet {
public:
    UNet(const GeneratorConfig& gcfg, const EncoderConfig& ecfg, ParamStore& ps, Rng& rng);

    // Graph-building forward. `e_g` is the [1,d_g] global-context row
    // (real or null embedding); `e_l` the [n_p,d_l] local embeddings.
    Var forward(Tape& t, Var x_stacked, int tstep, Var e_g, Var e_l, const BoundingBox& box, Indicator indicator,
                bool le_enabled = true) const;

    // Inference wrapper; no gradients.
    Tensor forward(const UNetInput& input, const Tensor& e_g, const Tensor& e_l, const BoundingBox& box,
                   Indicator indicator, bool le_enabled = true) const;

    const GeneratorConfig& config() const { return gcfg_; }

    // Standalone pieces exposed for direct verification.
    Var global_fusion(Tape& t, Var feat_tokens, Var context, int block_index) const;
    struct LeProbe {
        Var out;
        Var attn; // [p^2, n_p]
    };
    LeProbe local_enhancement_probe(Tape& t, Var feat, Var e_l, Indicator indicator, const BoundingBox& box,
                                    int site_index, bool with_modulation) const;
    Var local_enhancement(Tape& t, Var feat, Var e_l, Indicator indicator, const BoundingBox& box, int site_index,
                          bool with_modulation) const;
    Var feature_modulation(Tape& t, Var f_tilde, Var attn_map, Var e_l, int site_index) const;
    int num_transformer_blocks() const { return static_cast<int>(tblocks_.size()); }
    int num_le_sites() const { return static_cast<int>(le_sites_.size()); }
    int le_channels(int site_index) const;

private:
    struct ResBlock {
        GroupNorm n1;
        Conv2d c1;
        Linear temb;
        GroupNorm n2;
        Conv2d c2;
        Conv2d skip; // 1x1 when channel count changes
        bool has_skip = false;
        int out_ch = 0;
    };
    struct TransformerBlock {
        GroupNorm norm;
        Conv2d proj_in;
        LayerNorm ln1;
        MultiHeadAttention self_attn;
        LayerNorm ln2;
        MultiHeadAttention cross_attn;
        LayerNorm ln3;
        Linear ff1, ff2;
        Conv2d proj_out;
        int channels = 0;
    };
    struct LeSite {
        Conv2d fuse;
        Linear to_q, to_k, to_v, to_out;
        Conv2d conv_gamma, conv_beta; // only when feature modulation is on
        int channels = 0;
    };
    // One entry of the down/mid/up sequence.
    struct Stage {
        enum class Kind { stem, res, transformer, le, down, up, out } kind;
        int index = 0; // index into rblocks_/tblocks_/le_sites_/convs
    };

    GeneratorConfig gcfg_;
    EncoderConfig ecfg_;

    Linear temb_fc1_, temb_fc2_;
    Conv2d stem_;
    std::vector<ResBlock> rblocks_;
    std::vector<TransformerBlock> tblocks_;
    std::vector<LeSite> le_sites_;
    std::vector<Conv2d> resample_convs_;
    GroupNorm out_norm_;
    Conv2d out_conv_;

    std::vector<Stage> down_stages_;
    std::vector<Stage> mid_stages_;
    std::vector<Stage> up_stages_;

    ResBlock make_res(ParamStore& ps, const std::string& name, int in_ch, int out_ch, Rng& rng);
    TransformerBlock make_transformer(ParamStore& ps, const std::string& name, int ch, Rng& rng);
    LeSite make_le(ParamStore& ps, const std::string& name, int ch, Rng& rng);
    Var run_res(Tape& t, const ResBlock& rb, Var x, Var temb) const;
    Var run_transformer(Tape& t, int block_index, Var x, Var ctx) const;
};

// Deterministic parameter census of the generator for a config
// (latent geometry comes from the encoder config).
std::int64_t count_parameters(const GeneratorConfig& gcfg, const EncoderConfig& ecfg);

} // namespace ccm
