// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ccm/nn.hpp"
#include "ccm/tape.hpp"

namespace ccm {

struct EncoderConfig {
    int image_size = 64;
    int latent_factor = 4; // f in {2,4,8}
    int fg_size = 64;
    int patch_size = 8;
    int vit_depth = 4;
    int vit_width = 64;
    int deep_layer_index = 4;    // class-token tap feeding the global MLP
    int shallow_layer_index = 2; // patch-token tap yielding local embeddings
    int mlp_layers = 5;
    int vit_heads = 4;
    int d_g = 64;
    int d_l = 64;
    int ae_channels = 32;
    bool use_pos_embed = true;
    bool fg_encoder_trainable = true;

    int latent_size() const { return image_size / latent_factor; }
    int num_patches() const { return (fg_size / patch_size) * (fg_size / patch_size); }
    void validate() const;
};

struct LatentCode {
    enum class Source { composite, background };
    Tensor values; // [4, H/f, W/f]
    Source source_kind = Source::composite;
};

struct ForegroundEmbeddings {
    Tensor global;     // [d_g]
    Tensor local;      // [n_p, d_l]
    bool null_global = false;
};

// Deterministic convolutional autoencoder standing in for the latent
// codec: encode() maps [-1,1] images to 4-channel latents, decode()
// maps latents back, clamped to [-1,1]. Pretrained on reconstruction,
// then frozen while the generator trains.
class Autoencoder {
public:
    Autoencoder(const EncoderConfig& cfg, ParamStore& ps, Rng& rng);

    LatentCode encode(const Tensor& image, LatentCode::Source kind = LatentCode::Source::composite) const;
    Tensor decode(const Tensor& z) const;

    Var encode_var(Tape& t, Var image) const;
    Var decode_var(Tape& t, Var z) const;

    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    int stages_;
    Conv2d enc_stem_;
    std::vector<Conv2d> enc_convs_;
    Conv2d enc_head_;
    Conv2d dec_stem_;
    std::vector<Conv2d> dec_convs_;
    Conv2d dec_head_;
};

// ViT-style hierarchical foreground encoder. The class token from the
// deep tap feeds a 5-layer MLP producing the global embedding; patch
// tokens from the shallow tap are returned as local embeddings.
class ForegroundEncoder {
public:
    ForegroundEncoder(const EncoderConfig& cfg, ParamStore& ps, Rng& rng);

    ForegroundEmbeddings encode(const Tensor& foreground) const;
    // Graph-building path; set use_null_global to substitute the learned
    // null vector for the global embedding (classifier-free training).
    struct EmbeddingVars {
        Var global; // [1, d_g]
        Var local;  // [n_p, d_l]
    };
    EmbeddingVars encode_var(Tape& t, Var foreground, bool use_null_global) const;

    Tensor null_global_embedding() const { return *null_global_; }
    Tensor* null_global_param() const { return null_global_; }
    void set_pos_embed_enabled(bool on) { pos_enabled_ = on; }

    const EncoderConfig& config() const { return cfg_; }

private:
    struct Block {
        LayerNorm ln1;
        MultiHeadAttention attn;
        LayerNorm ln2;
        Linear fc1, fc2;
    };

    EncoderConfig cfg_;
    Linear patch_embed_;
    Tensor* cls_token_ = nullptr;
    Tensor* pos_embed_ = nullptr;
    std::vector<Block> blocks_;
    LayerNorm ln_final_;
    std::vector<Linear> mlp_;
    Tensor* null_global_ = nullptr;
    bool pos_enabled_ = true;
};

} // namespace ccm
