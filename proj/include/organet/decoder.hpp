#pragma once

#include "organet/encoder.hpp"

#include <torch/torch.h>

namespace organet {

/// Learnable 2x upsampler: linear c -> 2c, then each token's channels are
/// regrouped into a 2x2 neighbourhood of c/2 channels ((p1 p2 c) order).
class PatchExpandImpl : public torch::nn::Module {
public:
    explicit PatchExpandImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);  // [B, s, s, c] -> [B, 2s, 2s, c/2]

    torch::nn::Linear expand{nullptr};
};
TORCH_MODULE(PatchExpand);

struct BcfOptions {
    int64_t channels = 0;  // C of the high-resolution input
    int64_t side = 0;      // s of the high-resolution input
    int64_t heads = 4;
    int64_t prefuse_hidden_mult = 2;
    double gamma_init = 0.1;
};

struct BcfTrace {
    torch::Tensor o_h2l, o_l2h;        // projected, gamma-scaled branch outputs [B, N, C]
    torch::Tensor gate;                // [B, N, 1]
    torch::Tensor mixed;               // gate-weighted branch sum (before the residual)
    torch::Tensor attn_h2l, attn_l2h;  // [B, heads, N, N], only when requested
    torch::Tensor out;                 // [B, C, s, s]
};

/// Bidirectional cross fusion of a pyramid level with its coarser neighbour.
///
/// The coarse map is patch-expanded to the fine grid. High-to-low attention
/// takes queries from the fine map and keys/values from the expanded map;
/// low-to-high takes queries from the expanded map and keys/values from the
/// pre-fused concatenation. Both share a relative position bias over the grid.
class BcfBlockImpl : public torch::nn::Module {
public:
    explicit BcfBlockImpl(BcfOptions options);

    torch::Tensor forward(const torch::Tensor& p_high, const torch::Tensor& p_low);
    BcfTrace forward_traced(const torch::Tensor& p_high, const torch::Tensor& p_low, bool keep_attention = false);

    PatchExpand upsample{nullptr};
    torch::nn::LayerNorm norm_high{nullptr}, norm_low{nullptr};
    torch::nn::Sequential prefuse{nullptr};
    torch::nn::Linear q_h{nullptr}, k_h{nullptr}, v_h{nullptr};
    torch::nn::Linear q_l{nullptr}, k_l{nullptr}, v_l{nullptr};
    torch::nn::Linear proj_h2l{nullptr}, proj_l2h{nullptr};
    torch::nn::Sequential gate_mlp{nullptr};
    torch::nn::Linear out_proj{nullptr};
    torch::Tensor bias_table;  // [(2s-1)^2, heads]
    torch::Tensor gamma_h2l, gamma_l2h;

    int64_t heads() const { return heads_; }

private:
    torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                         const torch::Tensor& bias, torch::Tensor* weights) const;
    torch::Tensor relative_bias() const;

    int64_t channels_;
    int64_t side_;
    int64_t heads_;
};
TORCH_MODULE(BcfBlock);

/// conv3x3-BN-ReLU twice.
torch::nn::Sequential conv_block(int64_t in_channels, int64_t out_channels);

/// Progressive concatenation decoder over (P0', P1', P2) producing 2-channel logits.
class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(int64_t base_channels, int64_t input_size);
    torch::Tensor forward(const torch::Tensor& p0f, const torch::Tensor& p1f, const torch::Tensor& p2);

    torch::nn::Sequential conv_0_1{nullptr}, conv_1_2{nullptr}, final_conv{nullptr};
    torch::nn::Conv2d seg_head{nullptr};

private:
    int64_t base_channels_;
    int64_t input_size_;
};
TORCH_MODULE(Decoder);

struct ModelConfig {
    EncoderConfig encoder{};
    int64_t bcf_heads = 4;
    int64_t prefuse_hidden_mult = 2;
    double gamma_init = 0.1;

    static ModelConfig toy();
    void validate() const;
};

/// Full segmentation network: dual encoder, two BCF sites, decoder.
class OrgaNetImpl : public torch::nn::Module {
public:
    explicit OrgaNetImpl(const ModelConfig& config);

    /// [B, 3, S, S] -> logits [B, 2, S, S]; channel 1 is the organoid class.
    torch::Tensor forward(const torch::Tensor& image);

    const ModelConfig& config() const { return config_; }

    DualEncoder encoder{nullptr};
    BcfBlock bcf01{nullptr}, bcf12{nullptr};
    Decoder decoder{nullptr};

private:
    ModelConfig config_;
};
TORCH_MODULE(OrgaNet);

/// Per-pixel class probabilities, [B, 2, S, S].
torch::Tensor model_forward(OrgaNet& model, const torch::Tensor& image);

}  // namespace organet
