#pragma once

#include "organet/lgbp_fusion.hpp"

#include <torch/torch.h>

#include <array>
#include <vector>

namespace organet {

struct EncoderConfig {
    int64_t base_channels = 96;                  // C0, width of the scale-0 pyramid level
    std::array<int64_t, 3> stage_depths{2, 2, 6};  // windowed-attention layers per stage
    std::array<int64_t, 3> stage_heads{3, 6, 12};
    int64_t window = 7;
    int64_t input_size = 224;
    int64_t conv_width = 64;                     // bottleneck width of the first residual stage
    std::array<int64_t, 3> conv_blocks{3, 4, 6};  // ResNet50 layer1..layer3
    int64_t mlp_ratio = 4;
    int64_t fusion_heads = 4;
    int64_t fusion_bands = 4;

    /// Desk-scale geometry: 112 px input, C0 = 32.
    static EncoderConfig toy();

    /// Pyramid side at stage i (input/4, /8, /16).
    int64_t side(int stage) const { return input_size / (int64_t{4} << stage); }
    int64_t channels(int stage) const { return base_channels << stage; }

    /// Throws ConfigError describing the first violated constraint.
    void validate() const;
};

/// P0, P1, P2 as NCHW tensors; sides halve and channels double level to level.
struct FeaturePyramid {
    torch::Tensor p0, p1, p2;
};

/// Convolutional stem shared by both branches: 7x7/2 conv, BN, ReLU, 3x3/2 max-pool.
class InitBlockImpl : public torch::nn::Module {
public:
    explicit InitBlockImpl(const EncoderConfig& config);
    torch::Tensor forward(const torch::Tensor& image);

    torch::nn::Conv2d conv{nullptr};
    torch::nn::BatchNorm2d bn{nullptr};

private:
    int64_t divisor_;
};
TORCH_MODULE(InitBlock);

class BottleneckImpl : public torch::nn::Module {
public:
    static constexpr int64_t kExpansion = 4;
    BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

/// One residual level plus the 1x1 convolution aligning its width to the attention branch.
class ResNetStageImpl : public torch::nn::Module {
public:
    ResNetStageImpl(int64_t in_channels, int64_t width, int64_t blocks, int64_t stride, int64_t aligned_channels);

    /// Returns {raw stage output, channel-aligned output}.
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

    int64_t out_channels() const { return width_ * BottleneckImpl::kExpansion; }

    torch::nn::Sequential blocks{nullptr};
    torch::nn::Conv2d align{nullptr};

private:
    int64_t width_;
};
TORCH_MODULE(ResNetStage);

// Window helpers over channels-last maps [B, H, W, C].

/// [B, H, W, C] -> [B * nW, window*window, C], windows in row-major order.
torch::Tensor window_partition(const torch::Tensor& x, int64_t window);
/// Inverse of window_partition.
torch::Tensor window_reverse(const torch::Tensor& windows, int64_t window, int64_t height, int64_t width);
/// Window index of every token (row-major, [side, side]) after a cyclic shift by `shift`.
torch::Tensor window_ids(int64_t side, int64_t window, int64_t shift);

class WindowAttentionImpl : public torch::nn::Module {
public:
    WindowAttentionImpl(int64_t dim, int64_t window, int64_t heads);

    /// windows: [B*nW, N, C]; mask: [nW, N, N] additive or undefined.
    torch::Tensor forward(const torch::Tensor& windows, const torch::Tensor& mask);

    torch::nn::Linear qkv{nullptr}, proj{nullptr};
    torch::Tensor bias_table;  // [(2w-1)^2, heads]

private:
    int64_t heads_;
    int64_t window_;
    torch::Tensor bias_index_;  // [N, N]
};
TORCH_MODULE(WindowAttention);

class SwinBlockImpl : public torch::nn::Module {
public:
    SwinBlockImpl(int64_t dim, int64_t side, int64_t heads, int64_t window, int64_t shift, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);  // [B, H, W, C]

    int64_t window() const { return window_; }
    int64_t shift() const { return shift_; }

private:
    int64_t window_;
    int64_t shift_;
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    WindowAttention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};
    torch::Tensor mask_;
};
TORCH_MODULE(SwinBlock);

/// `depth` blocks alternating regular and shifted windows.
class SwinStageImpl : public torch::nn::Module {
public:
    SwinStageImpl(int64_t dim, int64_t side, int64_t depth, int64_t heads, int64_t window, int64_t mlp_ratio);
    torch::Tensor forward(torch::Tensor x);  // [B, H, W, C]

    torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(SwinStage);

/// Concatenates each 2x2 neighbourhood (4c) and reduces it linearly to 2c.
class PatchMergeImpl : public torch::nn::Module {
public:
    explicit PatchMergeImpl(int64_t dim);
    torch::Tensor forward(const torch::Tensor& x);  // [B, H, W, C] -> [B, H/2, W/2, 2C]

    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerge);

/// Residual branch and windowed-attention branch fused per scale by LGBP fusion.
/// The fused map is both the pyramid level and the next attention stage's input;
/// the residual branch keeps its own stream.
class DualEncoderImpl : public torch::nn::Module {
public:
    explicit DualEncoderImpl(const EncoderConfig& config);
    FeaturePyramid forward(const torch::Tensor& image);

    const EncoderConfig& config() const { return config_; }

    InitBlock stem{nullptr};
    torch::nn::ModuleList conv_stages{nullptr};
    torch::nn::ModuleList swin_stages{nullptr};
    torch::nn::ModuleList merges{nullptr};
    torch::nn::ModuleList fusions{nullptr};

private:
    EncoderConfig config_;
};
TORCH_MODULE(DualEncoder);

inline torch::Tensor nchw_to_nhwc(const torch::Tensor& x) { return x.permute({0, 2, 3, 1}).contiguous(); }
inline torch::Tensor nhwc_to_nchw(const torch::Tensor& x) { return x.permute({0, 3, 1, 2}).contiguous(); }

}  // namespace organet
