#include "organet/encoder.hpp"

#include "organet/errors.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace organet {

namespace nn = torch::nn;

EncoderConfig EncoderConfig::toy() {
    EncoderConfig c;
    c.base_channels = 32;
    c.input_size = 112;
    c.stage_heads = {2, 4, 8};
    c.conv_width = 16;
    c.conv_blocks = {1, 1, 1};
    return c;
}

void EncoderConfig::validate() const {
    if (base_channels < 1) throw ConfigError("encoder: base_channels must be positive");
    if (window < 1) throw ConfigError("encoder: window must be positive");
    if (input_size < 1 || input_size % (16 * window) != 0) {
        throw ConfigError("encoder: input_size " + std::to_string(input_size) +
                          " must be a positive multiple of 16*window = " + std::to_string(16 * window) +
                          " so that input/4, input/8 and input/16 are divisible by the window");
    }
    if (conv_width < 1 || mlp_ratio < 1 || fusion_bands < 1) {
        throw ConfigError("encoder: conv_width, mlp_ratio and fusion_bands must be positive");
    }
    for (int i = 0; i < 3; ++i) {
        const auto c = channels(i);
        if (stage_depths[i] < 1 || conv_blocks[i] < 1) throw ConfigError("encoder: stage depths must be positive");
        if (stage_heads[i] < 1 || c % stage_heads[i] != 0) {
            throw ConfigError("encoder: stage " + std::to_string(i) + " width " + std::to_string(c) +
                              " not divisible by " + std::to_string(stage_heads[i]) + " heads");
        }
        if (fusion_heads < 1 || c % fusion_heads != 0) {
            throw ConfigError("encoder: stage " + std::to_string(i) + " width " + std::to_string(c) +
                              " not divisible by " + std::to_string(fusion_heads) + " fusion heads");
        }
    }
}

// ---------------------------------------------------------------------------
// Residual branch

InitBlockImpl::InitBlockImpl(const EncoderConfig& config) : divisor_(16 * config.window) {
    conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(3, config.base_channels, 7).stride(2).padding(3).bias(false)));
    bn = register_module("bn", nn::BatchNorm2d(config.base_channels));
}

torch::Tensor InitBlockImpl::forward(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 3) {
        throw std::invalid_argument("init_block: expected a [B, 3, H, W] image batch");
    }
    if (image.size(2) % divisor_ != 0 || image.size(3) % divisor_ != 0) {
        throw ConfigError("init_block: image " + std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)) +
                          " is not divisible by 16*window = " + std::to_string(divisor_));
    }
    auto x = torch::relu(bn(conv(image)));
    return torch::max_pool2d(x, 3, 2, 1);
}

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride) {
    const int64_t out = width * kExpansion;
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, width, 1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(width));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(width, width, 3).stride(stride).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(width));
    conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(width, out, 1).bias(false)));
    bn3 = register_module("bn3", nn::BatchNorm2d(out));
    if (stride != 1 || in_channels != out) {
        downsample = register_module(
            "downsample", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out, 1).stride(stride).bias(false)),
                                         nn::BatchNorm2d(out)));
    }
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(y + identity);
}

ResNetStageImpl::ResNetStageImpl(int64_t in_channels, int64_t width, int64_t blocks_count, int64_t stride,
                                 int64_t aligned_channels)
    : width_(width) {
    blocks = register_module("blocks", nn::Sequential());
    for (int64_t i = 0; i < blocks_count; ++i) {
        blocks->push_back(Bottleneck(i == 0 ? in_channels : out_channels(), width, i == 0 ? stride : 1));
    }
    align = register_module("align", nn::Conv2d(nn::Conv2dOptions(out_channels(), aligned_channels, 1)));
}

std::pair<torch::Tensor, torch::Tensor> ResNetStageImpl::forward(const torch::Tensor& x) {
    auto raw = blocks->forward(x);
    return {raw, align(raw)};
}

// ---------------------------------------------------------------------------
// Windowed attention branch

torch::Tensor window_partition(const torch::Tensor& x, int64_t window) {
    const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
    if (h % window != 0 || w % window != 0) {
        throw ConfigError("window_partition: " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by window " + std::to_string(window));
    }
    return x.view({b, h / window, window, w / window, window, c})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({-1, window * window, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, int64_t window, int64_t height, int64_t width) {
    const auto c = windows.size(-1);
    const auto b = windows.size(0) / ((height / window) * (width / window));
    return windows.view({b, height / window, width / window, window, window, c})
        .permute({0, 1, 3, 2, 4, 5})
        .reshape({b, height, width, c});
}

torch::Tensor window_ids(int64_t side, int64_t window, int64_t shift) {
    if (window < 1 || side % window != 0) {
        throw ConfigError("window_ids: side " + std::to_string(side) + " not divisible by window " + std::to_string(window));
    }
    auto ids = torch::empty({side, side}, torch::kInt64);
    auto acc = ids.accessor<int64_t, 2>();
    const int64_t per_row = side / window;
    for (int64_t i = 0; i < side; ++i) {
        for (int64_t j = 0; j < side; ++j) {
            // roll(-shift) moves token (i, j) to ((i - shift) mod side, (j - shift) mod side)
            const int64_t ri = ((i - shift) % side + side) % side;
            const int64_t rj = ((j - shift) % side + side) % side;
            acc[i][j] = (ri / window) * per_row + rj / window;
        }
    }
    return ids;
}

WindowAttentionImpl::WindowAttentionImpl(int64_t dim, int64_t window, int64_t heads) : heads_(heads), window_(window) {
    if (dim % heads != 0) {
        throw ConfigError("WindowAttention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads));
    }
    qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
    proj = register_module("proj", nn::Linear(dim, dim));
    const int64_t span = 2 * window - 1;
    bias_table = register_parameter("bias_table", torch::randn({span * span, heads}) * 0.02);

    auto coords = torch::stack(torch::meshgrid({torch::arange(window), torch::arange(window)}, "ij")).flatten(1);  // [2, N]
    auto rel = (coords.unsqueeze(2) - coords.unsqueeze(1)) + (window - 1);  // [2, N, N]
    bias_index_ = (rel[0] * span + rel[1]).contiguous();
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& windows, const torch::Tensor& mask) {
    const auto bw = windows.size(0), n = windows.size(1), c = windows.size(2);
    const auto d = c / heads_;
    auto qkv_t = qkv(windows).view({bw, n, 3, heads_, d}).permute({2, 0, 3, 1, 4});
    auto q = qkv_t[0] / std::sqrt(static_cast<double>(d));
    auto k = qkv_t[1];
    auto v = qkv_t[2];
    auto attn = torch::matmul(q, k.transpose(-2, -1));  // [bw, heads, n, n]
    auto bias = bias_table.index_select(0, bias_index_.flatten()).view({n, n, heads_}).permute({2, 0, 1});
    attn = attn + bias.unsqueeze(0);
    if (mask.defined()) {
        const auto nw = mask.size(0);
        attn = attn.view({bw / nw, nw, heads_, n, n}) + mask.to(attn.scalar_type()).unsqueeze(1).unsqueeze(0);
        attn = attn.view({bw, heads_, n, n});
    }
    attn = torch::softmax(attn, -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({bw, n, c});
    return proj(out);
}

SwinBlockImpl::SwinBlockImpl(int64_t dim, int64_t side, int64_t heads, int64_t window, int64_t shift, int64_t mlp_ratio)
    : window_(window), shift_(shift) {
    if (side <= window) {
        // A single window covers the map; shifting would only permute it.
        window_ = side;
        shift_ = 0;
    }
    if (side % window_ != 0) {
        throw ConfigError("swin_stage: side " + std::to_string(side) + " not divisible by window " + std::to_string(window_));
    }
    norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
    attn = register_module("attn", WindowAttention(dim, window_, heads));
    norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
    mlp = register_module("mlp", nn::Sequential(nn::Linear(dim, dim * mlp_ratio), nn::GELU(), nn::Linear(dim * mlp_ratio, dim)));

    if (shift_ > 0) {
        // Tokens that land in one window after the roll but came from different
        // image regions must not attend to each other.
        auto region = torch::zeros({1, side, side, 1});
        const std::array<std::pair<int64_t, int64_t>, 3> spans{
            std::pair<int64_t, int64_t>{0, side - window_}, {side - window_, side - shift_}, {side - shift_, side}};
        int64_t label = 0;
        for (auto [h0, h1] : spans) {
            for (auto [w0, w1] : spans) {
                region.slice(1, h0, h1).slice(2, w0, w1).fill_(static_cast<double>(label++));
            }
        }
        auto ids = window_partition(region, window_).squeeze(-1);  // [nW, N]
        auto diff = ids.unsqueeze(1) - ids.unsqueeze(2);
        mask_ = torch::where(diff != 0, torch::full_like(diff, -100.0), torch::zeros_like(diff));
    }
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
    const auto h = x.size(1), w = x.size(2), c = x.size(3);
    auto y = norm1(x);
    if (shift_ > 0) y = torch::roll(y, {-shift_, -shift_}, {1, 2});
    auto windows = window_partition(y, window_);
    windows = attn(windows, mask_);
    y = window_reverse(windows.view({-1, window_ * window_, c}), window_, h, w);
    if (shift_ > 0) y = torch::roll(y, {shift_, shift_}, {1, 2});
    auto out = x + y;
    return out + mlp->forward(norm2(out));
}

SwinStageImpl::SwinStageImpl(int64_t dim, int64_t side, int64_t depth, int64_t heads, int64_t window, int64_t mlp_ratio) {
    if (side % window != 0 && side > window) {
        throw ConfigError("swin_stage: side " + std::to_string(side) + " not divisible by window " + std::to_string(window));
    }
    blocks = register_module("blocks", nn::ModuleList());
    for (int64_t i = 0; i < depth; ++i) {
        blocks->push_back(SwinBlock(dim, side, heads, window, i % 2 == 0 ? 0 : window / 2, mlp_ratio));
    }
}

torch::Tensor SwinStageImpl::forward(torch::Tensor x) {
    for (const auto& block : *blocks) x = block->as<SwinBlock>()->forward(x);
    return x;
}

PatchMergeImpl::PatchMergeImpl(int64_t dim) {
    norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({4 * dim})));
    reduction = register_module("reduction", nn::Linear(nn::LinearOptions(4 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergeImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) % 2 != 0 || x.size(2) % 2 != 0) {
        throw std::invalid_argument("patch_merge: spatial side must be even, got " + std::to_string(x.size(1)) + "x" +
                                    std::to_string(x.size(2)));
    }
    using torch::indexing::Slice;
    auto x0 = x.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
    auto x1 = x.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(0, torch::indexing::None, 2)});
    auto x2 = x.index({Slice(), Slice(0, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)});
    auto x3 = x.index({Slice(), Slice(1, torch::indexing::None, 2), Slice(1, torch::indexing::None, 2)});
    return reduction(norm(torch::cat({x0, x1, x2, x3}, -1)));
}

// ---------------------------------------------------------------------------

DualEncoderImpl::DualEncoderImpl(const EncoderConfig& config) : config_(config) {
    config_.validate();
    stem = register_module("stem", InitBlock(config_));
    conv_stages = register_module("conv_stages", nn::ModuleList());
    swin_stages = register_module("swin_stages", nn::ModuleList());
    merges = register_module("merges", nn::ModuleList());
    fusions = register_module("fusions", nn::ModuleList());

    int64_t conv_in = config_.base_channels;
    for (int i = 0; i < 3; ++i) {
        const int64_t width = config_.conv_width << i;
        auto stage = ResNetStage(conv_in, width, config_.conv_blocks[i], i == 0 ? 1 : 2, config_.channels(i));
        conv_in = stage->out_channels();
        conv_stages->push_back(stage);
        swin_stages->push_back(SwinStage(config_.channels(i), config_.side(i), config_.stage_depths[i],
                                         config_.stage_heads[i], config_.window, config_.mlp_ratio));
        LgbpFusionOptions fopts;
        fopts.channels = config_.channels(i);
        fopts.heads = config_.fusion_heads;
        fopts.bank.bands = config_.fusion_bands;
        fusions->push_back(LgbpFusion(fopts));
        if (i < 2) merges->push_back(PatchMerge(config_.channels(i)));
    }
}

FeaturePyramid DualEncoderImpl::forward(const torch::Tensor& image) {
    auto x = stem(image);
    if (image.size(2) != config_.input_size || image.size(3) != config_.input_size) {
        throw ConfigError("encoder: expected [B, 3, " + std::to_string(config_.input_size) + ", " +
                          std::to_string(config_.input_size) + "] input");
    }
    torch::Tensor conv_stream = x;
    torch::Tensor trans_stream = nchw_to_nhwc(x);
    std::array<torch::Tensor, 3> levels;
    for (size_t i = 0; i < 3; ++i) {
        auto [raw, aligned] = conv_stages[i]->as<ResNetStage>()->forward(conv_stream);
        conv_stream = raw;
        auto t = nhwc_to_nchw(swin_stages[i]->as<SwinStage>()->forward(trans_stream));
        levels[i] = fusions[i]->as<LgbpFusion>()->forward(aligned, t);
        if (i < 2) trans_stream = merges[i]->as<PatchMerge>()->forward(nchw_to_nhwc(levels[i]));
    }
    return {levels[0], levels[1], levels[2]};
}

}  // namespace organet
