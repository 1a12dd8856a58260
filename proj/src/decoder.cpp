#include "organet/decoder.hpp"

#include "organet/errors.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace organet {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

torch::Tensor upsample2x(const torch::Tensor& x, double factor = 2.0) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{factor, factor})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

// [B, N, C] -> [B, heads, N, C/heads]
torch::Tensor heads_view(const torch::Tensor& t, int64_t heads) {
    return t.view({t.size(0), t.size(1), heads, t.size(2) / heads}).transpose(1, 2);
}

}  // namespace

PatchExpandImpl::PatchExpandImpl(int64_t channels) {
    if (channels < 2 || channels % 2 != 0) {
        throw std::invalid_argument("patch_expand: channel count must be even, got " + std::to_string(channels));
    }
    expand = register_module("expand", nn::Linear(nn::LinearOptions(channels, 2 * channels).bias(false)));
}

torch::Tensor PatchExpandImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(3) % 2 != 0) {
        throw std::invalid_argument("patch_expand: expected [B, s, s, c] with even c");
    }
    const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
    auto y = expand(x);                                    // [B, h, w, 2c]
    y = y.view({b, h, w, 2, 2, c / 2});                     // (p1 p2 c')
    y = y.permute({0, 1, 3, 2, 4, 5}).reshape({b, 2 * h, 2 * w, c / 2});
    return y;
}

BcfBlockImpl::BcfBlockImpl(BcfOptions options)
    : channels_(options.channels), side_(options.side), heads_(options.heads) {
    const auto c = channels_;
    if (c < 1 || side_ < 1) throw ConfigError("BCF: channels and side must be positive");
    if (heads_ < 1 || c % heads_ != 0) {
        throw ConfigError("BCF: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads_) + " heads");
    }
    upsample = register_module("upsample", PatchExpand(2 * c));
    norm_high = register_module("norm_high", nn::LayerNorm(nn::LayerNormOptions({c})));
    norm_low = register_module("norm_low", nn::LayerNorm(nn::LayerNormOptions({c})));
    const auto hidden = options.prefuse_hidden_mult * c;
    prefuse = register_module("prefuse", nn::Sequential(nn::Linear(2 * c, hidden), nn::GELU(), nn::Linear(hidden, c)));
    q_h = register_module("q_h", nn::Linear(c, c));
    k_h = register_module("k_h", nn::Linear(c, c));
    v_h = register_module("v_h", nn::Linear(c, c));
    q_l = register_module("q_l", nn::Linear(c, c));
    k_l = register_module("k_l", nn::Linear(c, c));
    v_l = register_module("v_l", nn::Linear(c, c));
    proj_h2l = register_module("proj_h2l", nn::Linear(c, c));
    proj_l2h = register_module("proj_l2h", nn::Linear(c, c));
    gate_mlp = register_module("gate_mlp", nn::Sequential(nn::Linear(2 * c, c), nn::GELU(), nn::Linear(c, 1)));
    {
        torch::NoGradGuard no_grad;
        gate_mlp[2]->as<nn::Linear>()->bias.zero_();
    }
    out_proj = register_module("out_proj", nn::Linear(2 * c, c));

    const int64_t span = 2 * side_ - 1;
    bias_table = register_parameter("bias_table", torch::randn({span * span, heads_}) * 0.02);
    gamma_h2l = register_parameter("gamma_h2l", torch::full({1}, options.gamma_init));
    gamma_l2h = register_parameter("gamma_l2h", torch::full({1}, options.gamma_init));
}

torch::Tensor BcfBlockImpl::relative_bias() const {
    // Offsets between every pair of grid cells, shifted to be non-negative.
    auto ys = torch::arange(side_).repeat_interleave(side_);
    auto xs = torch::arange(side_).repeat({side_});
    auto dy = ys.unsqueeze(1) - ys.unsqueeze(0) + (side_ - 1);
    auto dx = xs.unsqueeze(1) - xs.unsqueeze(0) + (side_ - 1);
    auto index = (dy * (2 * side_ - 1) + dx).flatten();
    const auto n = side_ * side_;
    return bias_table.index_select(0, index).view({n, n, heads_}).permute({2, 0, 1});  // [heads, N, N]
}

torch::Tensor BcfBlockImpl::attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                   const torch::Tensor& bias, torch::Tensor* weights) const {
    const auto d = channels_ / heads_;
    auto qh = heads_view(q, heads_);
    auto kh = heads_view(k, heads_);
    auto vh = heads_view(v, heads_);
    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)) + bias.unsqueeze(0);
    auto attn = torch::softmax(scores, -1);
    if (weights) *weights = attn;
    auto out = torch::matmul(attn, vh);  // [B, heads, N, d]
    return out.transpose(1, 2).reshape({q.size(0), q.size(1), channels_});
}

BcfTrace BcfBlockImpl::forward_traced(const torch::Tensor& p_high, const torch::Tensor& p_low, bool keep_attention) {
    if (p_high.dim() != 4 || p_low.dim() != 4 || p_high.size(1) != channels_ || p_high.size(2) != side_ ||
        p_high.size(3) != side_ || p_low.size(0) != p_high.size(0) || p_low.size(1) != 2 * channels_ ||
        p_low.size(2) * 2 != side_ || p_low.size(3) * 2 != side_) {
        throw std::invalid_argument("bcf_forward: expected P_high [B, " + std::to_string(channels_) + ", " +
                                    std::to_string(side_) + ", " + std::to_string(side_) + "] and P_low [B, " +
                                    std::to_string(2 * channels_) + ", " + std::to_string(side_ / 2) + ", " +
                                    std::to_string(side_ / 2) + "]");
    }
    const auto b = p_high.size(0);
    const auto n = side_ * side_;

    auto high = nchw_to_nhwc(p_high).view({b, n, channels_});
    auto low_up = upsample(nchw_to_nhwc(p_low)).reshape({b, n, channels_});
    auto high_n = norm_high(high);
    auto low_n = norm_low(low_up);
    auto cross = prefuse->forward(torch::cat({high_n, low_n}, -1));  // P_{1,2}

    const auto bias = relative_bias();
    BcfTrace trace;
    auto h2l = attend(q_h(high_n), k_h(low_n), v_h(low_n), bias, keep_attention ? &trace.attn_h2l : nullptr);
    auto l2h = attend(q_l(low_n), k_l(cross), v_l(cross), bias, keep_attention ? &trace.attn_l2h : nullptr);
    trace.o_h2l = gamma_h2l * proj_h2l(h2l);
    trace.o_l2h = gamma_l2h * proj_l2h(l2h);
    trace.gate = torch::sigmoid(gate_mlp->forward(torch::cat({trace.o_h2l, trace.o_l2h}, -1)));
    trace.mixed = trace.gate * trace.o_h2l + (1.0 - trace.gate) * trace.o_l2h;
    auto residual = trace.mixed + high;
    auto fused = out_proj(torch::cat({residual, high}, -1));
    trace.out = fused.transpose(1, 2).reshape({b, channels_, side_, side_});
    return trace;
}

torch::Tensor BcfBlockImpl::forward(const torch::Tensor& p_high, const torch::Tensor& p_low) {
    return forward_traced(p_high, p_low).out;
}

nn::Sequential conv_block(int64_t in_channels, int64_t out_channels) {
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1).bias(false)),
                          nn::BatchNorm2d(out_channels), nn::ReLU(),
                          nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)),
                          nn::BatchNorm2d(out_channels), nn::ReLU());
}

DecoderImpl::DecoderImpl(int64_t base_channels, int64_t input_size)
    : base_channels_(base_channels), input_size_(input_size) {
    const auto c = base_channels;
    conv_0_1 = register_module("conv_0_1", conv_block(3 * c, c));
    conv_1_2 = register_module("conv_1_2", conv_block(6 * c, 2 * c));
    final_conv = register_module("final_conv", conv_block(4 * c, c));
    seg_head = register_module("seg_head", nn::Conv2d(nn::Conv2dOptions(c, 2, 1)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& p0f, const torch::Tensor& p1f, const torch::Tensor& p2) {
    const auto c = base_channels_;
    const auto s0 = input_size_ / 4;
    if (p0f.dim() != 4 || p1f.dim() != 4 || p2.dim() != 4 || p0f.size(1) != c || p1f.size(1) != 2 * c ||
        p2.size(1) != 4 * c || p0f.size(2) != s0 || p1f.size(2) != s0 / 2 || p2.size(2) != s0 / 4) {
        throw std::invalid_argument("decoder_forward: pyramid does not match the configured geometry");
    }
    auto p01 = conv_0_1->forward(torch::cat({upsample2x(p1f), p0f}, 1));
    auto p12 = conv_1_2->forward(torch::cat({upsample2x(p2), p1f}, 1));
    auto fin = final_conv->forward(torch::cat({upsample2x(p12), p01, p0f}, 1));
    // The 1x1 head commutes with bilinear upsampling, so it runs on the small grid.
    return upsample2x(seg_head(fin), 4.0);
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.encoder = EncoderConfig::toy();
    return c;
}

void ModelConfig::validate() const {
    encoder.validate();
    for (int i = 0; i < 2; ++i) {
        if (bcf_heads < 1 || encoder.channels(i) % bcf_heads != 0) {
            throw ConfigError("model: BCF width " + std::to_string(encoder.channels(i)) + " not divisible by " +
                              std::to_string(bcf_heads) + " heads");
        }
    }
    if (prefuse_hidden_mult < 1) throw ConfigError("model: prefuse_hidden_mult must be positive");
}

OrgaNetImpl::OrgaNetImpl(const ModelConfig& config) : config_(config) {
    config_.validate();
    const auto& e = config_.encoder;
    encoder = register_module("encoder", DualEncoder(e));
    BcfOptions o01{e.channels(0), e.side(0), config_.bcf_heads, config_.prefuse_hidden_mult, config_.gamma_init};
    BcfOptions o12{e.channels(1), e.side(1), config_.bcf_heads, config_.prefuse_hidden_mult, config_.gamma_init};
    bcf01 = register_module("bcf01", BcfBlock(o01));
    bcf12 = register_module("bcf12", BcfBlock(o12));
    decoder = register_module("decoder", Decoder(e.base_channels, e.input_size));
}

torch::Tensor OrgaNetImpl::forward(const torch::Tensor& image) {
    auto pyramid = encoder(image);
    auto p0f = bcf01(pyramid.p0, pyramid.p1);
    auto p1f = bcf12(pyramid.p1, pyramid.p2);
    return decoder(p0f, p1f, pyramid.p2);
}

torch::Tensor model_forward(OrgaNet& model, const torch::Tensor& image) {
    return torch::softmax(model->forward(image), 1);
}

}  // namespace organet
