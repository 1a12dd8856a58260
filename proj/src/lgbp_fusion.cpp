#include "organet/lgbp_fusion.hpp"

#include "organet/errors.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace organet {

namespace {

// [B, C, H, W] -> [B, heads, N, C/heads]
torch::Tensor split_heads(const torch::Tensor& tokens, int64_t heads) {
    const auto b = tokens.size(0);
    const auto n = tokens.size(1);
    return tokens.view({b, n, heads, tokens.size(2) / heads}).transpose(1, 2);
}

torch::Tensor to_tokens(const torch::Tensor& map) { return map.flatten(2).transpose(1, 2); }

void check_pair(const torch::Tensor& a, const torch::Tensor& b, int64_t channels, const char* who) {
    if (a.dim() != 4 || a.sizes() != b.sizes()) {
        throw std::invalid_argument(std::string(who) + ": inputs must be matching NCHW tensors");
    }
    if (a.size(1) != channels) {
        throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(channels) +
                                    " channels, got " + std::to_string(a.size(1)));
    }
}

}  // namespace

BandCrossAttentionImpl::BandCrossAttentionImpl(int64_t channels, int64_t heads)
    : channels_(channels), heads_(heads), head_dim_(heads > 0 ? channels / heads : 0) {
    if (heads < 1 || channels % heads != 0) {
        throw std::invalid_argument("BandCrossAttention: " + std::to_string(channels) +
                                    " channels not divisible by " + std::to_string(heads) + " heads");
    }
    w_q = register_module("w_q", torch::nn::Linear(channels, channels));
    w_k = register_module("w_k", torch::nn::Linear(channels, channels));
    w_v = register_module("w_v", torch::nn::Linear(channels, channels));
}

torch::Tensor BandCrossAttentionImpl::attention_weights(const torch::Tensor& query_map,
                                                        const torch::Tensor& context_map) {
    check_pair(query_map, context_map, channels_, "band_cross_attention");
    auto q = split_heads(w_q(to_tokens(query_map)), heads_);
    auto k = split_heads(w_k(to_tokens(context_map)), heads_);
    auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim_));
    return torch::softmax(scores, -1);
}

torch::Tensor BandCrossAttentionImpl::forward(const torch::Tensor& query_map, const torch::Tensor& context_map) {
    check_pair(query_map, context_map, channels_, "band_cross_attention");
    auto q = split_heads(w_q(to_tokens(query_map)), heads_);
    auto k = split_heads(w_k(to_tokens(context_map)), heads_);
    auto v = split_heads(w_v(to_tokens(context_map)), heads_);
    // Same softmax(q k^T / sqrt(d)) v as attention_weights, through the fused kernel.
    auto out = at::scaled_dot_product_attention(q, k, v);  // [B, heads, N, d]
    const auto b = query_map.size(0);
    const auto h = query_map.size(2);
    const auto w = query_map.size(3);
    return out.transpose(1, 2).reshape({b, h * w, channels_}).transpose(1, 2).reshape({b, channels_, h, w});
}

LgbpFusionImpl::LgbpFusionImpl(LgbpFusionOptions options) : channels_(options.channels) {
    if (channels_ < 1) throw ConfigError("LgbpFusion: channel count must be positive");
    bank = register_module("bank", FilterBank(options.bank));
    band_attention = register_module("band_attention", torch::nn::ModuleList());
    for (int64_t k = 0; k < bank->bands(); ++k) {
        band_attention->push_back(BandCrossAttention(channels_, options.heads));
    }
    gate_conv = register_module("gate_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels_, channels_, 1)));
    concat_proj = register_module("concat_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels_, channels_, 1)));
}

LgbpTrace LgbpFusionImpl::forward_traced(const torch::Tensor& f_cnn, const torch::Tensor& f_trans) {
    check_pair(f_cnn, f_trans, channels_, "lgbp_forward");
    if (static_cast<int64_t>(band_attention->size()) != bank->bands()) {
        throw ConfigError("lgbp_forward: " + std::to_string(band_attention->size()) + " attention blocks for " +
                          std::to_string(bank->bands()) + " bands");
    }

    const auto grid = make_radius_grid(f_cnn.size(2), f_cnn.size(3));
    auto cnn_bands = decompose(f_cnn, *bank, grid);
    auto trans_bands = decompose(f_trans, *bank, grid);

    std::vector<torch::Tensor> attended;
    attended.reserve(cnn_bands.size());
    for (size_t k = 0; k < cnn_bands.size(); ++k) {
        attended.push_back(band_attention[k]->as<BandCrossAttention>()->forward(trans_bands[k], cnn_bands[k]));
    }

    LgbpTrace trace;
    trace.band_sum = reconstruct_sum(attended);
    trace.projected = concat_proj(torch::cat({f_cnn, f_trans}, 1));
    trace.gate = torch::sigmoid(gate_conv(torch::cat({f_trans, trace.band_sum}, 1)));
    trace.out = trace.gate * trace.band_sum + (1.0 - trace.gate) * trace.projected;
    return trace;
}

torch::Tensor LgbpFusionImpl::forward(const torch::Tensor& f_cnn, const torch::Tensor& f_trans) {
    return forward_traced(f_cnn, f_trans).out;
}

}  // namespace organet
