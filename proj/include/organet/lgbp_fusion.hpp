#pragma once

#include "organet/freqbank.hpp"

#include <torch/torch.h>

namespace organet {

/// Multi-head scaled dot-product attention with queries from one stream and
/// keys/values from another. Inputs are NCHW maps; every spatial cell is a token.
class BandCrossAttentionImpl : public torch::nn::Module {
public:
    BandCrossAttentionImpl(int64_t channels, int64_t heads);

    /// query_map supplies Q, context_map supplies K and V. Output has the query's shape.
    torch::Tensor forward(const torch::Tensor& query_map, const torch::Tensor& context_map);

    /// Row-stochastic attention matrix, [B, heads, N, N].
    torch::Tensor attention_weights(const torch::Tensor& query_map, const torch::Tensor& context_map);

    int64_t heads() const { return heads_; }
    int64_t head_dim() const { return head_dim_; }

    torch::nn::Linear w_q{nullptr}, w_k{nullptr}, w_v{nullptr};

private:
    int64_t channels_;
    int64_t heads_;
    int64_t head_dim_;
};
TORCH_MODULE(BandCrossAttention);

struct LgbpFusionOptions {
    int64_t channels = 0;
    int64_t heads = 4;
    FilterBankOptions bank{};
};

/// Intermediate values of one fusion pass, for inspection and tests.
struct LgbpTrace {
    torch::Tensor band_sum;   // recombined per-band attention output
    torch::Tensor projected;  // 1x1 projection of [F_c, F_t]
    torch::Tensor gate;       // sigmoid gate, C channels
    torch::Tensor out;
};

/// Frequency-band fusion of a CNN stream and a transformer stream.
///
/// Both inputs are split into the filter bank's sub-bands; within each band the
/// transformer features attend over the CNN features. The recombined result is
/// blended with a 1x1 projection of the channel concatenation by a sigmoid gate
/// computed from [F_t, band_sum].
class LgbpFusionImpl : public torch::nn::Module {
public:
    explicit LgbpFusionImpl(LgbpFusionOptions options);

    torch::Tensor forward(const torch::Tensor& f_cnn, const torch::Tensor& f_trans);
    LgbpTrace forward_traced(const torch::Tensor& f_cnn, const torch::Tensor& f_trans);

    FilterBank bank{nullptr};
    torch::nn::ModuleList band_attention{nullptr};
    torch::nn::Conv2d gate_conv{nullptr};
    torch::nn::Conv2d concat_proj{nullptr};

private:
    int64_t channels_;
};
TORCH_MODULE(LgbpFusion);

}  // namespace organet
