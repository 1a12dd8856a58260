#include "organet/losses.hpp"

#include "organet/errors.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace organet {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
    for (double v : {lambda_iq, lambda_dice, lambda_focal, dice_smooth, focal_alpha, focal_gamma}) {
        if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and nonnegative");
    }
}

namespace {

// [..., H, W] -> [images, H, W]
torch::Tensor as_batch(const torch::Tensor& t) {
    if (t.dim() < 2) throw std::invalid_argument("loss: expected a [..., H, W] map");
    return t.reshape({-1, t.size(-2), t.size(-1)});
}

}  // namespace

torch::Tensor iq_loss(const torch::Tensor& pred) {
    auto p = as_batch(pred);
    // Zero-pad one row/column at the far edge, then difference forward.
    auto padded = F::pad(p, F::PadFuncOptions({0, 1, 0, 1}));
    using torch::indexing::Slice;
    auto dx = padded.index({Slice(), Slice(0, -1), Slice(1, torch::indexing::None)}) - p;
    auto dy = padded.index({Slice(), Slice(1, torch::indexing::None), Slice(0, -1)}) - p;
    auto numerator = (dx * dx + dy * dy).sum({1, 2});
    auto denominator = 4.0 * std::numbers::pi * (p.sum({1, 2}) + kAreaEpsilon);
    return (numerator / denominator).mean();
}

torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth) {
    if (pred.sizes() != target.sizes()) throw std::invalid_argument("dice_loss: prediction and target shapes differ");
    auto p = as_batch(pred);
    auto y = as_batch(target).to(p.scalar_type());
    auto inter = (p * y).sum({1, 2});
    auto dice = (2.0 * inter + smooth) / (p.sum({1, 2}) + y.sum({1, 2}) + smooth);
    return (1.0 - dice).mean();
}

torch::Tensor focal_loss(const torch::Tensor& pred, const torch::Tensor& target, double alpha, double gamma) {
    if (pred.sizes() != target.sizes()) throw std::invalid_argument("focal_loss: prediction and target shapes differ");
    auto p = pred.clamp(kProbClamp, 1.0 - kProbClamp);
    auto y = target.to(p.scalar_type());
    auto p_t = y * p + (1.0 - y) * (1.0 - p);
    auto modulator = gamma == 0.0 ? torch::ones_like(p_t) : torch::pow(1.0 - p_t, gamma);
    return (-alpha * modulator * torch::log(p_t)).mean();
}

LossBreakdown total_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights) {
    weights.validate();
    LossBreakdown out;
    out.iq = iq_loss(pred);
    out.dice = dice_loss(pred, target, weights.dice_smooth);
    out.focal = focal_loss(pred, target, weights.focal_alpha, weights.focal_gamma);
    out.total = weights.lambda_iq * out.iq + weights.lambda_dice * out.dice + weights.lambda_focal * out.focal;
    return out;
}

}  // namespace organet
