#pragma once

#include <torch/torch.h>

namespace organet {

struct LossWeights {
    double lambda_iq = 0.5;
    double lambda_dice = 0.6;
    double lambda_focal = 0.4;
    double dice_smooth = 1.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    /// Throws ConfigError on any negative field.
    void validate() const;
};

inline constexpr double kAreaEpsilon = 1e-6;
inline constexpr double kProbClamp = 1e-7;

// All losses take foreground probabilities shaped [..., H, W]. Per-image values
// are averaged over the leading dims; a plain [H, W] map is a single image.

/// Isoperimetric quotient: sum(dx^2 + dy^2) / (4 pi (sum p + eps_area)).
/// dx, dy are forward differences with a zero border, so the last column's dx
/// is -p. Not scale invariant; the numerator grows with perimeter, not perimeter^2.
torch::Tensor iq_loss(const torch::Tensor& pred);

/// Soft Dice: 1 - (2 sum(p y) + eps) / (sum p + sum y + eps).
torch::Tensor dice_loss(const torch::Tensor& pred, const torch::Tensor& target, double smooth = 1.0);

/// Mean over pixels of -alpha (1 - p_t)^gamma log(p_t), p_t the true-class probability.
torch::Tensor focal_loss(const torch::Tensor& pred, const torch::Tensor& target, double alpha = 0.25,
                         double gamma = 2.0);

struct LossBreakdown {
    torch::Tensor total, iq, dice, focal;
};

LossBreakdown total_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& weights);

}  // namespace organet
