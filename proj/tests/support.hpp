#pragma once

#include <torch/torch.h>

#include <cmath>
#include <functional>

namespace testing {

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

// Central differences of a scalar function with respect to every entry of x.
// x is perturbed in place and restored.
inline torch::Tensor numeric_grad(const std::function<torch::Tensor()>& f, torch::Tensor x, double h = 1e-6) {
    torch::NoGradGuard guard;
    auto flat = x.view(-1);
    auto grad = torch::zeros_like(flat);
    for (int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double up = f().item<double>();
        flat[i] = orig - h;
        const double down = f().item<double>();
        flat[i] = orig;
        grad[i] = (up - down) / (2 * h);
    }
    return grad.view_as(x);
}

inline torch::Tensor analytic_grad(const std::function<torch::Tensor()>& f, const torch::Tensor& x) {
    if (x.grad().defined()) x.mutable_grad().zero_();
    auto y = f();
    return torch::autograd::grad({y}, {x})[0];
}

// ||a - n|| / max(||n||, floor)
inline double rel_error(const torch::Tensor& analytic, const torch::Tensor& numeric, double floor = 1e-10) {
    const double diff = (analytic - numeric).norm().item<double>();
    return diff / std::max(numeric.norm().item<double>(), floor);
}

}  // namespace testing
