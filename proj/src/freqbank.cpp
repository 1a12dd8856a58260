#include "organet/freqbank.hpp"

#include <stdexcept>
#include <string>

namespace organet {

namespace {

torch::Tensor axis_frequencies(int64_t n) {
    // fftfreq ordering with unit sample spacing: [0, 1, ..., ceil(n/2)-1, -floor(n/2), ..., -1] / n
    auto idx = torch::arange(n, torch::kFloat64);
    auto shifted = torch::where(idx < static_cast<double>((n + 1) / 2), idx, idx - static_cast<double>(n));
    return shifted / static_cast<double>(n);
}

}  // namespace

FrequencyRadiusField make_radius_grid(int64_t height, int64_t width) {
    if (height < 1 || width < 1) {
        throw std::invalid_argument("make_radius_grid: dimensions must be positive, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    }
    auto fy = axis_frequencies(height).abs().unsqueeze(1);
    auto fx = axis_frequencies(width).abs().unsqueeze(0);
    return {height, width, torch::sqrt(fy * fy + fx * fx)};
}

FilterBankImpl::FilterBankImpl(FilterBankOptions options) {
    const int64_t k = options.bands;
    if (k < 1) throw std::invalid_argument("FilterBank: band count must be >= 1");

    std::vector<double> mu_init = options.mu_init;
    if (mu_init.empty()) {
        mu_init.resize(static_cast<size_t>(k));
        for (int64_t i = 0; i < k; ++i) {
            mu_init[static_cast<size_t>(i)] = k == 1 ? 0.05 : 0.05 + 0.45 * static_cast<double>(i) / static_cast<double>(k - 1);
        }
    }
    if (static_cast<int64_t>(mu_init.size()) != k) {
        throw std::invalid_argument("FilterBank: mu_init has " + std::to_string(mu_init.size()) +
                                    " entries for " + std::to_string(k) + " bands");
    }

    mu = register_parameter("mu", torch::tensor(mu_init, torch::kFloat32));
    sigma = register_parameter("sigma", torch::full({k}, options.sigma_init, torch::kFloat32));
    alpha = register_parameter("alpha", torch::full({k}, options.alpha_init, torch::kFloat32));
}

torch::Tensor eval_band(const FilterBankImpl& bank, int64_t band_index, const FrequencyRadiusField& grid) {
    if (band_index < 0 || band_index >= bank.bands()) {
        throw std::invalid_argument("eval_band: band index " + std::to_string(band_index) +
                                    " out of range for " + std::to_string(bank.bands()) + " bands");
    }
    auto r = grid.r.to(bank.mu.scalar_type());
    auto mu = bank.mu[band_index];
    auto sigma = bank.sigma[band_index].clamp_min(kSigmaMin);
    auto exponent = torch::relu(bank.alpha[band_index]);
    // exp(x)^a == exp(a*x); the product form keeps the gradient finite at a == 0.
    auto d = r - mu;
    return torch::exp(-exponent * d * d / (2.0 * sigma * sigma));
}

std::vector<torch::Tensor> decompose(const torch::Tensor& feature, const FilterBankImpl& bank) {
    if (feature.dim() < 2) throw std::invalid_argument("decompose: feature needs at least 2 dims");
    return decompose(feature, bank, make_radius_grid(feature.size(-2), feature.size(-1)));
}

std::vector<torch::Tensor> decompose(const torch::Tensor& feature, const FilterBankImpl& bank,
                                     const FrequencyRadiusField& grid) {
    if (feature.dim() < 2 || feature.size(-2) != grid.height || feature.size(-1) != grid.width) {
        throw std::invalid_argument("decompose: feature spatial dims do not match the radius grid");
    }
    auto spectrum = torch::fft::fft2(feature);
    std::vector<torch::Tensor> bands;
    bands.reserve(static_cast<size_t>(bank.bands()));
    for (int64_t k = 0; k < bank.bands(); ++k) {
        auto filtered = torch::fft::ifft2(spectrum * eval_band(bank, k, grid));
#ifndef NDEBUG
        {
            torch::NoGradGuard no_grad;
            const double residue = torch::imag(filtered).abs().max().item<double>();
            TORCH_CHECK(residue < 1e-4, "decompose: imaginary residue ", residue, " in band ", k);
        }
#endif
        bands.push_back(torch::real(filtered).contiguous());
    }
    return bands;
}

torch::Tensor reconstruct_sum(const std::vector<torch::Tensor>& bands) {
    if (bands.empty()) throw std::invalid_argument("reconstruct_sum: no bands");
    auto total = bands.front();
    for (size_t i = 1; i < bands.size(); ++i) {
        if (bands[i].sizes() != bands.front().sizes()) {
            throw std::invalid_argument("reconstruct_sum: band " + std::to_string(i) + " has mismatched shape");
        }
        total = total + bands[i];
    }
    return total;
}

}  // namespace organet
