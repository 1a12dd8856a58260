#pragma once

#include <torch/torch.h>

#include <vector>

namespace organet {

/// Lower bound applied to every bandwidth before the Gaussian is evaluated.
inline constexpr double kSigmaMin = 1e-3;

/// Normalized frequency radius of every bin of an FFT grid.
///
/// Each axis uses the `fftfreq` ordering (0, 1/n, ..., -1/n) so the field lines
/// up with the output of torch::fft::fft2. Coordinates span [-0.5, 0.5], so
/// the largest radius is sqrt(0.5) at the Nyquist corner.
struct FrequencyRadiusField {
    int64_t height = 0;
    int64_t width = 0;
    torch::Tensor r;  // [height, width], float64
};

FrequencyRadiusField make_radius_grid(int64_t height, int64_t width);

struct FilterBankOptions {
    int64_t bands = 4;
    /// Empty means "spread evenly over [0.05, 0.5]".
    std::vector<double> mu_init;
    double sigma_init = 0.15;
    double alpha_init = 1.0;
};

/// K learnable Gaussian band-pass filters over the frequency radius.
///
/// Band k has gain exp(-(r - mu_k)^2 / (2 sigma_k^2))^max(0, alpha_k). A band
/// with alpha_k <= 0 is all-pass.
class FilterBankImpl : public torch::nn::Module {
public:
    explicit FilterBankImpl(FilterBankOptions options = {});

    int64_t bands() const { return mu.size(0); }

    torch::Tensor mu;     // [K]
    torch::Tensor sigma;  // [K]
    torch::Tensor alpha;  // [K]
};
TORCH_MODULE(FilterBank);

/// Gain of one band on `grid`, shaped [height, width] in the parameters' dtype.
torch::Tensor eval_band(const FilterBankImpl& bank, int64_t band_index, const FrequencyRadiusField& grid);

/// Splits `feature` ([..., H, W]) into K real sub-band maps of the same shape.
std::vector<torch::Tensor> decompose(const torch::Tensor& feature, const FilterBankImpl& bank);

/// Same as above with a precomputed grid; the grid must match the trailing dims.
std::vector<torch::Tensor> decompose(const torch::Tensor& feature, const FilterBankImpl& bank,
                                     const FrequencyRadiusField& grid);

/// Recombines band outputs. Linearity of the Fourier transform makes the
/// spatial sum identical to inverse(sum(forward(band))).
torch::Tensor reconstruct_sum(const std::vector<torch::Tensor>& bands);

}  // namespace organet
