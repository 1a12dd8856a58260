#include "doctest_torch.hpp"
#include "support.hpp"

#include "organet/freqbank.hpp"

#include <cmath>
#include <complex>
#include <vector>

using namespace organet;
using testing::max_abs_diff;

namespace {

FilterBank bank_with(std::vector<double> mu, std::vector<double> sigma, std::vector<double> alpha,
                     torch::Dtype dtype = torch::kFloat64) {
    FilterBankOptions opts;
    opts.bands = static_cast<int64_t>(mu.size());
    FilterBank bank(opts);
    bank->to(dtype);
    torch::NoGradGuard guard;
    bank->mu.copy_(torch::tensor(mu, torch::kFloat64));
    bank->sigma.copy_(torch::tensor(sigma, torch::kFloat64));
    bank->alpha.copy_(torch::tensor(alpha, torch::kFloat64));
    return bank;
}

// Direct O(N^2 M^2) DFT filter: sum_uv G(u,v) X(u,v) e^{...} / (HW), real part.
std::vector<double> naive_band(const std::vector<double>& x, int h, int w, double mu, double sigma, double alpha) {
    using cd = std::complex<double>;
    const double pi = std::acos(-1.0);
    auto freq = [](int i, int n) { return (i < (n + 1) / 2 ? i : i - n) / static_cast<double>(n); };
    std::vector<cd> spec(static_cast<size_t>(h * w));
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) {
            cd acc = 0;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    acc += x[y * w + xx] * std::polar(1.0, -2 * pi * (double(u * y) / h + double(v * xx) / w));
            const double r = std::hypot(freq(u, h), freq(v, w));
            const double s = std::max(sigma, kSigmaMin);
            spec[u * w + v] = acc * std::exp(-std::max(0.0, alpha) * (r - mu) * (r - mu) / (2 * s * s));
        }
    std::vector<double> out(static_cast<size_t>(h * w));
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            cd acc = 0;
            for (int u = 0; u < h; ++u)
                for (int v = 0; v < w; ++v)
                    acc += spec[u * w + v] * std::polar(1.0, 2 * pi * (double(u * y) / h + double(v * xx) / w));
            out[y * w + xx] = acc.real() / (h * w);
        }
    return out;
}

}  // namespace

TEST_CASE("radius grid follows fftfreq ordering") {
    auto g = make_radius_grid(4, 5);
    CHECK(g.r.dtype() == torch::kFloat64);
    CHECK(g.r.sizes() == torch::IntArrayRef({4, 5}));
    // rows: 0, .25, -.5, -.25; cols: 0, .2, .4, -.4, -.2
    CHECK(g.r[0][0].item<double>() == 0.0);
    CHECK(g.r[1][0].item<double>() == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(g.r[2][0].item<double>() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(g.r[0][3].item<double>() == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(g.r[2][2].item<double>() == doctest::Approx(std::sqrt(0.25 + 0.16)).epsilon(1e-15));
    CHECK(g.r[3][4].item<double>() == doctest::Approx(std::sqrt(0.0625 + 0.04)).epsilon(1e-15));

    auto sq = make_radius_grid(8, 8);
    CHECK(sq.r.max().item<double>() == doctest::Approx(std::sqrt(0.5)));
    CHECK(max_abs_diff(sq.r, sq.r.t()) == 0.0);
}

TEST_CASE("radius grid rejects empty dims") {
    CHECK_THROWS_AS(make_radius_grid(0, 4), std::invalid_argument);
    CHECK_THROWS_AS(make_radius_grid(4, -1), std::invalid_argument);
}

TEST_CASE("default bank spreads centres over [0.05, 0.5]") {
    FilterBank bank(FilterBankOptions{});
    CHECK(bank->bands() == 4);
    CHECK(bank->mu[0].item<double>() == doctest::Approx(0.05));
    CHECK(bank->mu[3].item<double>() == doctest::Approx(0.5));
    CHECK(bank->parameters().size() == 3);
    FilterBankOptions bad;
    bad.bands = 3;
    bad.mu_init = {0.1, 0.2};
    CHECK_THROWS_AS(FilterBank{bad}, std::invalid_argument);
}

TEST_CASE("eval_band gains") {
    auto grid = make_radius_grid(8, 8);  // r[0][0] = 0, r[0][2] = 0.25
    SUBCASE("one sigma away gives exp(-1/2)") {
        auto bank = bank_with({0.25}, {0.25}, {1.0});
        auto g = eval_band(*bank, 0, grid);
        CHECK(g[0][0].item<double>() == doctest::Approx(0.6065306597).epsilon(1e-7));
        CHECK(g[0][2].item<double>() == doctest::Approx(1.0));
    }
    SUBCASE("alpha sharpens as an exponent") {
        auto bank = bank_with({0.25}, {0.25}, {2.0});
        CHECK(eval_band(*bank, 0, grid)[0][0].item<double>() == doctest::Approx(std::exp(-1.0)).epsilon(1e-7));
    }
    SUBCASE("non-positive alpha is all-pass") {
        auto bank = bank_with({0.1, 0.3}, {0.05, 0.2}, {0.0, -2.0});
        CHECK(eval_band(*bank, 0, grid).eq(1.0).all().item<bool>());
        CHECK(eval_band(*bank, 1, grid).eq(1.0).all().item<bool>());
    }
    SUBCASE("zero sigma is clamped, never NaN") {
        auto bank = bank_with({0.25}, {0.0}, {1.0});
        auto g = eval_band(*bank, 0, grid);
        CHECK_FALSE(g.isnan().any().item<bool>());
        CHECK(g[0][2].item<double>() == 1.0);
        CHECK(g[0][0].item<double>() == 0.0);
    }
    SUBCASE("range check") {
        auto bank = bank_with({0.25}, {0.1}, {1.0});
        CHECK_THROWS_AS(eval_band(*bank, 1, grid), std::invalid_argument);
        CHECK_THROWS_AS(eval_band(*bank, -1, grid), std::invalid_argument);
    }
    SUBCASE("gains lie in (0, 1]") {
        FilterBank bank(FilterBankOptions{});
        for (int64_t k = 0; k < 4; ++k) {
            auto g = eval_band(*bank, k, grid);
            CHECK(g.le(1.0).all().item<bool>());
            CHECK(g.gt(0.0).all().item<bool>());
        }
    }
}

TEST_CASE("decompose matches a direct DFT filter") {
    torch::manual_seed(3);
    const int h = 5, w = 6;
    auto x = torch::randn({h, w}, torch::kFloat64);
    auto bank = bank_with({0.15, 0.4}, {0.1, 0.2}, {1.5, 0.7});
    auto bands = decompose(x, *bank);
    REQUIRE(bands.size() == 2);
    std::vector<double> xv(x.data_ptr<double>(), x.data_ptr<double>() + h * w);
    const double mus[] = {0.15, 0.4}, sigmas[] = {0.1, 0.2}, alphas[] = {1.5, 0.7};
    for (int k = 0; k < 2; ++k) {
        auto ref = naive_band(xv, h, w, mus[k], sigmas[k], alphas[k]);
        auto got = bands[k].contiguous();
        double err = 0;
        for (int i = 0; i < h * w; ++i) err = std::max(err, std::abs(got.data_ptr<double>()[i] - ref[i]));
        CHECK(err < 1e-12);
    }
}

TEST_CASE("decompose keeps leading dims and rejects bad input") {
    FilterBank bank(FilterBankOptions{});
    auto x = torch::randn({2, 3, 7, 9});
    auto bands = decompose(x, *bank);
    CHECK(bands.size() == 4);
    for (const auto& b : bands) {
        CHECK(b.sizes() == x.sizes());
        CHECK(b.is_floating_point());
    }
    CHECK_THROWS_AS(decompose(torch::randn({5}), *bank), std::invalid_argument);
    CHECK_THROWS_AS(decompose(x, *bank, make_radius_grid(7, 8)), std::invalid_argument);
}

TEST_CASE("reconstruct_sum") {
    auto a = torch::randn({2, 3});
    auto b = torch::randn({2, 3});
    CHECK(max_abs_diff(reconstruct_sum({a, b}), a + b) == 0.0);
    CHECK_THROWS_AS(reconstruct_sum({}), std::invalid_argument);
    CHECK_THROWS_AS(reconstruct_sum({a, torch::randn({3, 2})}), std::invalid_argument);
}

TEST_CASE("band sum of a low-pass and its complement is the identity") {
    // Gains g and 1-g are not both Gaussians, so build them by hand on the spectrum.
    torch::manual_seed(5);
    auto x = torch::randn({4, 12, 12}, torch::kFloat64);
    auto bank = bank_with({0.0}, {0.2}, {1.0});
    auto grid = make_radius_grid(12, 12);
    auto g = eval_band(*bank, 0, grid);
    auto low = decompose(x, *bank, grid)[0];
    auto high = torch::real(torch::fft::ifft2(torch::fft::fft2(x) * (1.0 - g)));
    CHECK(max_abs_diff(reconstruct_sum({low, high}), x) < 1e-12);
}

TEST_CASE("filter parameter gradients match finite differences") {
    torch::manual_seed(11);
    auto bank = bank_with({0.2, 0.35}, {0.12, 0.3}, {1.3, 0.8});
    auto grid = make_radius_grid(6, 7);
    auto x = torch::randn({2, 6, 7}, torch::kFloat64);
    auto weights = torch::randn({2, 2, 6, 7}, torch::kFloat64);
    auto f = [&] {
        auto bands = decompose(x, *bank, grid);
        return (torch::stack(bands, 1) * weights).sum() + eval_band(*bank, 1, grid).pow(2).sum();
    };
    for (auto* p : {&bank->mu, &bank->sigma, &bank->alpha}) {
        auto a = testing::analytic_grad(f, *p);
        auto n = testing::numeric_grad(f, *p);
        CHECK(testing::rel_error(a, n) < 1e-6);
    }
}
