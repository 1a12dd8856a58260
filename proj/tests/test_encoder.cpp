#include "doctest_torch.hpp"
#include "support.hpp"

#include "organet/encoder.hpp"
#include "organet/errors.hpp"

#include <cmath>
#include <set>

using namespace organet;
using testing::max_abs_diff;

TEST_CASE("encoder config validation") {
    CHECK_NOTHROW(EncoderConfig{}.validate());
    CHECK_NOTHROW(EncoderConfig::toy().validate());

    auto c = EncoderConfig::toy();
    CHECK(c.side(0) == 28);
    CHECK(c.side(2) == 7);
    CHECK(c.channels(2) == 128);

    c.input_size = 100;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = EncoderConfig::toy();
    c.stage_heads = {3, 6, 12};  // 32 channels cannot split into 3 heads
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = EncoderConfig::toy();
    c.stage_depths[1] = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("window partition is row-major and invertible") {
    auto x = torch::arange(16, torch::kFloat).view({1, 4, 4, 1});
    auto w = window_partition(x, 2);
    CHECK(w.sizes() == torch::IntArrayRef({4, 4, 1}));
    CHECK(w[0].flatten().equal(torch::tensor({0.f, 1.f, 4.f, 5.f})));
    CHECK(w[1].flatten().equal(torch::tensor({2.f, 3.f, 6.f, 7.f})));
    CHECK(w[3].flatten().equal(torch::tensor({10.f, 11.f, 14.f, 15.f})));

    auto y = torch::randn({2, 14, 14, 5});
    CHECK(window_reverse(window_partition(y, 7), 7, 14, 14).equal(y));
    CHECK_THROWS_AS(window_partition(torch::randn({1, 6, 6, 1}), 4), ConfigError);
}

TEST_CASE("shifted partition differs from the regular one") {
    auto plain = window_ids(8, 4, 0);
    auto shifted = window_ids(8, 4, 2);
    CHECK(plain[0][0].item<int64_t>() == 0);
    CHECK(plain[7][7].item<int64_t>() == 3);
    CHECK_FALSE(plain.equal(shifted));
    // Token (0,0) rolls to (6,6), the last window; (2,2) rolls to (0,0).
    CHECK(shifted[0][0].item<int64_t>() == 3);
    CHECK(shifted[2][2].item<int64_t>() == 0);
    for (auto ids : {plain, shifted}) {
        auto counts = torch::bincount(ids.flatten());
        CHECK(counts.eq(16).all().item<bool>());
    }
}

namespace {

// Which input tokens each output token of a Swin block depends on, from
// the gradient of one output token with respect to the whole input.
torch::Tensor dependency(SwinBlock& block, int64_t side, int64_t dim, int64_t i, int64_t j) {
    auto x = torch::randn({1, side, side, dim}, torch::kDouble).requires_grad_(true);
    auto y = block->forward(x);
    auto g = torch::autograd::grad({y[0][i][j].sum()}, {x})[0];
    return g[0].abs().sum(-1);  // [side, side]
}

}  // namespace

TEST_CASE("regular windows confine attention") {
    torch::manual_seed(0);
    SwinBlock block(4, 8, 2, 4, 0, 2);
    block->to(torch::kDouble);
    CHECK(block->shift() == 0);
    auto ids = window_ids(8, 4, 0);
    for (auto [i, j] : {std::pair<int64_t, int64_t>{0, 0}, {5, 2}, {7, 7}}) {
        auto dep = dependency(block, 8, 4, i, j);
        auto same = ids.eq(ids[i][j]);
        CHECK(dep.masked_select(same).gt(0).all().item<bool>());
        CHECK(dep.masked_select(same.logical_not()).eq(0).all().item<bool>());
    }
}

TEST_CASE("shifted windows mask tokens that wrapped around") {
    torch::manual_seed(1);
    const int64_t side = 8, window = 4, shift = 2;
    SwinBlock block(4, side, 2, window, shift, 2);
    block->to(torch::kDouble);
    CHECK(block->shift() == shift);
    auto ids = window_ids(side, window, shift);
    for (auto [i, j] : {std::pair<int64_t, int64_t>{0, 0}, {1, 6}, {3, 3}, {7, 0}, {6, 6}}) {
        auto dep = dependency(block, side, 4, i, j);
        for (int64_t a = 0; a < side; ++a)
            for (int64_t b = 0; b < side; ++b) {
                const bool allowed = ids[a][b].item<int64_t>() == ids[i][j].item<int64_t>() &&
                                     (a < shift) == (i < shift) && (b < shift) == (j < shift);
                const double d = dep[a][b].item<double>();
                if (allowed) {
                    CHECK(d > 0);
                } else {
                    CHECK(d < 1e-30);  // exp(-100) leak only
                }
            }
    }
}

TEST_CASE("a map no larger than the window uses one unshifted window") {
    SwinBlock block(8, 7, 2, 7, 3, 2);
    CHECK(block->window() == 7);
    CHECK(block->shift() == 0);
    SwinBlock small(8, 4, 2, 7, 3, 2);
    CHECK(small->window() == 4);
    CHECK(small->forward(torch::randn({1, 4, 4, 8})).sizes() == torch::IntArrayRef({1, 4, 4, 8}));
}

TEST_CASE("patch merge matches a scalar reference") {
    torch::manual_seed(2);
    const int64_t dim = 3;
    PatchMerge merge(dim);
    merge->to(torch::kDouble);
    {
        torch::NoGradGuard g;
        merge->norm->weight.uniform_(0.5, 1.5);
        merge->norm->bias.uniform_(-0.5, 0.5);
    }
    auto x = torch::randn({1, 4, 4, dim}, torch::kDouble);
    auto y = merge->forward(x);
    CHECK(y.sizes() == torch::IntArrayRef({1, 2, 2, 2 * dim}));

    auto W = merge->reduction->weight;
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            // order: (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)
            std::vector<double> v;
            for (auto [di, dj] : {std::pair<int, int>{0, 0}, {1, 0}, {0, 1}, {1, 1}})
                for (int64_t c = 0; c < dim; ++c) v.push_back(x[0][2 * i + di][2 * j + dj][c].item<double>());
            double mean = 0, var = 0;
            for (double a : v) mean += a / v.size();
            for (double a : v) var += (a - mean) * (a - mean) / v.size();
            for (size_t k = 0; k < v.size(); ++k) {
                v[k] = (v[k] - mean) / std::sqrt(var + 1e-5) * merge->norm->weight[k].item<double>() +
                       merge->norm->bias[k].item<double>();
            }
            for (int64_t o = 0; o < 2 * dim; ++o) {
                double acc = 0;
                for (size_t k = 0; k < v.size(); ++k) acc += W[o][k].item<double>() * v[k];
                CHECK(y[0][i][j][o].item<double>() == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    CHECK_THROWS_AS(merge->forward(torch::randn({1, 5, 4, dim}, torch::kDouble)), std::invalid_argument);
}

TEST_CASE("toy encoder pyramid shapes") {
    torch::manual_seed(3);
    DualEncoder enc(EncoderConfig::toy());
    auto p = enc->forward(torch::randn({2, 3, 112, 112}));
    CHECK(p.p0.sizes() == torch::IntArrayRef({2, 32, 28, 28}));
    CHECK(p.p1.sizes() == torch::IntArrayRef({2, 64, 14, 14}));
    CHECK(p.p2.sizes() == torch::IntArrayRef({2, 128, 7, 7}));
    CHECK(torch::isfinite(p.p2).all().item<bool>());
    CHECK(enc->fusions->size() == 3);
    CHECK(enc->merges->size() == 2);
    CHECK_THROWS_AS(enc->forward(torch::randn({1, 3, 224, 224})), ConfigError);
    CHECK_THROWS_AS(enc->forward(torch::randn({1, 3, 100, 100})), ConfigError);
}

TEST_CASE("full-size encoder pyramid shapes") {
    torch::manual_seed(4);
    DualEncoder enc(EncoderConfig{});
    enc->eval();
    torch::NoGradGuard g;
    auto p = enc->forward(torch::randn({1, 3, 224, 224}));
    CHECK(p.p0.sizes() == torch::IntArrayRef({1, 96, 56, 56}));
    CHECK(p.p1.sizes() == torch::IntArrayRef({1, 192, 28, 28}));
    CHECK(p.p2.sizes() == torch::IntArrayRef({1, 384, 14, 14}));
}

TEST_CASE("encoder construction is seed-deterministic") {
    torch::manual_seed(5);
    DualEncoder a(EncoderConfig::toy());
    torch::manual_seed(5);
    DualEncoder b(EncoderConfig::toy());
    auto pa = a->parameters(), pb = b->parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].equal(pb[i]));
}
