#include "doctest_torch.hpp"

#include "organet/config.hpp"
#include "organet/errors.hpp"
#include "organet/train.hpp"

#include <cmath>
#include <fstream>

using namespace organet;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_run() {
    auto c = TrainConfig::toy();
    c.batch_size = 2;
    c.epochs = 2;
    c.seed = 7;
    return c;
}

TensorDataset tiny_data(int n = 2) {
    SynthConfig s;
    s.seed = 5;
    return make_dataset(synth_dataset(s, n), 112);
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("organet_train_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("learning rate follows the step schedule") {
    TrainConfig c;
    CHECK(learning_rate(c, 0) == 0.01);
    CHECK(learning_rate(c, 9) == 0.01);
    CHECK(learning_rate(c, 10) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(learning_rate(c, 19) == learning_rate(c, 10));
    CHECK(learning_rate(c, 20) == doctest::Approx(1e-4).epsilon(1e-15));
    for (int e = 1; e < 60; ++e) CHECK(learning_rate(c, e) <= learning_rate(c, e - 1));
}

TEST_CASE("train config validation") {
    CHECK_NOTHROW(TrainConfig{}.validate());
    CHECK(TrainConfig::toy().epochs == 50);
    CHECK(TrainConfig::toy().model.encoder.input_size == 112);
    auto c = TrainConfig::toy();
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig::toy();
    c.lr_decay = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig::toy();
    c.loss.lambda_iq = std::nan("");
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("datasets from synthetic frames") {
    auto d = tiny_data(3);
    CHECK(d.size() == 3);
    CHECK(d.images.sizes() == torch::IntArrayRef({3, 3, 112, 112}));
    CHECK(d.masks.sizes() == torch::IntArrayRef({3, 112, 112}));
    CHECK(d.instances.size() == 3);
    CHECK(d.instances[0].type() == CV_32S);
    CHECK_THROWS_AS(make_dataset(std::vector<SynthFrame>{}, 112), DataError);
}

TEST_CASE("training is reproducible and logs every epoch") {
    auto data = tiny_data();
    auto cfg = tiny_run();
    auto a = train(cfg, data);
    auto b = train(cfg, data);
    REQUIRE(a.log.size() == 2);
    CHECK(a.steps == 2);
    CHECK(a.log[0].total == b.log[0].total);
    CHECK(a.log[1].lr == 0.01);
    for (const auto& e : a.log) {
        CHECK(std::isfinite(e.total));
        CHECK(e.total == doctest::Approx(0.5 * e.iq + 0.6 * e.dice + 0.4 * e.focal).epsilon(1e-6));
    }
    cfg.max_steps = 1;
    CHECK(train(cfg, data).steps == 1);
}

TEST_CASE("without averaging the result is the last-step model") {
    auto dir = scratch("plain");
    auto cfg = tiny_run();
    cfg.weight_averaging = false;
    TrainHooks hooks;
    hooks.checkpoint_path = dir / "model.ckpt";
    auto res = train(cfg, tiny_data(), hooks);
    auto loaded = load_checkpoint(dir / "model.ckpt");
    CHECK(loaded.epoch == 1);
    CHECK(loaded.config.seed == 7);
    auto pa = res.model->named_parameters();
    auto pb = loaded.model->named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (const auto& item : pa) CHECK(item.value().equal(pb[item.key()]));
    auto ba = res.model->named_buffers();
    auto bb = loaded.model->named_buffers();
    for (const auto& item : ba) CHECK(item.value().equal(bb[item.key()]));
}

TEST_CASE("a non-finite loss aborts and keeps the last good checkpoint") {
    auto dir = scratch("nan");
    auto cfg = tiny_run();
    cfg.epochs = 3;
    auto data = tiny_data();
    TrainHooks hooks;
    hooks.checkpoint_path = dir / "model.ckpt";
    hooks.on_epoch = [&](const EpochLog& e) {
        if (e.epoch == 0) data.images.fill_(std::nan(""));  // storage is shared with the trainer
        return true;
    };
    try {
        train(cfg, data, hooks);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
    auto last = load_checkpoint(dir / "model.ckpt");
    CHECK(last.epoch == 0);
    for (const auto& p : last.model->parameters()) CHECK(torch::isfinite(p).all().item<bool>());
}

TEST_CASE("evaluation pools counts over the dataset") {
    auto data = tiny_data();
    torch::manual_seed(0);
    OrgaNet model(ModelConfig::toy());
    auto report = evaluate(model, data);
    CHECK(report.counts.total() == 2 * 112 * 112);
    CHECK(report.metrics.accuracy >= 0);
    CHECK(report.bins.size() == default_area_edges().size());
    int64_t instances = 0;
    for (const auto& inst : data.instances) {
        double mx = 0;
        cv::minMaxLoc(inst, nullptr, &mx);
        instances += static_cast<int64_t>(mx);
    }
    CHECK(static_cast<int64_t>(report.instances.size()) == instances);
    CHECK_THROWS_AS(evaluate(model, TensorDataset{}), DataError);
}

TEST_CASE("checkpoint loading errors") {
    auto dir = scratch("ckpt");
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
    std::ofstream(dir / "junk.ckpt") << "garbage";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), DataError);

    torch::manual_seed(0);
    OrgaNet model(ModelConfig::toy());
    auto other = TrainConfig::toy();
    other.model.bcf_heads = 2;  // different bias table width
    save_checkpoint(dir / "mismatch.ckpt", model, other, 0);
    try {
        load_checkpoint(dir / "mismatch.ckpt");
        CHECK(false);
    } catch (const DataError& e) {
        CHECK(e.kind() == DataError::Kind::ShapeMismatch);
    }
}
