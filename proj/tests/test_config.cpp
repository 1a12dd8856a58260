#include "doctest_torch.hpp"

#include "organet/config.hpp"
#include "organet/errors.hpp"

#include <fstream>

using namespace organet;
namespace fs = std::filesystem;

TEST_CASE("run config survives a json round trip") {
    RunConfig c;
    c.train = TrainConfig::toy();
    c.train.seed = 99;
    c.train.loss.lambda_iq = 0.25;
    c.tracker.cost_mode = CostMode::Literal;
    c.synth.dropouts = {{1, 4}};
    c.synth.radius = {3.5, 9.0};
    c.normalization.mean = {0.1, 0.2, 0.3};
    c.area_edges = {0, 10, 100};

    RunConfig back;
    from_json(to_json(c), back);
    CHECK(to_json(back) == to_json(c));
    CHECK(back.train.seed == 99);
    CHECK(back.train.model.encoder.input_size == 112);
    CHECK(back.tracker.cost_mode == CostMode::Literal);
    REQUIRE(back.synth.dropouts.size() == 1);
    CHECK(back.synth.dropouts[0].frame == 4);
    CHECK(to_json(c)["schema_version"] == kSchemaVersion);
}

TEST_CASE("partial documents overlay the defaults") {
    RunConfig c;
    from_json(json::parse(R"({"train": {"epochs": 7, "loss": {"lambda_dice": 1.0}}})"), c);
    CHECK(c.train.epochs == 7);
    CHECK(c.train.loss.lambda_dice == 1.0);
    CHECK(c.train.loss.lambda_focal == 0.4);
    CHECK(c.train.batch_size == 4);
    CHECK(c.tracker.max_age == 3);
}

TEST_CASE("bad documents are config errors") {
    RunConfig c;
    CHECK_THROWS_AS(from_json(json::parse(R"({"trian": {}})"), c), ConfigError);
    CHECK_THROWS_AS(from_json(json::parse(R"({"train": {"epochs": "many"}})"), c), ConfigError);
    CHECK_THROWS_AS(from_json(json::parse(R"({"tracker": {"cost_mode": "fuzzy"}})"), c), ConfigError);
    CHECK_THROWS_AS(from_json(json::parse(R"({"schema_version": 2})"), c), ConfigError);
    CHECK_THROWS_AS(from_json(json::parse(R"({"normalization": {"std": [1, 0, 1]}})"), c), ConfigError);
    CHECK_THROWS_AS(from_json(json::parse(R"([1, 2])"), c), ConfigError);
}

TEST_CASE("config files") {
    auto dir = fs::temp_directory_path() / "organet_config";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "ok.json") << R"({"schema_version": 1, "train": {"seed": 3}})";
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK(load_run_config(dir / "ok.json").train.seed == 3);
    CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json"), ConfigError);
}
