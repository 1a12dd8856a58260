#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "organet_cli";

// Runs the CLI with `args`, stdout to `log` under the scratch root; returns the exit code.
int organet(const std::string& args, const std::string& log = "last.log") {
    const std::string cmd = "cd '" + kRoot.string() + "' && '" ORGANET_CLI "' " + args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(read_text(p)); }

std::string first_line_with(const fs::path& p, const std::string& prefix) {
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);)
        if (line.rfind(prefix, 0) == 0) return line;
    return {};
}

size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

// A small dataset and a one-epoch toy checkpoint shared by the cases below.
struct Fixture {
    Fixture() {
        static bool ready = false;
        if (ready) return;
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        REQUIRE(organet("synth --count 3 --seed 11 -o data") == 0);
        REQUIRE(organet("train data --toy --epochs 1 --batch-size 3 -o model") == 0);
        ready = true;
    }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "synth writes paired images and masks") {
    for (const char* stem : {"scene_0", "scene_1", "scene_2"}) {
        CHECK(fs::exists(kRoot / "data/images" / (std::string(stem) + ".png")));
        CHECK(fs::exists(kRoot / "data/masks" / (std::string(stem) + ".png")));
    }
    auto run = read_json(kRoot / "data/run.json");
    CHECK(run["schema_version"] == 1);
    CHECK(run["seed"] == 11);
    CHECK(run["config"]["synth"]["seed"] == 11);
}

TEST_CASE_FIXTURE(Fixture, "train writes a checkpoint, a versioned log and its configuration") {
    CHECK(fs::exists(kRoot / "model/model.ckpt"));
    CHECK(line_count(kRoot / "model/train_log.csv") == 2);
    CHECK(first_line_with(kRoot / "model/train_log.csv", "schema_version") == "schema_version,epoch,lr,total,iq,dice,focal");
    auto run = read_json(kRoot / "model/run.json");
    CHECK(run["command"] == "train");
    CHECK(run["config"]["train"]["epochs"] == 1);
    CHECK(run["config"]["train"]["model"]["encoder"]["input_size"] == 112);
}

TEST_CASE_FIXTURE(Fixture, "synthetic toy training from the command line") {
    CHECK(organet("train --synthetic --toy --samples 2 --epochs 1 --batch-size 2 -o synthetic") == 0);
    CHECK(fs::exists(kRoot / "synthetic/model.ckpt"));
    CHECK(line_count(kRoot / "synthetic/train_log.csv") == 2);
}

TEST_CASE_FIXTURE(Fixture, "train usage errors") {
    CHECK(organet("train --toy") == 2);
    CHECK(organet("train missing_dir --synthetic") == 2);
    CHECK(organet("train --synthetic --epochs 0") == 2);
    CHECK(organet("train no_such_dir --toy") == 3);
    std::ofstream(kRoot / "bad.json") << R"({"train": {"epochz": 3}})";
    CHECK(organet("train --synthetic -c bad.json") == 2);
    CHECK(organet("frobnicate") == 2);
}

TEST_CASE_FIXTURE(Fixture, "same seed gives the same first epoch") {
    const std::string args = "train data --toy --epochs 1 --batch-size 2 --seed 7 --max-steps 1";
    REQUIRE(organet(args + " -o seed_a", "seed_a.log") == 0);
    REQUIRE(organet(args + " -o seed_b", "seed_b.log") == 0);
    const auto a = first_line_with(kRoot / "seed_a.log", "epoch 0");
    CHECK_FALSE(a.empty());
    CHECK(a == first_line_with(kRoot / "seed_b.log", "epoch 0"));
}

TEST_CASE_FIXTURE(Fixture, "config values apply and flags win") {
    std::ofstream(kRoot / "cfg.json") << R"({"train": {"epochs": 4, "batch_size": 3, "seed": 5}})";
    REQUIRE(organet("train data --toy -c cfg.json --epochs 1 --max-steps 1 -o cfg") == 0);
    auto run = read_json(kRoot / "cfg/run.json");
    CHECK(run["config"]["train"]["epochs"] == 1);
    CHECK(run["config"]["train"]["batch_size"] == 3);
    CHECK(run["seed"] == 5);
}

TEST_CASE_FIXTURE(Fixture, "segment writes one binary mask per image") {
    fs::create_directories(kRoot / "frames");
    for (const char* stem : {"scene_0", "scene_1", "scene_2"})
        fs::copy_file(kRoot / "data/images" / (std::string(stem) + ".png"), kRoot / "frames" / (std::string(stem) + ".png"),
                      fs::copy_options::overwrite_existing);
    REQUIRE(organet("segment --checkpoint model/model.ckpt --images frames -o seg --prob") == 0);
    REQUIRE(organet("segment --checkpoint model/model.ckpt --images frames -o seg_again") == 0);
    for (const char* stem : {"scene_0", "scene_1", "scene_2"}) {
        const auto name = std::string(stem) + ".png";
        cv::Mat m = cv::imread((kRoot / "seg" / name).string(), cv::IMREAD_UNCHANGED);
        REQUIRE_FALSE(m.empty());
        CHECK(m.rows == 112);
        CHECK(cv::countNonZero((m != 0) & (m != 255)) == 0);
        CHECK(fs::exists(kRoot / "seg" / (std::string(stem) + "_prob.png")));
        CHECK(read_text(kRoot / "seg" / name) == read_text(kRoot / "seg_again" / name));
    }
    CHECK(fs::exists(kRoot / "seg/run.json"));

    std::ofstream(kRoot / "frames/broken.png") << "not a png";
    CHECK(organet("segment --checkpoint model/model.ckpt --images frames -o seg_partial") == 0);
    fs::create_directories(kRoot / "only_broken");
    std::ofstream(kRoot / "only_broken/broken.png") << "not a png";
    CHECK(organet("segment --checkpoint model/model.ckpt --images only_broken -o seg_none") == 3);
    CHECK(organet("segment --checkpoint nowhere.ckpt --images frames -o seg_none") == 3);
}

TEST_CASE_FIXTURE(Fixture, "track follows a drifting blob with one id") {
    std::ofstream(kRoot / "blob.json") << R"({"synth": {"n_organoids": [1, 1], "drift": 1.5, "radius": [8, 10]}})";
    REQUIRE(organet("synth --frames 20 --seed 4 -c blob.json -o blob") == 0);
    REQUIRE(organet("track --masks blob/masks --images blob/images -o blob_tracks") == 0);
    auto doc = read_json(kRoot / "blob_tracks/tracks.json");
    CHECK(doc["schema_version"] == 1);
    REQUIRE(doc["tracks"].size() == 1);
    CHECK(doc["tracks"]["0"]["entries"].size() == 20);
    CHECK(line_count(kRoot / "blob_tracks/areas/track_0.csv") == 21);
    CHECK(fs::exists(kRoot / "blob_tracks/overlays/frame_0019.png"));
}

TEST_CASE_FIXTURE(Fixture, "track flags a one-frame dropout") {
    std::ofstream(kRoot / "drop.json")
        << R"({"synth": {"canvas": 160, "n_organoids": [2, 2], "drift": 1.0, "dropouts": [{"organoid": 0, "frame": 4}]}})";
    REQUIRE(organet("synth --frames 9 --seed 8 -c drop.json -o drop") == 0);
    REQUIRE(organet("track --masks drop/masks -o drop_tracks") == 0);
    auto doc = read_json(kRoot / "drop_tracks/tracks.json");
    REQUIRE(doc["tracks"].size() == 2);
    int flagged = 0;
    for (const auto& [id, track] : doc["tracks"].items()) {
        CHECK(track["entries"].size() == 9);
        CHECK(line_count(kRoot / "drop_tracks/areas" / ("track_" + id + ".csv")) == 10);
        for (const auto& e : track["entries"]) {
            if (e["flag"] == "predicted") {
                ++flagged;
                CHECK(e["frame"] == 4);
            }
        }
    }
    CHECK(flagged == 1);
}

TEST_CASE_FIXTURE(Fixture, "track usage errors") {
    fs::create_directories(kRoot / "no_frames");
    CHECK(organet("track --masks no_frames -o t") == 2);
    CHECK(organet("track -o t") == 2);
    CHECK(organet("track --checkpoint model/model.ckpt -o t") == 2);
}

TEST_CASE_FIXTURE(Fixture, "eval reports all metrics and area bins") {
    REQUIRE(organet("eval --checkpoint model/model.ckpt data -o eval") == 0);
    auto doc = read_json(kRoot / "eval/metrics.json");
    CHECK(doc["schema_version"] == 1);
    for (const char* key : {"accuracy", "precision", "recall", "dice", "mean_dice", "iou", "f1"}) {
        CHECK(doc["metrics"].contains(key));
    }
    CHECK(doc["metrics"].size() == 7);
    CHECK(doc["samples"] == 3);
    CHECK(doc["area_bins"].size() == 6);
    CHECK(doc["area_bins"][5]["hi"].is_null());
    CHECK(fs::exists(kRoot / "eval/run.json"));
    CHECK(organet("eval --checkpoint model/model.ckpt -o eval2") == 2);
}
