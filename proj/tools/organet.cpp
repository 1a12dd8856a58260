#include "organet/config.hpp"
#include "organet/datakit.hpp"
#include "organet/errors.hpp"
#include "organet/metrics.hpp"
#include "organet/tracker.hpp"
#include "organet/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <climits>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

using namespace organet;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand.
struct Common {
    std::string config_path;
    std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
    c.out_dir = default_out;
    cmd->add_option("-c,--config", c.config_path, "JSON run configuration; flags override its values");
    cmd->add_option("-o,--out", c.out_dir, "output directory")->capture_default_str();
}

RunConfig base_config(const Common& c, bool toy = false) {
    RunConfig run;
    if (toy) run.train = TrainConfig::toy();
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw ConfigError("cannot open config file " + c.config_path);
        json doc;
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config " + c.config_path + ": " + e.what());
        }
        from_json(doc, run);
    }
    return run;
}

void write_json(const fs::path& path, const json& doc) {
    std::ofstream out(path);
    out << doc.dump(2) << "\n";
    if (!out) throw DataError(DataError::Kind::Format, "cannot write " + path.string());
}

fs::path prepare_out(const std::string& dir) {
    fs::path out(dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw DataError(DataError::Kind::Format, "cannot create " + out.string() + ": " + ec.message());
    return out;
}

// Effective configuration and seed of this invocation, written next to its outputs.
void echo_run(const fs::path& out, const std::string& command, uint64_t seed, const RunConfig& run,
              const json& extra = json::object()) {
    json doc{{"schema_version", kSchemaVersion}, {"command", command}, {"seed", seed}, {"config", to_json(run)}};
    for (const auto& [k, v] : extra.items()) doc[k] = v;
    write_json(out / "run.json", doc);
}

std::vector<SamplePair> load_pairs(const fs::path& root) {
    std::vector<SamplePair> samples;
    for (const auto& [image, mask] : list_dataset(root)) samples.push_back(load_sample(image, mask));
    return samples;
}

// ---- train -------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string data_dir;
    bool synthetic = false;
    bool toy = false;
    int samples = 200;
    std::optional<uint64_t> seed;
    std::optional<int> epochs, batch_size, lr_step, max_steps;
    std::optional<double> lr;
    bool no_averaging = false;
};

void setup_train(CLI::App& app, TrainArgs& a) {
    auto* cmd = app.add_subcommand("train", "train a segmentation model");
    add_common(cmd, a.common, "runs/train");
    cmd->add_option("data_dir", a.data_dir, "dataset root with images/ and masks/");
    cmd->add_flag("--synthetic", a.synthetic, "train on scenes generated from the synth block");
    cmd->add_flag("--toy", a.toy, "desk-scale preset: 112 px input, C0 = 32, 50 epochs");
    cmd->add_option("--samples", a.samples, "number of synthetic scenes")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--seed", a.seed, "training seed");
    cmd->add_option("--epochs", a.epochs)->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", a.batch_size)->check(CLI::PositiveNumber);
    cmd->add_option("--lr", a.lr, "initial learning rate");
    cmd->add_option("--lr-step", a.lr_step, "epochs between learning-rate decays")->check(CLI::PositiveNumber);
    cmd->add_option("--max-steps", a.max_steps, "optimizer step cap (0 = none)")->check(CLI::NonNegativeNumber);
    cmd->add_flag("--no-averaging", a.no_averaging, "disable weight averaging over the final epochs");
}

int run_train(const TrainArgs& a) {
    if (a.synthetic == !a.data_dir.empty()) throw UsageError("train needs exactly one of DATA_DIR or --synthetic");
    RunConfig run = base_config(a.common, a.toy);
    auto& t = run.train;
    if (a.seed) t.seed = *a.seed;
    if (a.epochs) t.epochs = *a.epochs;
    if (a.batch_size) t.batch_size = *a.batch_size;
    if (a.lr) t.lr0 = *a.lr;
    if (a.lr_step) t.lr_step = *a.lr_step;
    if (a.max_steps) t.max_steps = *a.max_steps;
    if (a.no_averaging) t.weight_averaging = false;
    t.validate();

    const int side = static_cast<int>(t.model.encoder.input_size);
    TensorDataset data = a.synthetic ? make_dataset(synth_dataset(run.synth, a.samples), side, run.normalization)
                                     : make_dataset(load_pairs(a.data_dir), side, run.normalization);

    const fs::path out = prepare_out(a.common.out_dir);
    echo_run(out, "train", t.seed, run,
             {{"data", a.synthetic ? json{{"synthetic", a.samples}} : json{{"dir", a.data_dir}}}});

    std::ofstream log(out / "train_log.csv");
    log << "schema_version,epoch,lr,total,iq,dice,focal\n";
    TrainHooks hooks;
    hooks.checkpoint_path = out / "model.ckpt";
    hooks.on_epoch = [&](const EpochLog& e) {
        char line[256];
        std::snprintf(line, sizeof line, "%d,%.17g,%.9g,%.9g,%.9g,%.9g", e.epoch, e.lr, e.total, e.iq, e.dice, e.focal);
        log << kSchemaVersion << "," << line << "\n" << std::flush;
        std::printf("epoch %d lr %.6g total %.9g iq %.9g dice %.9g focal %.9g\n", e.epoch, e.lr, e.total, e.iq, e.dice,
                    e.focal);
        std::fflush(stdout);
        return true;
    };
    auto result = train(t, data, hooks);
    std::printf("trained %d steps; checkpoint %s\n", result.steps, (out / "model.ckpt").c_str());
    return kOk;
}

// ---- segment -----------------------------------------------------------

struct SegmentArgs {
    Common common;
    std::string checkpoint, images;
    bool prob = false;
};

void setup_segment(CLI::App& app, SegmentArgs& a) {
    auto* cmd = app.add_subcommand("segment", "write one 0/255 mask per input image");
    add_common(cmd, a.common, "runs/segment");
    cmd->add_option("--checkpoint", a.checkpoint)->required();
    cmd->add_option("--images", a.images, "directory of input images")->required();
    cmd->add_flag("--prob", a.prob, "also write <stem>_prob.png foreground probability maps");
}

struct Prediction {
    cv::Mat mask;  // {0,1} at the original image size
    cv::Mat prob;  // CV_32F foreground probability at the original size
};

Prediction predict_image(OrgaNet& model, const cv::Mat& image, const Normalization& norm) {
    torch::NoGradGuard guard;
    const int side = static_cast<int>(model->config().encoder.input_size);
    auto prob = model_forward(model, preprocess_image(image, side, norm).unsqueeze(0))[0];
    cv::Mat mask(side, side, CV_8UC1), fg(side, side, CV_32FC1);
    auto labels = prob.argmax(0).to(torch::kUInt8).contiguous();
    auto p1 = prob[1].contiguous();
    std::memcpy(mask.data, labels.data_ptr<uint8_t>(), mask.total());
    std::memcpy(fg.data, p1.data_ptr<float>(), fg.total() * sizeof(float));
    Prediction out;
    cv::resize(mask, out.mask, image.size(), 0, 0, cv::INTER_NEAREST);
    cv::resize(fg, out.prob, image.size(), 0, 0, cv::INTER_LINEAR);
    return out;
}

int run_segment(const SegmentArgs& a) {
    RunConfig run = base_config(a.common);
    auto loaded = load_checkpoint(a.checkpoint);
    auto images = list_images(a.images);
    if (images.empty()) throw UsageError("no images in " + a.images);

    const fs::path out = prepare_out(a.common.out_dir);
    run.train = loaded.config;
    echo_run(out, "segment", loaded.config.seed, run, {{"checkpoint", a.checkpoint}, {"images", a.images}});

    int written = 0;
    for (const auto& path : images) {
        try {
            auto pred = predict_image(loaded.model, load_image(path), run.normalization);
            save_mask_png(out / (path.stem().string() + ".png"), pred.mask);
            if (a.prob) {
                cv::Mat p8;
                pred.prob.convertTo(p8, CV_8U, 255.0);
                cv::imwrite((out / (path.stem().string() + "_prob.png")).string(), p8);
            }
            ++written;
        } catch (const DataError& e) {
            std::fprintf(stderr, "warning: skipping %s: %s\n", path.c_str(), e.what());
        }
    }
    std::printf("segmented %d of %zu images into %s\n", written, images.size(), out.c_str());
    if (written == 0) throw DataError(DataError::Kind::Undecodable, "no image could be segmented");
    return kOk;
}

// ---- track -------------------------------------------------------------

struct TrackArgs {
    Common common;
    std::string masks, checkpoint, images;
};

void setup_track(CLI::App& app, TrackArgs& a) {
    auto* cmd = app.add_subcommand("track", "track organoids through a frame sequence");
    add_common(cmd, a.common, "runs/track");
    cmd->add_option("--masks", a.masks, "directory of per-frame 0/255 masks");
    cmd->add_option("--checkpoint", a.checkpoint, "segment --images with this model instead of reading masks");
    cmd->add_option("--images", a.images, "directory of frames (overlay background, SSIM patches)");
}

const std::vector<cv::Scalar>& palette() {
    static const std::vector<cv::Scalar> colors{  // BGR
        {180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214}, {189, 103, 148},
        {75, 86, 140},  {194, 119, 227}, {127, 127, 127}, {34, 189, 188}, {207, 190, 23}};
    return colors;
}

void draw_entry(cv::Mat& canvas, const TrackEntry& e, int id) {
    std::vector<std::vector<cv::Point>> contours;
    cv::findContours(e.shape.clone(), contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
    const auto& color = palette()[static_cast<size_t>(id) % palette().size()];
    cv::drawContours(canvas, contours, -1, color, e.predicted ? 1 : 2, cv::LINE_8, cv::noArray(), INT_MAX, e.bbox.tl());
    const std::string label = std::to_string(id) + (e.predicted ? "*" : "");
    cv::putText(canvas, label, cv::Point(static_cast<int>(e.cx) + 3, static_cast<int>(e.cy) - 3),
                cv::FONT_HERSHEY_SIMPLEX, 0.4, color, 1, cv::LINE_AA);
}

int run_track(const TrackArgs& a) {
    if (a.masks.empty() == a.checkpoint.empty()) throw UsageError("track needs exactly one of --masks or --checkpoint");
    if (!a.checkpoint.empty() && a.images.empty()) throw UsageError("--checkpoint requires --images");
    RunConfig run = base_config(a.common);
    run.tracker.validate();

    std::vector<fs::path> frames = list_images(a.masks.empty() ? a.images : a.masks);
    if (frames.empty()) throw UsageError("empty frame sequence");
    std::optional<LoadedCheckpoint> model;
    if (!a.checkpoint.empty()) {
        model = load_checkpoint(a.checkpoint);
        run.train = model->config;
    }

    const fs::path out = prepare_out(a.common.out_dir);
    echo_run(out, "track", run.train.seed, run,
             {{"masks", a.masks}, {"checkpoint", a.checkpoint}, {"images", a.images}});
    fs::create_directories(out / "overlays");
    fs::create_directories(out / "areas");

    Tracker tracker(run.tracker);
    std::vector<cv::Mat> backgrounds;
    cv::Size size;
    for (size_t f = 0; f < frames.size(); ++f) {
        const auto stem = frames[f].stem().string();
        cv::Mat image, mask;
        fs::path image_path = a.images.empty() ? fs::path() : fs::path(a.images) / frames[f].filename();
        if (!a.images.empty() && fs::exists(image_path)) image = load_image(image_path);
        if (model) {
            mask = predict_image(model->model, image, run.normalization).mask;
        } else {
            mask = load_mask_png(frames[f]);
        }
        if (f == 0) size = mask.size();
        if (mask.size() != size || (!image.empty() && image.size() != size)) {
            throw DataError(DataError::Kind::ShapeMismatch, "frame " + stem + " differs in size from the first frame");
        }
        tracker.step(connected_regions(mask, run.tracker, image.empty() ? cv::Mat() : to_grey255(image)), static_cast<int>(f));

        cv::Mat bg;
        if (image.empty()) {
            cv::cvtColor(mask * 96, bg, cv::COLOR_GRAY2BGR);
        } else {
            cv::Mat bgr;
            cv::cvtColor(image, bgr, cv::COLOR_RGB2BGR);
            bgr.convertTo(bg, CV_8UC3, 255.0);
        }
        backgrounds.push_back(bg);
    }

    json tracks = json::object();
    for (const auto& track : tracker.tracks()) {
        json entries = json::array();
        for (const auto& e : track.history) {
            entries.push_back({{"frame", e.frame},
                               {"name", frames[static_cast<size_t>(e.frame)].stem().string()},
                               {"cx", e.cx},
                               {"cy", e.cy},
                               {"area", e.area},
                               {"flag", e.predicted ? "predicted" : "matched"},
                               {"bbox", {e.bbox.x, e.bbox.y, e.bbox.width, e.bbox.height}}});
            draw_entry(backgrounds[static_cast<size_t>(e.frame)], e, track.id);
        }
        tracks[std::to_string(track.id)] = {{"alive", track.alive}, {"entries", entries}};

        std::ofstream csv(out / "areas" / ("track_" + std::to_string(track.id) + ".csv"));
        csv << "schema_version,frame,area,flag\n";
        for (const auto& s : area_series(track)) {
            csv << kSchemaVersion << "," << s.frame << "," << s.area << "," << (s.carried ? "predicted" : "matched") << "\n";
        }
    }
    json names = json::array();
    for (const auto& p : frames) names.push_back(p.stem().string());
    write_json(out / "tracks.json", {{"schema_version", kSchemaVersion}, {"frames", names}, {"tracks", tracks}});
    for (size_t f = 0; f < frames.size(); ++f) {
        cv::imwrite((out / "overlays" / (frames[f].stem().string() + ".png")).string(), backgrounds[f]);
    }
    std::printf("%zu frames, %zu tracks -> %s\n", frames.size(), tracker.tracks().size(), out.c_str());
    return kOk;
}

// ---- eval --------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string checkpoint, data_dir;
    bool synthetic = false;
    int samples = 50;
    std::optional<uint64_t> synth_seed;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
    auto* cmd = app.add_subcommand("eval", "pixel metrics and per-area instance IoU");
    add_common(cmd, a.common, "runs/eval");
    cmd->add_option("--checkpoint", a.checkpoint)->required();
    cmd->add_option("data_dir", a.data_dir, "dataset root with images/ and masks/");
    cmd->add_flag("--synthetic", a.synthetic, "evaluate on scenes generated from the synth block");
    cmd->add_option("--samples", a.samples, "number of synthetic scenes")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--synth-seed", a.synth_seed, "seed of the first synthetic scene");
}

int run_eval(const EvalArgs& a) {
    if (a.synthetic == !a.data_dir.empty()) throw UsageError("eval needs exactly one of DATA_DIR or --synthetic");
    RunConfig run = base_config(a.common);
    if (a.synth_seed) run.synth.seed = *a.synth_seed;
    auto loaded = load_checkpoint(a.checkpoint);
    run.train = loaded.config;
    const int side = static_cast<int>(loaded.config.model.encoder.input_size);
    TensorDataset data = a.synthetic ? make_dataset(synth_dataset(run.synth, a.samples), side, run.normalization)
                                     : make_dataset(load_pairs(a.data_dir), side, run.normalization);

    const fs::path out = prepare_out(a.common.out_dir);
    echo_run(out, "eval", a.synthetic ? run.synth.seed : loaded.config.seed, run, {{"checkpoint", a.checkpoint}});
    auto report = evaluate(loaded.model, data, run.eval_margin, run.area_edges);

    const auto& m = report.metrics;
    json bins = json::array();
    for (const auto& b : report.bins) {
        bins.push_back({{"lo", b.lo},
                        {"hi", b.hi == std::numeric_limits<int64_t>::max() ? json(nullptr) : json(b.hi)},
                        {"count", b.count},
                        {"mean_iou", b.mean_iou}});
    }
    const auto& d = m.degenerate;
    json doc{{"schema_version", kSchemaVersion},
             {"samples", data.size()},
             {"counts", {{"tp", report.counts.tp}, {"tn", report.counts.tn}, {"fp", report.counts.fp}, {"fn", report.counts.fn}}},
             {"metrics",
              {{"accuracy", m.accuracy},
               {"precision", m.precision},
               {"recall", m.recall},
               {"dice", m.dice},
               {"mean_dice", m.mean_dice},
               {"iou", m.iou},
               {"f1", m.f1}}},
             {"degenerate",
              {{"precision", d.precision},
               {"recall", d.recall},
               {"dice", d.dice},
               {"background_dice", d.background_dice},
               {"iou", d.iou},
               {"f1", d.f1}}},
             {"instances", report.instances.size()},
             {"area_bins", bins}};
    write_json(out / "metrics.json", doc);

    std::printf("accuracy %.4f precision %.4f recall %.4f dice %.4f mean_dice %.4f iou %.4f f1 %.4f\n", m.accuracy,
                m.precision, m.recall, m.dice, m.mean_dice, m.iou, m.f1);
    std::printf("%12s %12s %8s %9s\n", "area_lo", "area_hi", "count", "mean_iou");
    for (const auto& b : report.bins) {
        const std::string hi = b.hi == std::numeric_limits<int64_t>::max() ? "inf" : std::to_string(b.hi);
        std::printf("%12lld %12s %8lld %9.4f\n", static_cast<long long>(b.lo), hi.c_str(), static_cast<long long>(b.count),
                    b.mean_iou);
    }
    return kOk;
}

// ---- synth -------------------------------------------------------------

struct SynthArgs {
    Common common;
    int count = 10;
    int frames = 0;
    std::optional<uint64_t> seed;
};

void setup_synth(CLI::App& app, SynthArgs& a) {
    auto* cmd = app.add_subcommand("synth", "write a synthetic dataset (images/, masks/)");
    add_common(cmd, a.common, "runs/synth");
    cmd->add_option("--count", a.count, "independent scenes")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--frames", a.frames, "write one sequence of this many frames instead of independent scenes")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--seed", a.seed, "synth seed");
}

int run_synth(const SynthArgs& a) {
    RunConfig run = base_config(a.common);
    if (a.seed) run.synth.seed = *a.seed;
    if (a.frames > 0) run.synth.sequence_length = std::max(run.synth.sequence_length, a.frames);
    run.synth.validate();

    const fs::path out = prepare_out(a.common.out_dir);
    fs::create_directories(out / "images");
    fs::create_directories(out / "masks");
    echo_run(out, "synth", run.synth.seed, run, {{"count", a.count}, {"frames", a.frames}});

    std::vector<SynthFrame> scenes;
    if (a.frames > 0) {
        for (int f = 0; f < a.frames; ++f) {
            scenes.push_back(synth_scene(run.synth, f));
            char name[32];
            std::snprintf(name, sizeof name, "frame_%04d", f);
            scenes.back().sample.source_id = name;
        }
    } else {
        scenes = synth_dataset(run.synth, a.count);
    }
    for (const auto& s : scenes) {
        save_image_png(out / "images" / (s.sample.source_id + ".png"), s.sample.image);
        save_mask_png(out / "masks" / (s.sample.source_id + ".png"), s.sample.mask);
    }
    std::printf("wrote %zu %s to %s\n", scenes.size(), a.frames > 0 ? "frames" : "scenes", out.c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Organoid segmentation and tracking"};
    app.require_subcommand(1);
    TrainArgs train_args;
    SegmentArgs segment_args;
    TrackArgs track_args;
    EvalArgs eval_args;
    SynthArgs synth_args;
    setup_train(app, train_args);
    setup_segment(app, segment_args);
    setup_track(app, track_args);
    setup_eval(app, eval_args);
    setup_synth(app, synth_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (app.got_subcommand("train")) return run_train(train_args);
        if (app.got_subcommand("segment")) return run_segment(segment_args);
        if (app.got_subcommand("track")) return run_track(track_args);
        if (app.got_subcommand("eval")) return run_eval(eval_args);
        if (app.got_subcommand("synth")) return run_synth(synth_args);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
    return kUsage;
}
