#include "organet/datakit.hpp"

#include "organet/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace organet {

namespace fs = std::filesystem;

namespace {

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff" || ext == ".bmp";
}

cv::Mat threshold_mask(const cv::Mat& grey) {
    cv::Mat mask = grey >= 127;
    return mask / 255;
}

torch::Tensor image_to_tensor(const cv::Mat& rgb, const Normalization& norm) {
    cv::Mat contiguous = rgb.isContinuous() ? rgb : rgb.clone();
    auto t = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kFloat32)
                 .permute({2, 0, 1})
                 .clone();
    auto mean = torch::tensor({norm.mean[0], norm.mean[1], norm.mean[2]}, torch::kFloat32).view({3, 1, 1});
    auto stdv = torch::tensor({norm.std[0], norm.std[1], norm.std[2]}, torch::kFloat32).view({3, 1, 1});
    return (t - mean) / stdv;
}

}  // namespace

cv::Mat load_image(const fs::path& path) {
    if (!fs::exists(path)) throw DataError(DataError::Kind::MissingFile, "missing file: " + path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError(DataError::Kind::Undecodable, "cannot decode image: " + path.string());
    cv::Mat rgb, out;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    rgb.convertTo(out, CV_32FC3, 1.0 / 255.0);
    return out;
}

SamplePair load_sample(const fs::path& image_path, const fs::path& mask_path) {
    if (!fs::exists(mask_path)) throw DataError(DataError::Kind::MissingFile, "missing file: " + mask_path.string());
    SamplePair s;
    s.image = load_image(image_path);
    cv::Mat grey = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
    if (grey.empty()) throw DataError(DataError::Kind::Undecodable, "cannot decode mask: " + mask_path.string());
    if (s.image.size() != grey.size()) {
        throw DataError(DataError::Kind::ShapeMismatch,
                        "image " + std::to_string(s.image.cols) + "x" + std::to_string(s.image.rows) + " vs mask " +
                            std::to_string(grey.cols) + "x" + std::to_string(grey.rows) + " for " + image_path.string());
    }
    s.mask = threshold_mask(grey);
    s.source_id = image_path.stem().string();
    return s;
}

ModelInput preprocess(const SamplePair& sample, int side, const Normalization& norm, int divisor) {
    if (side < 1 || divisor < 1 || side % divisor != 0) {
        throw ConfigError("preprocess: side " + std::to_string(side) + " must be a positive multiple of " +
                          std::to_string(divisor));
    }
    if (sample.image.size() != sample.mask.size()) {
        throw DataError(DataError::Kind::ShapeMismatch, "preprocess: image and mask sizes differ");
    }
    ModelInput in;
    in.image = preprocess_image(sample.image, side, norm);
    cv::Mat mask;
    cv::resize(sample.mask, mask, cv::Size(side, side), 0, 0, cv::INTER_NEAREST);
    in.mask = torch::from_blob(mask.data, {side, side}, torch::kUInt8).to(torch::kFloat32).clone();
    return in;
}

torch::Tensor preprocess_image(const cv::Mat& image, int side, const Normalization& norm) {
    if (side < 1) throw ConfigError("preprocess: side must be positive");
    if (image.type() != CV_32FC3) throw std::invalid_argument("preprocess: expected a CV_32FC3 image");
    cv::Mat resized;
    cv::resize(image, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
    return image_to_tensor(resized, norm);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

void SynthConfig::validate() const {
    if (canvas < 16) throw ConfigError("synth: canvas must be at least 16 px");
    if (n_organoids.lo < 0 || n_organoids.hi < n_organoids.lo || n_bubbles.lo < 0 || n_bubbles.hi < n_bubbles.lo) {
        throw ConfigError("synth: count ranges must be nonempty and nonnegative");
    }
    if (radius.lo <= 0 || radius.hi < radius.lo) throw ConfigError("synth: radius range must be positive and nonempty");
    if (deform < 0 || deform >= 0.5 || noise_sigma < 0 || drift < 0 || growth <= 0 || sequence_length < 1) {
        throw ConfigError("synth: deform in [0, 0.5), noise/drift >= 0, growth > 0, sequence_length >= 1");
    }
}

namespace {

struct OrganoidSpec {
    double x0, y0, r0;
    double aspect, angle;
    std::array<double, 3> harmonic_amp, harmonic_phase;
    double vx, vy;
    double darkness, texture_freq, texture_phase;
};

struct BubbleSpec {
    double x, y, r;
    double thickness;
};

struct SceneLayout {
    std::vector<OrganoidSpec> organoids;
    std::vector<BubbleSpec> bubbles;
    double background, gradient_x, gradient_y;
};

SceneLayout make_layout(const SynthConfig& c) {
    std::mt19937_64 rng(c.seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto pick = [&](IntRange r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); };

    SceneLayout layout;
    layout.background = uni(0.55, 0.7);
    layout.gradient_x = uni(-0.1, 0.1);
    layout.gradient_y = uni(-0.1, 0.1);

    const int last = c.sequence_length - 1;
    const double grow = std::pow(c.growth, std::max(0, last));
    const double shape_margin = (1.0 + c.deform) * (1.0 + c.deform * 0.5);
    const int wanted = pick(c.n_organoids);
    for (int k = 0, attempts = 0; k < wanted && attempts < 500; ++attempts) {
        OrganoidSpec o{};
        o.r0 = uni(c.radius.lo, std::max(c.radius.lo, c.radius.hi));
        const double direction = uni(0.0, 2.0 * std::numbers::pi);
        o.vx = c.drift * std::cos(direction);
        o.vy = c.drift * std::sin(direction);
        const double reach = o.r0 * std::max(1.0, grow) * shape_margin + 2.0;
        // Keep the whole trajectory inside the canvas.
        const double lo_x = reach + std::max(0.0, -o.vx * last), hi_x = c.canvas - reach - std::max(0.0, o.vx * last);
        const double lo_y = reach + std::max(0.0, -o.vy * last), hi_y = c.canvas - reach - std::max(0.0, o.vy * last);
        if (lo_x >= hi_x || lo_y >= hi_y) continue;
        o.x0 = uni(lo_x, hi_x);
        o.y0 = uni(lo_y, hi_y);
        o.aspect = 1.0 + c.deform * uni(0.0, 1.0);
        o.angle = uni(0.0, std::numbers::pi);
        for (size_t h = 0; h < 3; ++h) {
            o.harmonic_amp[h] = c.deform * uni(-0.5, 0.5) / static_cast<double>(h + 1);
            o.harmonic_phase[h] = uni(0.0, 2.0 * std::numbers::pi);
        }
        o.darkness = uni(0.2, 0.35);
        o.texture_freq = uni(0.4, 0.9);
        o.texture_phase = uni(0.0, 2.0 * std::numbers::pi);

        bool clear = true;
        for (const auto& other : layout.organoids) {
            const double other_reach = other.r0 * std::max(1.0, grow) * shape_margin + 2.0;
            for (int f = 0; f <= last && clear; ++f) {
                const double dx = (o.x0 + o.vx * f) - (other.x0 + other.vx * f);
                const double dy = (o.y0 + o.vy * f) - (other.y0 + other.vy * f);
                clear = std::hypot(dx, dy) > reach + other_reach + 2.0;
            }
            if (!clear) break;
        }
        if (!clear) continue;
        layout.organoids.push_back(o);
        ++k;
    }

    const int bubbles = pick(c.n_bubbles);
    for (int b = 0; b < bubbles; ++b) {
        BubbleSpec s{};
        s.r = uni(c.radius.lo * 0.6, c.radius.hi);
        s.x = uni(0.0, c.canvas);
        s.y = uni(0.0, c.canvas);
        s.thickness = uni(1.2, 2.5);
        layout.bubbles.push_back(s);
    }
    return layout;
}

bool dropped(const SynthConfig& c, int organoid, int frame) {
    return std::any_of(c.dropouts.begin(), c.dropouts.end(),
                       [&](const Dropout& d) { return d.organoid == organoid && d.frame == frame; });
}

}  // namespace

SynthFrame synth_scene(const SynthConfig& config, int frame) {
    config.validate();
    if (frame < 0) throw std::invalid_argument("synth_scene: frame must be >= 0");
    const auto layout = make_layout(config);
    const int n = config.canvas;

    cv::Mat grey(n, n, CV_64F);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double u = (x - n / 2.0) / n, v = (y - n / 2.0) / n;
            grey.at<double>(y, x) = layout.background + layout.gradient_x * u + layout.gradient_y * v -
                                    0.08 * (u * u + v * v);
        }
    }

    // Bubbles: thin dark rings with a bright inner halo, never labelled.
    for (const auto& b : layout.bubbles) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                const double d = std::hypot(x - b.x, y - b.y) - b.r;
                const double ring = std::exp(-(d * d) / (2.0 * b.thickness * b.thickness));
                const double halo = std::exp(-((d + 2.5 * b.thickness) * (d + 2.5 * b.thickness)) / (2.0 * b.thickness * b.thickness));
                grey.at<double>(y, x) += -0.3 * ring + 0.12 * halo;
            }
        }
    }

    cv::Mat instances = cv::Mat::zeros(n, n, CV_32S);
    for (size_t k = 0; k < layout.organoids.size(); ++k) {
        if (dropped(config, static_cast<int>(k), frame)) continue;
        const auto& o = layout.organoids[k];
        const double cx = o.x0 + o.vx * frame;
        const double cy = o.y0 + o.vy * frame;
        const double r = o.r0 * std::pow(config.growth, frame);
        const double ca = std::cos(o.angle), sa = std::sin(o.angle);
        const double reach = r * (1.0 + config.deform) * (1.0 + config.deform * 0.5) + 2.0;
        const int x0 = std::max(0, static_cast<int>(cx - reach)), x1 = std::min(n - 1, static_cast<int>(cx + reach) + 1);
        const int y0 = std::max(0, static_cast<int>(cy - reach)), y1 = std::min(n - 1, static_cast<int>(cy + reach) + 1);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - cx, dy = y - cy;
                // Rotate into the organoid frame and squash the major axis.
                const double u = (ca * dx + sa * dy) / o.aspect;
                const double v = (-sa * dx + ca * dy) * o.aspect;
                const double theta = std::atan2(v, u);
                double boundary = r;
                for (size_t h = 0; h < 3; ++h) {
                    boundary += r * o.harmonic_amp[h] * std::cos(static_cast<double>(h + 2) * theta + o.harmonic_phase[h]);
                }
                const double rho = std::hypot(u, v);
                if (rho > boundary) continue;
                instances.at<int32_t>(y, x) = static_cast<int32_t>(k + 1);
                const double depth = boundary - rho;
                const double rim = std::exp(-depth * depth / 4.0);
                const double texture = 0.06 * std::sin(o.texture_freq * x + o.texture_phase) *
                                       std::cos(o.texture_freq * 1.3 * y - o.texture_phase);
                grey.at<double>(y, x) = layout.background - o.darkness - 0.15 * rim + texture;
            }
        }
    }

    // Per-frame sensor noise.
    std::mt19937_64 noise_rng(config.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(frame) + 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    cv::Mat rgb(n, n, CV_32FC3);
    const std::array<double, 3> tint{1.0, 0.97, 0.93};
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double g = grey.at<double>(y, x) + config.noise_sigma * noise(noise_rng);
            auto& px = rgb.at<cv::Vec3f>(y, x);
            for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<float>(std::clamp(g * tint[ch], 0.0, 1.0));
        }
    }

    SynthFrame out;
    out.sample.image = rgb;
    out.sample.mask = (instances > 0) / 255;
    out.sample.source_id = "synth_" + std::to_string(config.seed) + "_" + std::to_string(frame);
    out.instances = instances;
    return out;
}

std::vector<SynthFrame> synth_dataset(const SynthConfig& config, int count) {
    std::vector<SynthFrame> out;
    out.reserve(static_cast<size_t>(std::max(0, count)));
    for (int i = 0; i < count; ++i) {
        auto c = config;
        c.seed = config.seed + static_cast<uint64_t>(i);
        out.push_back(synth_scene(c, 0));
        out.back().sample.source_id = "scene_" + std::to_string(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::pair<fs::path, fs::path>> list_dataset(const fs::path& root) {
    const auto images_dir = root / "images";
    const auto masks_dir = root / "masks";
    if (!fs::is_directory(images_dir) || !fs::is_directory(masks_dir)) {
        throw DataError(DataError::Kind::MissingFile, "dataset needs images/ and masks/ under " + root.string());
    }
    std::map<std::string, fs::path> masks;
    for (const auto& m : list_images(masks_dir)) masks[m.stem().string()] = m;
    std::vector<std::pair<fs::path, fs::path>> pairs;
    for (const auto& img : list_images(images_dir)) {
        auto it = masks.find(img.stem().string());
        if (it == masks.end()) throw DataError(DataError::Kind::MissingFile, "no mask for " + img.string());
        pairs.emplace_back(img, it->second);
    }
    if (pairs.empty()) throw DataError(DataError::Kind::EmptyDataset, "no image/mask pairs under " + root.string());
    return pairs;
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError(DataError::Kind::MissingFile, "not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

void save_mask_png(const fs::path& path, const cv::Mat& mask) {
    cv::Mat out = mask != 0;
    if (!cv::imwrite(path.string(), out)) throw DataError(DataError::Kind::Format, "cannot write " + path.string());
}

cv::Mat load_mask_png(const fs::path& path) {
    if (!fs::exists(path)) throw DataError(DataError::Kind::MissingFile, "missing file: " + path.string());
    cv::Mat grey = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (grey.empty()) throw DataError(DataError::Kind::Undecodable, "cannot decode mask: " + path.string());
    return threshold_mask(grey);
}

void save_image_png(const fs::path& path, const cv::Mat& rgb) {
    cv::Mat bgr, out;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    bgr.convertTo(out, CV_8UC3, 255.0);
    if (!cv::imwrite(path.string(), out)) throw DataError(DataError::Kind::Format, "cannot write " + path.string());
}

cv::Mat to_grey255(const cv::Mat& rgb) {
    cv::Mat grey, out;
    cv::cvtColor(rgb, grey, cv::COLOR_RGB2GRAY);
    grey.convertTo(out, CV_64F, 255.0);
    return out;
}

}  // namespace organet
