#pragma once

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace organet {

/// Image in [0,1] (CV_32FC3, RGB) with its {0,1} CV_8U mask.
struct SamplePair {
    cv::Mat image;
    cv::Mat mask;
    std::string source_id;
};

/// Reads an image as RGB float in [0,1]. Throws DataError (MissingFile, Undecodable).
cv::Mat load_image(const std::filesystem::path& path);

/// Reads an RGB image and a mask (thresholded at >= 127). Throws DataError
/// with kind MissingFile, Undecodable or ShapeMismatch.
SamplePair load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path);

/// Per-channel standardization constants applied after resizing.
struct Normalization {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
};

struct ModelInput {
    torch::Tensor image;  // [3, side, side], standardized
    torch::Tensor mask;   // [side, side], float {0,1}
};

/// Bilinear image resize, nearest-neighbour mask resize, then standardization.
/// `divisor` is the size multiple the model requires (16 * window).
ModelInput preprocess(const SamplePair& sample, int side, const Normalization& norm = {}, int divisor = 1);

/// Image-only variant for inference.
torch::Tensor preprocess_image(const cv::Mat& image, int side, const Normalization& norm = {});

struct IntRange {
    int lo = 0, hi = 0;  // inclusive
};
struct RealRange {
    double lo = 0, hi = 0;
};

/// Hides organoid `organoid` (0-based) in frame `frame`.
struct Dropout {
    int organoid = 0;
    int frame = 0;
};

struct SynthConfig {
    uint64_t seed = 1;
    int canvas = 112;
    IntRange n_organoids{2, 5};
    RealRange radius{6.0, 16.0};
    double deform = 0.15;          // relative amplitude of the smooth boundary perturbation
    IntRange n_bubbles{1, 3};
    double noise_sigma = 0.03;
    double drift = 0.0;            // px/frame, random direction per organoid
    double growth = 1.0;           // per-frame radius multiplier
    int sequence_length = 1;       // frames the layout must stay inside the canvas for
    std::vector<Dropout> dropouts;

    void validate() const;
};

struct SynthFrame {
    SamplePair sample;
    cv::Mat instances;  // CV_32S, organoid k drawn with label k+1
};

/// Deterministic in (config, frame).
SynthFrame synth_scene(const SynthConfig& config, int frame);

/// `count` independent scenes: scene i is frame 0 of the config with seed + i.
std::vector<SynthFrame> synth_dataset(const SynthConfig& config, int count);

/// Pairs images/<stem>.* with masks/<stem>.* under `root`, sorted by stem.
std::vector<std::pair<std::filesystem::path, std::filesystem::path>> list_dataset(const std::filesystem::path& root);

/// Image files directly under `dir`, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Writes a {0,1} mask as a 0/255 PNG.
void save_mask_png(const std::filesystem::path& path, const cv::Mat& mask);
/// Reads a PNG mask and thresholds at >= 127 into {0,1}.
cv::Mat load_mask_png(const std::filesystem::path& path);
/// Writes a [0,1] RGB float image as 8-bit PNG.
void save_image_png(const std::filesystem::path& path, const cv::Mat& rgb);

/// Greyscale [0,255] CV_64F view of an RGB float image, for SSIM patches.
cv::Mat to_grey255(const cv::Mat& rgb);

}  // namespace organet
