#pragma once

#include "organet/datakit.hpp"
#include "organet/decoder.hpp"
#include "organet/losses.hpp"
#include "organet/metrics.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace organet {

struct TrainConfig {
    int batch_size = 4;
    double lr0 = 0.01;
    double lr_decay = 0.1;    // multiplier applied every lr_step epochs
    int lr_step = 10;
    int epochs = 300;
    int max_steps = 0;        // 0 = no cap
    double momentum = 0.9;
    double weight_decay = 0.0;
    bool weight_averaging = true;
    double averaging_fraction = 0.25;  // trailing share of epochs averaged
    bool augment_flip = false;
    bool augment_rotate = false;
    uint64_t seed = 0;
    LossWeights loss{};
    ModelConfig model{};

    /// Desk-scale defaults: toy model, 50 epochs.
    static TrainConfig toy();
    void validate() const;
};

/// lr0 * decay^floor(epoch / step).
double learning_rate(const TrainConfig& config, int epoch);

/// Preprocessed tensors ready for the model.
struct TensorDataset {
    torch::Tensor images;  // [N, 3, S, S]
    torch::Tensor masks;   // [N, S, S] float {0,1}
    std::vector<cv::Mat> instances;  // optional CV_32S labels per sample (empty Mat when unknown)
    std::vector<std::string> ids;

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

TensorDataset make_dataset(const std::vector<SamplePair>& samples, int side, const Normalization& norm = {});
TensorDataset make_dataset(const std::vector<SynthFrame>& frames, int side, const Normalization& norm = {});

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    double total = 0, iq = 0, dice = 0, focal = 0;
    int steps = 0;
};

struct TrainResult {
    OrgaNet model{nullptr};
    std::vector<EpochLog> log;
    int steps = 0;
};

struct TrainHooks {
    /// Called after each epoch; returning false stops training early.
    std::function<bool(const EpochLog&)> on_epoch;
    /// When set, a checkpoint is written here after every finite epoch.
    std::optional<std::filesystem::path> checkpoint_path;
};

/// SGD with step decay; optional stochastic weight averaging over the trailing
/// epochs (followed by a BatchNorm statistics refresh). Throws NumericError on a
/// non-finite loss; the last written checkpoint is left untouched.
TrainResult train(const TrainConfig& config, const TensorDataset& data, const TrainHooks& hooks = {});

struct EvalReport {
    ConfusionCounts counts;
    MetricsReport metrics;
    std::vector<InstanceIou> instances;
    std::vector<AreaBin> bins;
};

/// Argmax predictions for a batch of preprocessed images, as {0,1} CV_8U masks.
std::vector<cv::Mat> predict_masks(OrgaNet& model, const torch::Tensor& images, int batch_size = 4);

/// Eval-mode inference over `data`, pooled confusion counts, per-instance IoU
/// (instances from `data.instances` or connected components of the masks).
EvalReport evaluate(OrgaNet& model, const TensorDataset& data, int margin = 10,
                    const std::vector<int64_t>& area_edges = default_area_edges());

// Checkpoints: a torch archive with a "format" string, the JSON "config"
// (model + training), "epoch", and the module state under "model".

void save_checkpoint(const std::filesystem::path& path, OrgaNet& model, const TrainConfig& config, int epoch);

struct LoadedCheckpoint {
    OrgaNet model{nullptr};
    TrainConfig config;
    int epoch = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace organet
