#pragma once

#include "organet/datakit.hpp"
#include "organet/tracker.hpp"
#include "organet/train.hpp"

#include <json.hpp>

#include <filesystem>

namespace organet {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Everything a CLI run can be configured with. Every block is optional in the
/// file; missing keys keep their defaults and unknown keys are rejected.
struct RunConfig {
    TrainConfig train{};  // carries the model and loss-weight blocks
    TrackerConfig tracker{};
    SynthConfig synth{};
    Normalization normalization{};
    int eval_margin = 10;
    std::vector<int64_t> area_edges = default_area_edges();
};

json to_json(const EncoderConfig& c);
json to_json(const ModelConfig& c);
json to_json(const LossWeights& c);
json to_json(const TrainConfig& c);
json to_json(const TrackerConfig& c);
json to_json(const SynthConfig& c);
json to_json(const Normalization& c);
json to_json(const RunConfig& c);

// Each overlays the keys present in `j` onto `out`; throws ConfigError on
// unknown keys or wrong types.
void from_json(const json& j, EncoderConfig& out);
void from_json(const json& j, ModelConfig& out);
void from_json(const json& j, LossWeights& out);
void from_json(const json& j, TrainConfig& out);
void from_json(const json& j, TrackerConfig& out);
void from_json(const json& j, SynthConfig& out);
void from_json(const json& j, Normalization& out);
void from_json(const json& j, RunConfig& out);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace organet
