#include "organet/config.hpp"

#include "organet/errors.hpp"

#include <fstream>
#include <set>
#include <string>

namespace organet {

namespace {

/// Reads known keys from one JSON object and rejects the rest.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    Reader& get(const char* key, T& out) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->template get<T>();
            } catch (const json::exception& e) {
                throw ConfigError(where_ + "." + key + ": " + e.what());
            }
        }
        return *this;
    }

    template <class Fn>
    Reader& nested(const char* key, Fn&& fn) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) fn(*it);
        return *this;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace

json to_json(const EncoderConfig& c) {
    return {{"base_channels", c.base_channels}, {"stage_depths", c.stage_depths}, {"stage_heads", c.stage_heads},
            {"window", c.window},               {"input_size", c.input_size},     {"conv_width", c.conv_width},
            {"conv_blocks", c.conv_blocks},     {"mlp_ratio", c.mlp_ratio},       {"fusion_heads", c.fusion_heads},
            {"fusion_bands", c.fusion_bands}};
}

void from_json(const json& j, EncoderConfig& c) {
    Reader(j, "encoder")
        .get("base_channels", c.base_channels)
        .get("stage_depths", c.stage_depths)
        .get("stage_heads", c.stage_heads)
        .get("window", c.window)
        .get("input_size", c.input_size)
        .get("conv_width", c.conv_width)
        .get("conv_blocks", c.conv_blocks)
        .get("mlp_ratio", c.mlp_ratio)
        .get("fusion_heads", c.fusion_heads)
        .get("fusion_bands", c.fusion_bands)
        .finish();
}

json to_json(const ModelConfig& c) {
    return {{"encoder", to_json(c.encoder)},
            {"bcf_heads", c.bcf_heads},
            {"prefuse_hidden_mult", c.prefuse_hidden_mult},
            {"gamma_init", c.gamma_init}};
}

void from_json(const json& j, ModelConfig& c) {
    Reader(j, "model")
        .nested("encoder", [&](const json& e) { from_json(e, c.encoder); })
        .get("bcf_heads", c.bcf_heads)
        .get("prefuse_hidden_mult", c.prefuse_hidden_mult)
        .get("gamma_init", c.gamma_init)
        .finish();
}

json to_json(const LossWeights& c) {
    return {{"lambda_iq", c.lambda_iq},     {"lambda_dice", c.lambda_dice}, {"lambda_focal", c.lambda_focal},
            {"dice_smooth", c.dice_smooth}, {"focal_alpha", c.focal_alpha}, {"focal_gamma", c.focal_gamma}};
}

void from_json(const json& j, LossWeights& c) {
    Reader(j, "loss")
        .get("lambda_iq", c.lambda_iq)
        .get("lambda_dice", c.lambda_dice)
        .get("lambda_focal", c.lambda_focal)
        .get("dice_smooth", c.dice_smooth)
        .get("focal_alpha", c.focal_alpha)
        .get("focal_gamma", c.focal_gamma)
        .finish();
}

json to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"lr0", c.lr0},
            {"lr_decay", c.lr_decay},
            {"lr_step", c.lr_step},
            {"epochs", c.epochs},
            {"max_steps", c.max_steps},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"weight_averaging", c.weight_averaging},
            {"averaging_fraction", c.averaging_fraction},
            {"augment_flip", c.augment_flip},
            {"augment_rotate", c.augment_rotate},
            {"seed", c.seed},
            {"loss", to_json(c.loss)},
            {"model", to_json(c.model)}};
}

void from_json(const json& j, TrainConfig& c) {
    Reader(j, "train")
        .get("batch_size", c.batch_size)
        .get("lr0", c.lr0)
        .get("lr_decay", c.lr_decay)
        .get("lr_step", c.lr_step)
        .get("epochs", c.epochs)
        .get("max_steps", c.max_steps)
        .get("momentum", c.momentum)
        .get("weight_decay", c.weight_decay)
        .get("weight_averaging", c.weight_averaging)
        .get("averaging_fraction", c.averaging_fraction)
        .get("augment_flip", c.augment_flip)
        .get("augment_rotate", c.augment_rotate)
        .get("seed", c.seed)
        .nested("loss", [&](const json& e) { from_json(e, c.loss); })
        .nested("model", [&](const json& e) { from_json(e, c.model); })
        .finish();
}

json to_json(const TrackerConfig& c) {
    return {{"alpha", c.alpha},
            {"beta", c.beta},
            {"cost_gate", c.cost_gate},
            {"max_age", c.max_age},
            {"min_area", c.min_area},
            {"ssim_c1", c.ssim_c1},
            {"ssim_c2", c.ssim_c2},
            {"ssim_patch_side", c.ssim_patch_side},
            {"cost_mode", c.cost_mode == CostMode::Literal ? "literal" : "dissimilarity"},
            {"process_noise", c.process_noise},
            {"measurement_noise", c.measurement_noise},
            {"initial_velocity_variance", c.initial_velocity_variance}};
}

void from_json(const json& j, TrackerConfig& c) {
    std::string mode = c.cost_mode == CostMode::Literal ? "literal" : "dissimilarity";
    Reader(j, "tracker")
        .get("alpha", c.alpha)
        .get("beta", c.beta)
        .get("cost_gate", c.cost_gate)
        .get("max_age", c.max_age)
        .get("min_area", c.min_area)
        .get("ssim_c1", c.ssim_c1)
        .get("ssim_c2", c.ssim_c2)
        .get("ssim_patch_side", c.ssim_patch_side)
        .get("cost_mode", mode)
        .get("process_noise", c.process_noise)
        .get("measurement_noise", c.measurement_noise)
        .get("initial_velocity_variance", c.initial_velocity_variance)
        .finish();
    if (mode == "literal") {
        c.cost_mode = CostMode::Literal;
    } else if (mode == "dissimilarity") {
        c.cost_mode = CostMode::Dissimilarity;
    } else {
        throw ConfigError("tracker.cost_mode: expected 'dissimilarity' or 'literal', got '" + mode + "'");
    }
}

json to_json(const SynthConfig& c) {
    json drops = json::array();
    for (const auto& d : c.dropouts) drops.push_back({{"organoid", d.organoid}, {"frame", d.frame}});
    return {{"seed", c.seed},
            {"canvas", c.canvas},
            {"n_organoids", {c.n_organoids.lo, c.n_organoids.hi}},
            {"radius", {c.radius.lo, c.radius.hi}},
            {"deform", c.deform},
            {"n_bubbles", {c.n_bubbles.lo, c.n_bubbles.hi}},
            {"noise_sigma", c.noise_sigma},
            {"drift", c.drift},
            {"growth", c.growth},
            {"sequence_length", c.sequence_length},
            {"dropouts", drops}};
}

void from_json(const json& j, SynthConfig& c) {
    std::array<int, 2> organoids{c.n_organoids.lo, c.n_organoids.hi};
    std::array<int, 2> bubbles{c.n_bubbles.lo, c.n_bubbles.hi};
    std::array<double, 2> radius{c.radius.lo, c.radius.hi};
    Reader(j, "synth")
        .get("seed", c.seed)
        .get("canvas", c.canvas)
        .get("n_organoids", organoids)
        .get("radius", radius)
        .get("deform", c.deform)
        .get("n_bubbles", bubbles)
        .get("noise_sigma", c.noise_sigma)
        .get("drift", c.drift)
        .get("growth", c.growth)
        .get("sequence_length", c.sequence_length)
        .nested("dropouts",
                [&](const json& arr) {
                    if (!arr.is_array()) throw ConfigError("synth.dropouts: expected an array");
                    c.dropouts.clear();
                    for (const auto& d : arr) {
                        Dropout drop;
                        Reader(d, "synth.dropouts[]").get("organoid", drop.organoid).get("frame", drop.frame).finish();
                        c.dropouts.push_back(drop);
                    }
                })
        .finish();
    c.n_organoids = {organoids[0], organoids[1]};
    c.n_bubbles = {bubbles[0], bubbles[1]};
    c.radius = {radius[0], radius[1]};
}

json to_json(const Normalization& c) { return {{"mean", c.mean}, {"std", c.std}}; }

void from_json(const json& j, Normalization& c) {
    Reader(j, "normalization").get("mean", c.mean).get("std", c.std).finish();
    for (double s : c.std) {
        if (s <= 0) throw ConfigError("normalization.std entries must be positive");
    }
}

json to_json(const RunConfig& c) {
    return {{"schema_version", kSchemaVersion},
            {"train", to_json(c.train)},
            {"tracker", to_json(c.tracker)},
            {"synth", to_json(c.synth)},
            {"normalization", to_json(c.normalization)},
            {"eval_margin", c.eval_margin},
            {"area_edges", c.area_edges}};
}

void from_json(const json& j, RunConfig& c) {
    int schema = kSchemaVersion;
    Reader(j, "config")
        .get("schema_version", schema)
        .nested("train", [&](const json& e) { from_json(e, c.train); })
        .nested("tracker", [&](const json& e) { from_json(e, c.tracker); })
        .nested("synth", [&](const json& e) { from_json(e, c.synth); })
        .nested("normalization", [&](const json& e) { from_json(e, c.normalization); })
        .get("eval_margin", c.eval_margin)
        .get("area_edges", c.area_edges)
        .finish();
    if (schema != kSchemaVersion) {
        throw ConfigError("config: unsupported schema_version " + std::to_string(schema));
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    RunConfig c;
    from_json(j, c);
    return c;
}

}  // namespace organet
