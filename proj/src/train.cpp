#include "organet/train.hpp"

#include "organet/config.hpp"
#include "organet/errors.hpp"

#include <opencv2/imgproc.hpp>

#include <cmath>
#include <random>
#include <sstream>

namespace organet {

TrainConfig TrainConfig::toy() {
    TrainConfig c;
    c.model = ModelConfig::toy();
    c.epochs = 50;
    return c;
}

void TrainConfig::validate() const {
    if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
    if (epochs <= 0) throw ConfigError("train.epochs must be positive");
    if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
    if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("train.lr_decay must lie in (0, 1]");
    if (lr_step <= 0) throw ConfigError("train.lr_step must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(averaging_fraction > 0 && averaging_fraction <= 1)) {
        throw ConfigError("train.averaging_fraction must lie in (0, 1]");
    }
    loss.validate();
    model.validate();
}

double learning_rate(const TrainConfig& config, int epoch) {
    return config.lr0 * std::pow(config.lr_decay, epoch / config.lr_step);
}

namespace {

TensorDataset stack(std::vector<ModelInput> inputs, std::vector<cv::Mat> instances, std::vector<std::string> ids) {
    if (inputs.empty()) throw DataError(DataError::Kind::EmptyDataset, "dataset is empty");
    std::vector<torch::Tensor> images, masks;
    for (auto& in : inputs) {
        images.push_back(in.image);
        masks.push_back(in.mask);
    }
    TensorDataset d;
    d.images = torch::stack(images);
    d.masks = torch::stack(masks);
    d.instances = std::move(instances);
    d.ids = std::move(ids);
    return d;
}

cv::Mat to_mat(const torch::Tensor& mask) {
    auto m = mask.to(torch::kUInt8).contiguous();
    return cv::Mat(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<uint8_t>()).clone();
}

// Stochastic weight averaging: running mean of parameters sampled at epoch ends.
class WeightAverage {
public:
    explicit WeightAverage(OrgaNet& model) {
        torch::NoGradGuard guard;
        for (auto& p : model->parameters()) sums_.push_back(torch::zeros_like(p));
    }

    void add(OrgaNet& model) {
        torch::NoGradGuard guard;
        auto params = model->parameters();
        ++count_;
        for (size_t i = 0; i < params.size(); ++i) sums_[i].add_(params[i].detach() - sums_[i], 1.0 / count_);
    }

    int count() const { return count_; }

    void apply(OrgaNet& model) const {
        torch::NoGradGuard guard;
        auto params = model->parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i].copy_(sums_[i]);
    }

private:
    std::vector<torch::Tensor> sums_;
    int count_ = 0;
};

// Recomputes BatchNorm running statistics as a plain average over one pass
// of the training data, as averaged weights invalidate the tracked ones.
void refresh_batchnorm(OrgaNet& model, const TensorDataset& data, int batch_size) {
    std::vector<torch::nn::BatchNorm2dImpl*> norms;
    for (auto& m : model->modules(false)) {
        if (auto* bn = m->as<torch::nn::BatchNorm2dImpl>()) norms.push_back(bn);
    }
    if (norms.empty()) return;
    std::vector<std::optional<double>> saved;
    for (auto* bn : norms) {
        saved.push_back(bn->options.momentum());
        bn->options.momentum(std::nullopt);
        bn->reset_running_stats();
    }
    torch::NoGradGuard guard;
    model->train();
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        int64_t end = std::min<int64_t>(start + batch_size, data.size());
        model->forward(data.images.slice(0, start, end));
    }
    for (size_t i = 0; i < norms.size(); ++i) norms[i]->options.momentum(saved[i]);
}

void set_lr(torch::optim::SGD& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

TensorDataset make_dataset(const std::vector<SamplePair>& samples, int side, const Normalization& norm) {
    std::vector<ModelInput> inputs;
    std::vector<cv::Mat> instances;
    std::vector<std::string> ids;
    for (const auto& s : samples) {
        inputs.push_back(preprocess(s, side, norm));
        instances.emplace_back();
        ids.push_back(s.source_id);
    }
    return stack(std::move(inputs), std::move(instances), std::move(ids));
}

TensorDataset make_dataset(const std::vector<SynthFrame>& frames, int side, const Normalization& norm) {
    std::vector<ModelInput> inputs;
    std::vector<cv::Mat> instances;
    std::vector<std::string> ids;
    for (const auto& f : frames) {
        inputs.push_back(preprocess(f.sample, side, norm));
        cv::Mat labels = f.instances;
        if (labels.rows != side || labels.cols != side) {
            cv::resize(f.instances, labels, cv::Size(side, side), 0, 0, cv::INTER_NEAREST);
        }
        instances.push_back(labels);
        ids.push_back(f.sample.source_id);
    }
    return stack(std::move(inputs), std::move(instances), std::move(ids));
}

TrainResult train(const TrainConfig& config, const TensorDataset& data, const TrainHooks& hooks) {
    config.validate();
    if (data.size() == 0) throw DataError(DataError::Kind::EmptyDataset, "training dataset is empty");
    const int64_t side = data.images.size(-1);
    if (side != config.model.encoder.input_size) {
        throw ConfigError("dataset side " + std::to_string(side) + " does not match model input_size " +
                          std::to_string(config.model.encoder.input_size));
    }

    torch::manual_seed(config.seed);
    std::mt19937_64 aug_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

    TrainResult result;
    result.model = OrgaNet(config.model);
    auto& model = result.model;
    torch::optim::SGD opt(model->parameters(), torch::optim::SGDOptions(config.lr0)
                                                   .momentum(config.momentum)
                                                   .weight_decay(config.weight_decay));

    const int64_t n = data.size();
    const int batches = static_cast<int>((n + config.batch_size - 1) / config.batch_size);
    int epochs = config.epochs;
    if (config.max_steps > 0) epochs = std::min(epochs, (config.max_steps + batches - 1) / batches);
    const int average_from =
        epochs - std::max(1, static_cast<int>(std::ceil(config.averaging_fraction * epochs)));
    WeightAverage average(model);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr = learning_rate(config, epoch);
        set_lr(opt, lr);
        model->train();
        auto order = torch::randperm(n, torch::kLong);

        EpochLog entry;
        entry.epoch = epoch;
        entry.lr = lr;
        for (int64_t start = 0; start < n; start += config.batch_size) {
            if (config.max_steps > 0 && result.steps >= config.max_steps) break;
            auto idx = order.slice(0, start, std::min<int64_t>(start + config.batch_size, n));
            auto images = data.images.index_select(0, idx);
            auto masks = data.masks.index_select(0, idx);
            if (config.augment_flip) {
                if (aug_rng() & 1) images = images.flip({3}), masks = masks.flip({2});
                if (aug_rng() & 1) images = images.flip({2}), masks = masks.flip({1});
            }
            if (config.augment_rotate) {
                int k = static_cast<int>(aug_rng() % 4);
                images = torch::rot90(images, k, {2, 3});
                masks = torch::rot90(masks, k, {1, 2});
            }

            auto prob = torch::softmax(model->forward(images), 1).select(1, 1);
            auto loss = total_loss(prob, masks, config.loss);
            const double total = loss.total.item<double>();
            if (!finite(total)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", step " << result.steps << " (iq "
                    << loss.iq.item<double>() << ", dice " << loss.dice.item<double>() << ", focal "
                    << loss.focal.item<double>() << ")";
                throw NumericError(msg.str());
            }
            opt.zero_grad();
            loss.total.backward();
            opt.step();

            entry.total += total;
            entry.iq += loss.iq.item<double>();
            entry.dice += loss.dice.item<double>();
            entry.focal += loss.focal.item<double>();
            ++entry.steps;
            ++result.steps;
        }
        if (entry.steps > 0) {
            entry.total /= entry.steps, entry.iq /= entry.steps, entry.dice /= entry.steps, entry.focal /= entry.steps;
        }
        result.log.push_back(entry);

        if (config.weight_averaging && epoch >= average_from) average.add(model);
        if (hooks.checkpoint_path) save_checkpoint(*hooks.checkpoint_path, model, config, epoch);
        if (hooks.on_epoch && !hooks.on_epoch(entry)) break;
    }

    if (config.weight_averaging && average.count() > 0) {
        average.apply(model);
        refresh_batchnorm(model, data, config.batch_size);
        if (hooks.checkpoint_path) {
            save_checkpoint(*hooks.checkpoint_path, model, config, result.log.back().epoch);
        }
    }
    model->eval();
    return result;
}

std::vector<cv::Mat> predict_masks(OrgaNet& model, const torch::Tensor& images, int batch_size) {
    if (batch_size <= 0) throw std::invalid_argument("predict_masks: batch_size must be positive");
    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard guard;
    std::vector<cv::Mat> out;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        auto end = std::min<int64_t>(start + batch_size, images.size(0));
        auto labels = model->forward(images.slice(0, start, end)).argmax(1);
        for (int64_t i = 0; i < labels.size(0); ++i) out.push_back(to_mat(labels[i]));
    }
    model->train(was_training);
    return out;
}

EvalReport evaluate(OrgaNet& model, const TensorDataset& data, int margin, const std::vector<int64_t>& area_edges) {
    if (data.size() == 0) throw DataError(DataError::Kind::EmptyDataset, "evaluation dataset is empty");
    EvalReport report;
    auto preds = predict_masks(model, data.images);
    for (int64_t i = 0; i < data.size(); ++i) {
        cv::Mat gt = to_mat(data.masks[i]);
        report.counts += confusion_counts(preds[i], gt);
        bool have_labels = i < static_cast<int64_t>(data.instances.size()) && !data.instances[i].empty();
        cv::Mat labels = have_labels ? data.instances[i] : label_instances(gt);
        auto inst = per_instance_iou(preds[i], labels, margin);
        report.instances.insert(report.instances.end(), inst.begin(), inst.end());
    }
    report.metrics = metrics_report(report.counts);
    report.bins = bin_by_area(report.instances, area_edges);
    return report;
}

namespace {
constexpr const char* kCheckpointFormat = "organet-checkpoint/1";
}

void save_checkpoint(const std::filesystem::path& path, OrgaNet& model, const TrainConfig& config, int epoch) {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kCheckpointFormat)));
    archive.write("config", c10::IValue(to_json(config).dump()));
    archive.write("epoch", c10::IValue(static_cast<int64_t>(epoch)));
    torch::serialize::OutputArchive weights;
    model->save(weights);
    archive.write("model", weights);

    // Write beside the target and rename, so an interrupted save never
    // replaces the previous good checkpoint with a partial file.
    auto tmp = path;
    tmp += ".tmp";
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    archive.save_to(tmp.string());
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw DataError(DataError::Kind::MissingFile, "checkpoint not found: " + path.string());
    }
    torch::serialize::InputArchive archive;
    c10::IValue format, config_text, epoch;
    try {
        archive.load_from(path.string());
        archive.read("format", format);
        archive.read("config", config_text);
        archive.read("epoch", epoch);
    } catch (const c10::Error& e) {
        throw DataError(DataError::Kind::Format, "not a checkpoint: " + path.string());
    }
    if (!format.isString() || format.toStringRef() != kCheckpointFormat) {
        throw DataError(DataError::Kind::Format, "unsupported checkpoint format in " + path.string());
    }

    LoadedCheckpoint loaded;
    try {
        from_json(json::parse(config_text.toStringRef()), loaded.config);
    } catch (const json::exception& e) {
        throw DataError(DataError::Kind::Format, std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    loaded.config.validate();
    loaded.epoch = static_cast<int>(epoch.toInt());
    loaded.model = OrgaNet(loaded.config.model);
    const auto mismatch = [&](const std::string& what) {
        return DataError(DataError::Kind::ShapeMismatch,
                         "checkpoint weights do not match its embedded config (" + what + "): " + path.string());
    };
    // The archive reader swaps tensors in without comparing sizes, so record them first.
    std::vector<std::pair<std::string, std::vector<int64_t>>> expected;
    for (const auto& p : loaded.model->named_parameters()) expected.emplace_back(p.key(), p.value().sizes().vec());
    for (const auto& b : loaded.model->named_buffers()) expected.emplace_back(b.key(), b.value().sizes().vec());
    try {
        torch::serialize::InputArchive weights;
        archive.read("model", weights);
        loaded.model->load(weights);
    } catch (const c10::Error& e) {
        throw mismatch(e.what_without_backtrace());
    }
    auto params = loaded.model->named_parameters();
    auto buffers = loaded.model->named_buffers();
    for (const auto& [name, sizes] : expected) {
        const auto* t = params.find(name);
        if (!t) t = buffers.find(name);
        if (!t || t->sizes().vec() != sizes) throw mismatch(name);
    }
    loaded.model->eval();
    return loaded;
}

}  // namespace organet
