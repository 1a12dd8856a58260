#pragma once

#include <opencv2/core.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace organet {

struct ConfusionCounts {
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;

    int64_t total() const { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp, tn += o.tn, fp += o.fp, fn += o.fn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Ratios whose denominator is zero are reported as 0 and listed in the flags.
struct MetricsReport {
    double accuracy = 0, precision = 0, recall = 0, dice = 0, mean_dice = 0, iou = 0, f1 = 0;

    struct Degenerate {
        bool precision = false, recall = false, dice = false, background_dice = false, iou = false, f1 = false;
        bool any() const { return precision || recall || dice || background_dice || iou || f1; }
    } degenerate;
};

/// Pixel tally of two {0,1} CV_8U masks of equal size.
ConfusionCounts confusion_counts(const cv::Mat& pred, const cv::Mat& gt);

MetricsReport metrics_report(const ConfusionCounts& counts);

/// 8-connected component labels (CV_32S, 0 = background) of a {0,1} mask.
cv::Mat label_instances(const cv::Mat& binary);

struct InstanceIou {
    int64_t area = 0;
    double iou = 0;
};

/// IoU inside each ground-truth instance's bounding box grown by `margin`
/// pixels (clipped to the image); std::nullopt means the whole image.
/// `gt_instances` is CV_32S with 0 as background.
std::vector<InstanceIou> per_instance_iou(const cv::Mat& pred, const cv::Mat& gt_instances,
                                          std::optional<int> margin = 10);

struct AreaBin {
    int64_t lo = 0;
    int64_t hi = 0;  // exclusive; INT64_MAX for the open last bin
    int64_t count = 0;
    double mean_iou = 0;
};

/// Default instance-area edges in pixels.
std::vector<int64_t> default_area_edges();

/// Groups instances into [edges[i], edges[i+1]) ranges plus an open last bin.
std::vector<AreaBin> bin_by_area(const std::vector<InstanceIou>& instances, const std::vector<int64_t>& edges);

}  // namespace organet
