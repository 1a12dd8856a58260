#include "organet/metrics.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <limits>
#include <map>
#include <stdexcept>

namespace organet {

namespace {

void require_binary(const cv::Mat& m, const char* who) {
    if (m.type() != CV_8UC1) throw std::invalid_argument(std::string(who) + ": expected a CV_8UC1 mask");
    double lo = 0, hi = 0;
    cv::minMaxLoc(m, &lo, &hi);
    if (!m.empty() && hi > 1) throw std::invalid_argument(std::string(who) + ": mask values must be 0 or 1");
}

double ratio(int64_t num, int64_t den, bool& flag) {
    if (den == 0) {
        flag = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion_counts(const cv::Mat& pred, const cv::Mat& gt) {
    require_binary(pred, "confusion_counts");
    require_binary(gt, "confusion_counts");
    if (pred.size() != gt.size()) throw std::invalid_argument("confusion_counts: mask sizes differ");
    ConfusionCounts c;
    for (int r = 0; r < pred.rows; ++r) {
        const auto* p = pred.ptr<uint8_t>(r);
        const auto* g = gt.ptr<uint8_t>(r);
        for (int col = 0; col < pred.cols; ++col) {
            if (p[col]) {
                g[col] ? ++c.tp : ++c.fp;
            } else {
                g[col] ? ++c.fn : ++c.tn;
            }
        }
    }
    return c;
}

MetricsReport metrics_report(const ConfusionCounts& c) {
    if (c.total() <= 0) throw std::invalid_argument("metrics_report: no pixels counted");
    MetricsReport m;
    auto& d = m.degenerate;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    m.precision = ratio(c.tp, c.tp + c.fp, d.precision);
    m.recall = ratio(c.tp, c.tp + c.fn, d.recall);
    m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, d.dice);
    const double background_dice = ratio(2 * c.tn, 2 * c.tn + c.fp + c.fn, d.background_dice);
    m.mean_dice = 0.5 * (m.dice + background_dice);
    m.iou = ratio(c.tp, c.tp + c.fp + c.fn, d.iou);
    if (m.precision + m.recall > 0) {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    } else {
        d.f1 = true;
    }
    return m;
}

cv::Mat label_instances(const cv::Mat& binary) {
    require_binary(binary, "label_instances");
    cv::Mat labels;
    cv::connectedComponents(binary, labels, 8, CV_32S);
    return labels;
}

std::vector<InstanceIou> per_instance_iou(const cv::Mat& pred, const cv::Mat& gt_instances, std::optional<int> margin) {
    require_binary(pred, "per_instance_iou");
    if (gt_instances.type() != CV_32SC1 || gt_instances.size() != pred.size()) {
        throw std::invalid_argument("per_instance_iou: expected CV_32S instance labels matching the prediction");
    }
    if (margin && *margin < 0) throw std::invalid_argument("per_instance_iou: margin must be >= 0");

    struct Box {
        int r0 = std::numeric_limits<int>::max(), c0 = std::numeric_limits<int>::max(), r1 = -1, c1 = -1;
        int64_t area = 0;
    };
    std::map<int32_t, Box> boxes;
    for (int r = 0; r < gt_instances.rows; ++r) {
        const auto* row = gt_instances.ptr<int32_t>(r);
        for (int c = 0; c < gt_instances.cols; ++c) {
            if (row[c] <= 0) continue;
            auto& b = boxes[row[c]];
            b.r0 = std::min(b.r0, r), b.c0 = std::min(b.c0, c);
            b.r1 = std::max(b.r1, r), b.c1 = std::max(b.c1, c);
            ++b.area;
        }
    }

    std::vector<InstanceIou> out;
    out.reserve(boxes.size());
    for (const auto& [label, b] : boxes) {
        int r0 = 0, c0 = 0, r1 = pred.rows - 1, c1 = pred.cols - 1;
        if (margin) {
            r0 = std::max(0, b.r0 - *margin), c0 = std::max(0, b.c0 - *margin);
            r1 = std::min(pred.rows - 1, b.r1 + *margin), c1 = std::min(pred.cols - 1, b.c1 + *margin);
        }
        int64_t inter = 0, uni = 0;
        for (int r = r0; r <= r1; ++r) {
            const auto* p = pred.ptr<uint8_t>(r);
            const auto* g = gt_instances.ptr<int32_t>(r);
            for (int c = c0; c <= c1; ++c) {
                const bool pv = p[c] != 0;
                const bool gv = g[c] > 0;
                inter += pv && gv;
                uni += pv || gv;
            }
        }
        out.push_back({b.area, uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0});
    }
    return out;
}

std::vector<int64_t> default_area_edges() { return {0, 250, 500, 1000, 2000, 4000}; }

std::vector<AreaBin> bin_by_area(const std::vector<InstanceIou>& instances, const std::vector<int64_t>& edges) {
    if (edges.empty() || !std::is_sorted(edges.begin(), edges.end())) {
        throw std::invalid_argument("bin_by_area: edges must be nonempty and ascending");
    }
    std::vector<AreaBin> bins;
    for (size_t i = 0; i < edges.size(); ++i) {
        bins.push_back({edges[i], i + 1 < edges.size() ? edges[i + 1] : std::numeric_limits<int64_t>::max(), 0, 0.0});
    }
    for (const auto& inst : instances) {
        for (auto& bin : bins) {
            if (inst.area >= bin.lo && inst.area < bin.hi) {
                bin.mean_iou += inst.iou;
                ++bin.count;
                break;
            }
        }
    }
    for (auto& bin : bins) {
        if (bin.count > 0) bin.mean_iou /= static_cast<double>(bin.count);
    }
    return bins;
}

}  // namespace organet
