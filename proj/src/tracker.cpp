#include "organet/tracker.hpp"

#include "organet/errors.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace organet {

void TrackerConfig::validate() const {
    if (alpha < 0 || beta < 0 || max_age < 0 || min_area < 0 || ssim_c1 < 0 || ssim_c2 < 0 || process_noise < 0 ||
        measurement_noise <= 0 || initial_velocity_variance < 0) {
        throw ConfigError("tracker: weights, noise levels and limits must be nonnegative");
    }
    if (ssim_patch_side < 1) throw ConfigError("tracker: ssim_patch_side must be positive");
}

std::vector<Region> connected_regions(const cv::Mat& mask, const TrackerConfig& config, const cv::Mat& gray) {
    if (mask.type() != CV_8UC1) throw std::invalid_argument("connected_regions: expected a CV_8UC1 mask");
    if (!gray.empty() && gray.size() != mask.size()) {
        throw std::invalid_argument("connected_regions: grey image and mask sizes differ");
    }
    cv::Mat binary = mask != 0;
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(binary, labels, stats, centroids, 8, CV_32S);

    cv::Mat source;
    if (gray.empty()) {
        binary.convertTo(source, CV_64F);  // 255 where set
    } else {
        gray.convertTo(source, CV_64F);
    }

    std::vector<Region> regions;
    const cv::Size patch_size(config.ssim_patch_side, config.ssim_patch_side);
    for (int label = 1; label < n; ++label) {
        const int64_t area = stats.at<int>(label, cv::CC_STAT_AREA);
        if (area < config.min_area) continue;
        Region r;
        r.area = area;
        r.cx = centroids.at<double>(label, 0);
        r.cy = centroids.at<double>(label, 1);
        r.bbox = cv::Rect(stats.at<int>(label, cv::CC_STAT_LEFT), stats.at<int>(label, cv::CC_STAT_TOP),
                          stats.at<int>(label, cv::CC_STAT_WIDTH), stats.at<int>(label, cv::CC_STAT_HEIGHT));
        r.shape = (labels(r.bbox) == label) / 255;
        cv::resize(source(r.bbox), r.patch, patch_size, 0, 0, cv::INTER_LINEAR);
        regions.push_back(std::move(r));
    }
    return regions;
}

double ssim(const cv::Mat& a, const cv::Mat& b, double c1, double c2) {
    if (a.size() != b.size() || a.channels() != 1 || b.channels() != 1 || a.empty()) {
        throw std::invalid_argument("ssim: patches must be nonempty single-channel images of equal size");
    }
    cv::Mat x, y;
    a.convertTo(x, CV_64F);
    b.convertTo(y, CV_64F);
    const double n = static_cast<double>(x.total());
    const double mx = cv::sum(x)[0] / n;
    const double my = cv::sum(y)[0] / n;
    cv::Mat dx = x - mx, dy = y - my;
    const double vx = dx.dot(dx) / n;
    const double vy = dy.dot(dy) / n;
    const double cov = dx.dot(dy) / n;
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

double match_cost(const Region& a, const Region& b, const TrackerConfig& config) {
    const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);
    const double s = ssim(a.patch, b.patch, config.ssim_c1, config.ssim_c2);
    if (config.cost_mode == CostMode::Literal) return config.alpha * d + config.beta * s;
    return config.alpha * d + config.beta * (1.0 - s);
}

std::vector<std::pair<int, int>> hungarian(const std::vector<double>& cost, int rows, int cols) {
    if (rows < 0 || cols < 0 || cost.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols)) {
        throw std::invalid_argument("hungarian: cost size does not match rows x cols");
    }
    if (rows == 0 || cols == 0) return {};
    double largest = 0;
    for (double c : cost) {
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian: cost entries must be finite");
        largest = std::max(largest, std::abs(c));
    }

    // Square up with a constant sentinel; padded pairs are dropped below.
    const int n = std::max(rows, cols);
    const double sentinel = largest + 1.0;
    auto at = [&](int i, int j) {
        return (i < rows && j < cols) ? cost[static_cast<size_t>(i) * cols + j] : sentinel;
    };

    // Shortest augmenting path with row/column potentials, 1-based with a dummy column 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> match(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = match[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) minv[j] = cur, way[j] = j0;
                if (minv[j] < delta) delta = minv[j], j1 = j;
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::pair<int, int>> pairs;
    for (int j = 1; j <= n; ++j) {
        const int i = match[j] - 1;
        if (i < rows && j - 1 < cols) pairs.emplace_back(i, j - 1);
    }
    std::sort(pairs.begin(), pairs.end());
    return pairs;
}

// ---------------------------------------------------------------------------

KalmanFilter::KalmanFilter(double cx, double cy, const TrackerConfig& config)
    : state_(cx, cy, 0, 0), q_(config.process_noise), r_(config.measurement_noise) {
    cov_ = cv::Matx44d::diag({r_, r_, config.initial_velocity_variance, config.initial_velocity_variance});
}

KalmanFilter::KalmanFilter(const cv::Vec4d& state, const cv::Matx44d& covariance, double process_noise,
                           double measurement_noise)
    : state_(state), cov_(covariance), q_(process_noise), r_(measurement_noise) {}

cv::Point2d KalmanFilter::predict() {
    const cv::Matx44d f(1, 0, 1, 0,
                        0, 1, 0, 1,
                        0, 0, 1, 0,
                        0, 0, 0, 1);
    state_ = f * state_;
    cov_ = f * cov_ * f.t() + cv::Matx44d::eye() * q_;
    return position();
}

void KalmanFilter::update(double cx, double cy) {
    const cv::Matx<double, 2, 4> h(1, 0, 0, 0,
                                   0, 1, 0, 0);
    const cv::Vec2d innovation(cx - state_[0], cy - state_[1]);
    const cv::Matx22d s = h * cov_ * h.t() + cv::Matx22d::eye() * r_;
    const cv::Matx<double, 4, 2> gain = cov_ * h.t() * s.inv();
    state_ += gain * innovation;
    // Joseph form keeps the covariance symmetric positive semi-definite.
    const cv::Matx44d ikh = cv::Matx44d::eye() - gain * h;
    cov_ = ikh * cov_ * ikh.t() + gain * (cv::Matx22d::eye() * r_) * gain.t();
}

// ---------------------------------------------------------------------------

std::vector<AreaSample> area_series(const Track& track) {
    std::vector<AreaSample> out;
    out.reserve(track.history.size());
    for (const auto& e : track.history) out.push_back({e.frame, e.area, e.predicted});
    return out;
}

Tracker::Tracker(TrackerConfig config) : config_(config) { config_.validate(); }

const std::vector<Track>& Tracker::step(const std::vector<Region>& regions, int frame_index) {
    std::vector<size_t> live;
    std::vector<Region> predicted;
    for (size_t t = 0; t < tracks_.size(); ++t) {
        if (!tracks_[t].alive) continue;
        live.push_back(t);
        Region guess = tracks_[t].last_region;
        const auto p = tracks_[t].kalman.predict();
        guess.cx = p.x;
        guess.cy = p.y;
        predicted.push_back(std::move(guess));
    }

    const int rows = static_cast<int>(live.size());
    const int cols = static_cast<int>(regions.size());
    std::vector<double> cost(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) cost[static_cast<size_t>(i) * cols + j] = match_cost(predicted[i], regions[j], config_);
    }

    std::vector<char> track_matched(rows, false), region_matched(cols, false);
    if (config_.cost_gate > 0) {
        for (auto [i, j] : hungarian(cost, rows, cols)) {
            if (cost[static_cast<size_t>(i) * cols + j] > config_.cost_gate) continue;
            track_matched[i] = region_matched[j] = true;
            auto& track = tracks_[live[i]];
            const auto& r = regions[j];
            track.kalman.update(r.cx, r.cy);
            track.history.push_back({frame_index, r.cx, r.cy, r.area, false, r.bbox, r.shape});
            track.miss_count = 0;
            track.last_region = r;
        }
    }

    for (int i = 0; i < rows; ++i) {
        if (track_matched[i]) continue;
        auto& track = tracks_[live[i]];
        if (++track.miss_count > config_.max_age) {
            track.alive = false;
            continue;
        }
        const auto p = track.kalman.position();
        const auto& last = track.last_region;
        const cv::Rect moved(static_cast<int>(std::lround(last.bbox.x + p.x - last.cx)),
                             static_cast<int>(std::lround(last.bbox.y + p.y - last.cy)), last.bbox.width,
                             last.bbox.height);
        track.history.push_back({frame_index, p.x, p.y, last.area, true, moved, last.shape});
    }

    for (int j = 0; j < cols; ++j) {
        if (region_matched[j]) continue;
        const auto& r = regions[j];
        Track track;
        track.id = next_id_++;
        track.kalman = KalmanFilter(r.cx, r.cy, config_);
        track.history.push_back({frame_index, r.cx, r.cy, r.area, false, r.bbox, r.shape});
        track.last_region = r;
        tracks_.push_back(std::move(track));
    }
    return tracks_;
}

}  // namespace organet
