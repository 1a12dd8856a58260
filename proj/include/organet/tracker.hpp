#pragma once

#include <opencv2/core.hpp>

#include <cstdint>
#include <utility>
#include <vector>

namespace organet {

/// One connected component of a segmentation mask.
struct Region {
    double cx = 0, cy = 0;  // centroid, pixels (x = column)
    int64_t area = 0;
    cv::Rect bbox;
    cv::Mat patch;  // CV_64F, ssim_patch_side^2, grey levels in [0, 255]
    cv::Mat shape;  // CV_8U {0,1} crop of the component inside bbox
};

enum class CostMode {
    Dissimilarity,  // alpha * d + beta * (1 - ssim): similar regions are cheap
    Literal,        // alpha * d + beta * ssim
};

struct TrackerConfig {
    double alpha = 1.0;
    double beta = 10.0;
    double cost_gate = 20.0;  // pairs costing more are rejected; <= 0 disables matching
    int max_age = 3;
    int64_t min_area = 20;
    double ssim_c1 = (0.01 * 255) * (0.01 * 255);
    double ssim_c2 = (0.03 * 255) * (0.03 * 255);
    int ssim_patch_side = 32;
    CostMode cost_mode = CostMode::Dissimilarity;
    double process_noise = 1e-2;
    double measurement_noise = 1.0;
    double initial_velocity_variance = 100.0;

    void validate() const;
};

/// 8-connected components of a {0,1} CV_8U mask with area >= min_area, in
/// label order. Patches come from `gray` (CV_8U or float, [0,255]) when given,
/// otherwise from the mask itself scaled to 255.
std::vector<Region> connected_regions(const cv::Mat& mask, const TrackerConfig& config, const cv::Mat& gray = {});

/// Single-window structural similarity over two equally sized patches.
double ssim(const cv::Mat& a, const cv::Mat& b, double c1, double c2);

double match_cost(const Region& a, const Region& b, const TrackerConfig& config);

/// Minimum-cost assignment of a row-major rows x cols matrix. Returns
/// min(rows, cols) (row, col) pairs sorted by row.
std::vector<std::pair<int, int>> hungarian(const std::vector<double>& cost, int rows, int cols);

/// Constant-velocity Kalman filter over (cx, cy, vx, vy).
class KalmanFilter {
public:
    KalmanFilter() = default;
    KalmanFilter(double cx, double cy, const TrackerConfig& config);
    KalmanFilter(const cv::Vec4d& state, const cv::Matx44d& covariance, double process_noise, double measurement_noise);

    /// Advances one frame and returns the predicted position.
    cv::Point2d predict();
    /// Corrects the state toward a measured position.
    void update(double cx, double cy);

    cv::Point2d position() const { return {state_[0], state_[1]}; }
    cv::Point2d velocity() const { return {state_[2], state_[3]}; }
    const cv::Vec4d& state() const { return state_; }
    const cv::Matx44d& covariance() const { return cov_; }

private:
    cv::Vec4d state_{0, 0, 0, 0};
    cv::Matx44d cov_ = cv::Matx44d::eye();
    double q_ = 1e-2;
    double r_ = 1.0;
};

struct TrackEntry {
    int frame = 0;
    double cx = 0, cy = 0;
    int64_t area = 0;
    bool predicted = false;  // Kalman placeholder; area carried from the last observation
    cv::Rect bbox;
    cv::Mat shape;
};

struct Track {
    int id = 0;
    KalmanFilter kalman;
    std::vector<TrackEntry> history;
    int miss_count = 0;
    bool alive = true;
    Region last_region;
};

struct AreaSample {
    int frame = 0;
    int64_t area = 0;
    bool carried = false;
};

std::vector<AreaSample> area_series(const Track& track);

/// Frame-to-frame tracker: Hungarian matching on the combined distance/SSIM
/// cost, cost gate, Kalman placeholders for unmatched tracks.
class Tracker {
public:
    explicit Tracker(TrackerConfig config = {});

    /// Consumes one frame's regions. Returns all tracks seen so far (alive and retired).
    const std::vector<Track>& step(const std::vector<Region>& regions, int frame_index);

    const std::vector<Track>& tracks() const { return tracks_; }
    const TrackerConfig& config() const { return config_; }

private:
    TrackerConfig config_;
    std::vector<Track> tracks_;
    int next_id_ = 0;
};

}  // namespace organet
