#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "scenebooth/image.hpp"
#include "scenebooth/layout.hpp"

namespace scenebooth::metrics {

double iou(const bbox& a, const bbox& b);

// Minimum-cost assignment (Hungarian method with potentials). cost is
// rows x cols with rows <= cols; returns the column assigned to every row.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

struct match_result {
    std::vector<std::pair<int, int>> assignment;  // (index in a, index in b)
    double mean_iou = 0.0;
};

// Maximum-IoU matching restricted to equal phrases. Unmatched objects count as
// zero in a mean taken over max(|a|, |b|).
match_result optimal_match(const layout& a, const layout& b);

double max_iou_at_k(std::span<const layout> generated, const layout& ground_truth);

struct gaussian_summary {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Sample mean and unbiased covariance of row feature vectors.
gaussian_summary summarize(const std::vector<std::vector<double>>& features);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); throws invalid_range_error
// when a covariance has an eigenvalue below -1e-8 (relative to its scale).
double frechet_distance(const gaussian_summary& a, const gaussian_summary& b);

struct detection {
    int image_id = 0;
    std::string category;
    bbox box;  // normalised center form
    double score = 1.0;
};

struct ground_truth_box {
    std::string category;
    bbox box;
};

struct ap_result {
    std::vector<double> thresholds;
    std::vector<double> per_threshold;  // mean over categories with ground truth
    double ap   = 0.0;                  // mean over all thresholds
    double ap50 = 0.0;
    double ap75 = 0.0;
};

std::vector<double> coco_iou_thresholds();

// COCO-style AP: greedy score-descending matching per category (ties broken by
// ascending detection index), 101-point interpolated precision.
// ground_truth[i] holds the boxes of image i.
ap_result average_precision(const std::vector<detection>& detections,
                            const std::vector<std::vector<ground_truth_box>>& ground_truth,
                            const std::vector<double>& thresholds = coco_iou_thresholds());

struct palette_entry {
    std::string category;
    std::array<double, 3> rgb{};
};

struct oracle_options {
    double tolerance = 1e-6;  // per-channel max deviation for a pixel to match a colour
    int min_area     = 1;     // smaller connected components are dropped
};

// Connected components (4-neighbourhood) per palette colour; unknown colours are ignored.
std::vector<detection> oracle_detect(const image& img, const std::vector<palette_entry>& palette,
                                     const oracle_options& opts = {}, int image_id = 0);

// COCO results form: [{image_id, category, bbox: [x, y, w, h] top-left absolute, score}].
nlohmann::json detections_to_coco(const std::vector<detection>& dets, int width, int height);
std::vector<detection> detections_from_coco(const nlohmann::json& j, int width, int height);

}  // namespace scenebooth::metrics
