#include "scenebooth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "scenebooth/errors.hpp"

namespace scenebooth::metrics {

double iou(const bbox& a, const bbox& b) {
    const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
    const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
    const double inter = iw * ih;
    const double uni   = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    const int m = static_cast<int>(cost[0].size());
    if (m < n) throw input_error("hungarian: needs rows <= cols");
    constexpr double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials formulation; p[j] is the row matched to column j.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1       = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j]  = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1    = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0]        = p[j1];
            j0           = j1;
        } while (j0);
    }
    std::vector<int> assign(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) assign[p[j] - 1] = j - 1;
    return assign;
}

match_result optimal_match(const layout& a, const layout& b) {
    match_result res;
    if (a.empty() || b.empty()) return res;
    const bool transpose = a.size() > b.size();
    const layout& rows   = transpose ? b : a;
    const layout& cols   = transpose ? a : b;
    std::vector<std::vector<double>> cost(rows.size(), std::vector<double>(cols.size(), 0.0));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            if (rows[i].object.phrase == cols[j].object.phrase) cost[i][j] = -iou(rows[i].box, cols[j].box);
    auto assign  = hungarian(cost);
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int j = assign[i];
        if (j < 0 || rows[i].object.phrase != cols[j].object.phrase) continue;
        total += -cost[i][j];
        if (transpose) res.assignment.emplace_back(j, static_cast<int>(i));
        else res.assignment.emplace_back(static_cast<int>(i), j);
    }
    std::sort(res.assignment.begin(), res.assignment.end());
    res.mean_iou = total / static_cast<double>(std::max(a.size(), b.size()));
    return res;
}

double max_iou_at_k(std::span<const layout> generated, const layout& ground_truth) {
    if (generated.empty()) throw input_error("max_iou_at_k: no generated layouts");
    double best = 0.0;
    for (auto& g : generated) best = std::max(best, optimal_match(g, ground_truth).mean_iou);
    return best;
}

gaussian_summary summarize(const std::vector<std::vector<double>>& features) {
    if (features.size() < 2) throw input_error("summarize: need at least two feature vectors");
    const int n = static_cast<int>(features.size()), d = static_cast<int>(features[0].size());
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i) {
        if (static_cast<int>(features[i].size()) != d) throw shape_error("summarize: ragged feature vectors");
        for (int j = 0; j < d; ++j) x(i, j) = features[i][j];
    }
    gaussian_summary s;
    s.mean            = x.colwise().mean().transpose();
    Eigen::MatrixXd c = x.rowwise() - s.mean.transpose();
    s.cov             = (c.transpose() * c) / static_cast<double>(n - 1);
    return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* which) {
    Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    Eigen::VectorXd ev = es.eigenvalues();
    const double tol   = 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    if (ev.minCoeff() < -tol)
        throw invalid_range_error(std::string("frechet_distance: covariance ") + which +
                                  " is not positive semi-definite (eigenvalue " + std::to_string(ev.minCoeff()) + ")");
    ev = ev.cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const gaussian_summary& a, const gaussian_summary& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size() ||
        a.cov.cols() != a.cov.rows() || b.cov.cols() != b.cov.rows())
        throw shape_error("frechet_distance: dimension mismatch");
    const Eigen::MatrixXd sa = psd_sqrt(a.cov, "a");
    psd_sqrt(b.cov, "b");
    // tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), the latter symmetric PSD.
    Eigen::MatrixXd inner = sa * b.cov * sa;
    inner                 = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

ap_result average_precision(const std::vector<detection>& detections,
                            const std::vector<std::vector<ground_truth_box>>& ground_truth,
                            const std::vector<double>& thresholds) {
    ap_result res;
    res.thresholds = thresholds;
    std::set<std::string> categories;
    for (auto& img : ground_truth)
        for (auto& g : img) categories.insert(g.category);

    std::vector<int> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return detections[x].score > detections[y].score; });

    for (double thr : thresholds) {
        double sum_ap = 0.0;
        int n_cat     = 0;
        for (auto& cat : categories) {
            int n_gt = 0;
            std::vector<std::vector<char>> used(ground_truth.size());
            for (std::size_t i = 0; i < ground_truth.size(); ++i) {
                used[i].assign(ground_truth[i].size(), 0);
                for (auto& g : ground_truth[i]) n_gt += g.category == cat;
            }
            std::vector<double> precision, recall;
            int tp = 0, fp = 0;
            for (int di : order) {
                const auto& d = detections[di];
                if (d.category != cat) continue;
                int best_j      = -1;
                double best_iou = thr;
                if (d.image_id >= 0 && d.image_id < static_cast<int>(ground_truth.size())) {
                    const auto& gts = ground_truth[d.image_id];
                    for (std::size_t j = 0; j < gts.size(); ++j) {
                        if (gts[j].category != cat || used[d.image_id][j]) continue;
                        const double v = iou(d.box, gts[j].box);
                        if (v >= best_iou) {
                            best_iou = v;
                            best_j   = static_cast<int>(j);
                        }
                    }
                }
                if (best_j >= 0) {
                    used[d.image_id][best_j] = 1;
                    ++tp;
                } else {
                    ++fp;
                }
                precision.push_back(static_cast<double>(tp) / (tp + fp));
                recall.push_back(static_cast<double>(tp) / n_gt);
            }
            for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
                precision[i] = std::max(precision[i], precision[i + 1]);
            double ap = 0.0;
            for (int r = 0; r <= 100; ++r) {
                const double level = r / 100.0;
                auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
                if (it != recall.end()) ap += precision[it - recall.begin()];
            }
            sum_ap += ap / 101.0;
            ++n_cat;
        }
        res.per_threshold.push_back(n_cat ? sum_ap / n_cat : 0.0);
    }
    if (!res.per_threshold.empty())
        res.ap = std::accumulate(res.per_threshold.begin(), res.per_threshold.end(), 0.0) / res.per_threshold.size();
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (std::abs(thresholds[i] - 0.5) < 1e-9) res.ap50 = res.per_threshold[i];
        if (std::abs(thresholds[i] - 0.75) < 1e-9) res.ap75 = res.per_threshold[i];
    }
    return res;
}

std::vector<detection> oracle_detect(const image& img, const std::vector<palette_entry>& palette,
                                     const oracle_options& opts, int image_id) {
    const int W = img.width, H = img.height;
    std::vector<int> label(static_cast<std::size_t>(W) * H, -1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double best = opts.tolerance;
            for (std::size_t p = 0; p < palette.size(); ++p) {
                double dev = 0.0;
                for (int c = 0; c < 3; ++c) dev = std::max(dev, std::abs(img.at(c, y, x) - palette[p].rgb[c]));
                if (dev <= best) {
                    best                                      = dev;
                    label[static_cast<std::size_t>(y) * W + x] = static_cast<int>(p);
                }
            }
        }
    std::vector<detection> out;
    std::vector<char> seen(label.size(), 0);
    std::vector<int> stack;
    for (int start = 0; start < W * H; ++start) {
        if (label[start] < 0 || seen[start]) continue;
        const int lab = label[start];
        int x0 = W, y0 = H, x1 = -1, y1 = -1, area = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const int idx = stack.back();
            stack.pop_back();
            const int x = idx % W, y = idx / W;
            ++area;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (auto& n : nb) {
                if (n[0] < 0 || n[0] >= W || n[1] < 0 || n[1] >= H) continue;
                const int j = n[1] * W + n[0];
                if (!seen[j] && label[j] == lab) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
            }
        }
        if (area < opts.min_area) continue;
        out.push_back({image_id, palette[lab].category,
                       bbox::from_corners(static_cast<double>(x0) / W, static_cast<double>(y0) / H,
                                          static_cast<double>(x1 + 1) / W, static_cast<double>(y1 + 1) / H),
                       1.0});
    }
    return out;
}

nlohmann::json detections_to_coco(const std::vector<detection>& dets, int width, int height) {
    auto arr = nlohmann::json::array();
    for (auto& d : dets)
        arr.push_back({{"image_id", d.image_id},
                       {"category", d.category},
                       {"bbox", {d.box.left() * width, d.box.top() * height, d.box.w * width, d.box.h * height}},
                       {"score", d.score}});
    return arr;
}

std::vector<detection> detections_from_coco(const nlohmann::json& j, int width, int height) {
    std::vector<detection> out;
    try {
        for (auto& d : j) {
            auto b = d.at("bbox").get<std::vector<double>>();
            if (b.size() != 4) throw io_error("detection bbox must have four numbers");
            out.push_back({d.at("image_id").get<int>(), d.at("category").get<std::string>(),
                           bbox::from_corners(b[0] / width, b[1] / height, (b[0] + b[2]) / width, (b[1] + b[3]) / height),
                           d.at("score").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("detections: ") + e.what());
    }
    return out;
}

}  // namespace scenebooth::metrics
