#pragma once

// Test-only generators and independent reference computations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "scenebooth/layout.hpp"
#include "scenebooth/layoutgen.hpp"
#include "scenebooth/paintnet.hpp"

namespace sbtest {

using scenebooth::bbox;
using scenebooth::layout;

inline bbox random_box(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double w = 0.05 + 0.6 * u(rng), h = 0.05 + 0.6 * u(rng);
    const double x0 = u(rng) * (1.0 - w), y0 = u(rng) * (1.0 - h);
    return bbox::from_corners(x0, y0, x0 + w, y0 + h);
}

inline layout random_layout(std::mt19937_64& rng, int n, int vocab) {
    std::uniform_int_distribution<int> word(0, vocab - 1);
    layout l;
    for (int i = 0; i < n; ++i) l.push_back({{"p" + std::to_string(word(rng)), i == 0}, random_box(rng)});
    return l;
}

// Area overlap by counting cell centres of a res x res grid over [lo, hi]^2.
inline double raster_iou(const bbox& a, const bbox& b, int res, double lo = 0.0, double hi = 1.0) {
    long ia = 0, ib = 0, both = 0;
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const double px = lo + (hi - lo) * (x + 0.5) / res, py = lo + (hi - lo) * (y + 0.5) / res;
            const bool in_a = px >= a.left() && px < a.right() && py >= a.top() && py < a.bottom();
            const bool in_b = px >= b.left() && px < b.right() && py >= b.top() && py < b.bottom();
            ia += in_a;
            ib += in_b;
            both += in_a && in_b;
        }
    const long uni = ia + ib - both;
    return uni == 0 ? 0.0 : static_cast<double>(both) / uni;
}

inline double box_iou(const bbox& a, const bbox& b) {
    const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
    const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
    const double inter = iw * ih;
    const double uni   = a.w * a.h + b.w * b.h - inter;
    return uni <= 0 ? 0.0 : inter / uni;
}

// Best total matched IoU over every injection of the smaller layout into the
// larger one; pairs with different phrases contribute nothing.
inline double exhaustive_match_total(const layout& a, const layout& b) {
    const layout& s = a.size() <= b.size() ? a : b;
    const layout& l = a.size() <= b.size() ? b : a;
    std::vector<int> perm(l.size());
    std::iota(perm.begin(), perm.end(), 0);
    double best = 0.0;
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i].object.phrase == l[perm[i]].object.phrase) total += box_iou(s[i].box, l[perm[i]].box);
        best = std::max(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

inline double central_difference(const std::function<double()>& f, double& x, double h) {
    const double x0 = x;
    x               = x0 + h;
    const double fp = f();
    x               = x0 - h;
    const double fm = f();
    x               = x0;
    return (fp - fm) / (2 * h);
}

inline double relative_error(double analytic, double numeric) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

inline scenebooth::layoutgen::model_config small_layout_config() {
    scenebooth::layoutgen::model_config c;
    c.width  = 32;
    c.heads  = 2;
    c.blocks = 2;
    c.text_dim = 16;
    c.vis_dim  = 16;
    c.frequencies = 3;
    return c;
}

inline scenebooth::paintnet::model_config small_paint_config() {
    scenebooth::paintnet::model_config c;
    c.image_size = 16;
    c.ch0        = 8;
    c.ch1        = 16;
    c.groups     = 4;
    c.heads      = 2;
    c.time_dim   = 16;
    c.text_dim   = 16;
    c.frequencies = 3;
    c.grounding_hidden = 16;
    return c;
}

}  // namespace sbtest
