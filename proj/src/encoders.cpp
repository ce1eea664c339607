#include "scenebooth/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <string>

#include "scenebooth/errors.hpp"

namespace scenebooth::encoders {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
}

}  // namespace

void fourier_embedder::embed_into(std::span<const double> x, double* out) const {
    const int k = static_cast<int>(x.size());
    const int half = k * frequencies;
    for (int j = 0; j < frequencies; ++j) {
        const double f = std::ldexp(std::numbers::pi, j);
        for (int i = 0; i < k; ++i) {
            out[j * k + i]        = std::sin(f * x[i]);
            out[half + j * k + i] = std::cos(f * x[i]);
        }
    }
}

std::vector<double> fourier_embed(std::span<const double> x, const fourier_embedder& embedder) {
    std::vector<double> out(2 * x.size() * embedder.frequencies);
    embedder.embed_into(x, out.data());
    return out;
}

image augment_subject_at_scale(const image& subject, const subject_augment_config& cfg, double scale) {
    if (subject.empty()) throw input_error("augment_subject: empty subject image");
    const int w = std::max(1, static_cast<int>(std::lround(subject.width * scale)));
    const int h = std::max(1, static_cast<int>(std::lround(subject.height * scale)));
    if (w > cfg.canvas_size || h > cfg.canvas_size)
        throw input_error("augment_subject: scaled subject " + std::to_string(w) + "x" + std::to_string(h) +
                          " exceeds canvas " + std::to_string(cfg.canvas_size));
    image scaled = resize_nearest(subject, w, h);
    image canvas(cfg.canvas_size, cfg.canvas_size, 3, blank_canvas_value);
    const int x0 = (cfg.canvas_size - w) / 2, y0 = (cfg.canvas_size - h) / 2;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!scaled.opaque(y, x)) continue;
            for (int c = 0; c < 3; ++c) canvas.at(c, y0 + y, x0 + x) = scaled.at(c, y, x);
        }
    return canvas;
}

image augment_subject(const image& subject, const subject_augment_config& cfg, std::mt19937_64& rng) {
    if (!(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max && cfg.scale_max < 2.0))
        throw invalid_range_error("augment_subject: scale range must lie in (0, 2)");
    double s = cfg.scale_min;
    if (cfg.scale_max > cfg.scale_min) s = std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng);
    return augment_subject_at_scale(subject, cfg, s);
}

toy_text_encoder::toy_text_encoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

std::vector<double> toy_text_encoder::encode(std::string_view text) const {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw input_error("text encoder: empty string");
    std::vector<double> out(dim_, 0.0);
    for (auto& tok : tokens) {
        std::mt19937_64 gen(fnv1a(tok, seed_));
        std::normal_distribution<double> normal;
        for (auto& v : out) v += normal(gen);
    }
    for (auto& v : out) v /= static_cast<double>(tokens.size());
    normalize(out);
    return out;
}

toy_vision_encoder::toy_vision_encoder(int dim, int grid, std::uint64_t seed) : dim_(dim), grid_(grid) {
    const int in = grid * grid * 3;
    projection_.resize(static_cast<std::size_t>(dim) * in);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    for (auto& v : projection_) v = normal(gen);
}

std::vector<double> toy_vision_encoder::zero_fallback() const {
    std::vector<double> v(dim_, 0.0);
    v[0] = 1.0;
    return v;
}

std::vector<double> toy_vision_encoder::encode(const image& img) const {
    if (img.empty() || img.width < 1 || img.height < 1) throw input_error("vision encoder: empty image");
    const int in = grid_ * grid_ * 3;
    std::vector<double> patches(in, 0.0);
    for (int py = 0; py < grid_; ++py)
        for (int px = 0; px < grid_; ++px) {
            const int y0 = py * img.height / grid_, y1 = std::max(y0 + 1, (py + 1) * img.height / grid_);
            const int x0 = px * img.width / grid_, x1 = std::max(x0 + 1, (px + 1) * img.width / grid_);
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                int n      = 0;
                for (int y = y0; y < std::min(y1, img.height); ++y)
                    for (int x = x0; x < std::min(x1, img.width); ++x, ++n)
                        acc += img.opaque(y, x) ? img.at(c, y, x) : blank_canvas_value;
                patches[(py * grid_ + px) * 3 + c] = n ? acc / n : 0.0;
            }
        }
    std::vector<double> out(dim_, 0.0);
    for (int i = 0; i < dim_; ++i)
        for (int j = 0; j < in; ++j) out[i] += projection_[static_cast<std::size_t>(i) * in + j] * patches[j];
    double n = 0.0;
    for (double v : out) n += v * v;
    if (n < 1e-24) return zero_fallback();
    normalize(out);
    return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

}  // namespace scenebooth::encoders
