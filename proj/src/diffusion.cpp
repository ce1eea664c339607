#include "scenebooth/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "scenebooth/errors.hpp"

namespace scenebooth::diffusion {

schedule_kind parse_schedule_kind(const std::string& name) {
    if (name == "linear") return schedule_kind::linear;
    if (name == "cosine") return schedule_kind::cosine;
    throw invalid_range_error("unknown schedule kind: " + name);
}

std::string to_string(schedule_kind kind) { return kind == schedule_kind::linear ? "linear" : "cosine"; }

noise_schedule build_schedule(schedule_kind kind, int steps, double beta_start, double beta_end) {
    if (steps < 1) throw invalid_range_error("schedule: step count must be >= 1, got " + std::to_string(steps));
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw invalid_range_error("schedule: require 0 < beta_start <= beta_end < 1");

    noise_schedule s;
    s.steps = steps;
    s.betas.resize(steps);
    if (kind == schedule_kind::linear) {
        for (int i = 0; i < steps; ++i)
            s.betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    } else {
        constexpr double offset = 0.008;
        auto f = [&](double t) {
            double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (int i = 0; i < steps; ++i) s.betas[i] = std::clamp(1.0 - f(i + 1) / f(i), 1e-8, 0.999);
    }
    s.alphas.resize(steps);
    s.alpha_bars.resize(steps);
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        running *= s.alphas[i];
        s.alpha_bars[i] = running;
    }
    return s;
}

namespace {

void check_t(int t, const noise_schedule& s) {
    if (t < 1 || t > s.steps)
        throw invalid_range_error("timestep " + std::to_string(t) + " outside 1.." + std::to_string(s.steps));
}

}  // namespace

ag::tensor forward_noise(const ag::tensor& z0, int t, const ag::tensor& eps, const noise_schedule& schedule) {
    if (z0.shape != eps.shape)
        throw shape_error("forward_noise: noise shape " + ag::shape_str(eps.shape) + " differs from " +
                          ag::shape_str(z0.shape));
    check_t(t, schedule);
    const double a = std::sqrt(schedule.alpha_bar(t));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(t));
    ag::tensor out(z0.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

ag::tensor forward_noise_batch(const ag::tensor& z0, std::span<const int> t, const ag::tensor& eps,
                               const noise_schedule& schedule) {
    if (z0.shape != eps.shape) throw shape_error("forward_noise_batch: noise shape mismatch");
    if (z0.rank() < 1 || static_cast<int>(t.size()) != z0.dim(0))
        throw shape_error("forward_noise_batch: one timestep per batch element required");
    const std::size_t per = z0.numel() / t.size();
    ag::tensor out(z0.shape);
    for (std::size_t b = 0; b < t.size(); ++b) {
        check_t(t[b], schedule);
        const double a = std::sqrt(schedule.alpha_bar(t[b]));
        const double s = std::sqrt(1.0 - schedule.alpha_bar(t[b]));
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = a * z0[i] + s * eps[i];
    }
    return out;
}

ag::tensor predict_start(const ag::tensor& z_t, int t, const ag::tensor& eps, const noise_schedule& schedule) {
    check_t(t, schedule);
    const double ab = schedule.alpha_bar(t);
    ag::tensor out(z_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (z_t[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
    return out;
}

ag::tensor posterior_mean(const ag::tensor& z_t, int t, const ag::tensor& eps, const noise_schedule& schedule) {
    check_t(t, schedule);
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv  = 1.0 / std::sqrt(schedule.alpha(t));
    ag::tensor out(z_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = inv * (z_t[i] - coef * eps[i]);
    return out;
}

double posterior_variance(int t, const noise_schedule& schedule) {
    check_t(t, schedule);
    return schedule.beta(t) * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - schedule.alpha_bar(t));
}

loss_draw draw_noise(const ag::tensor& z0, const noise_schedule& schedule, std::mt19937_64& rng) {
    if (z0.rank() < 1 || z0.dim(0) < 1) throw shape_error("draw_noise: empty batch");
    loss_draw d;
    std::uniform_int_distribution<int> pick(1, schedule.steps);
    d.t.resize(z0.dim(0));
    for (auto& t : d.t) t = pick(rng);
    std::normal_distribution<double> normal;
    d.eps = ag::tensor(z0.shape);
    for (auto& e : d.eps.data) e = normal(rng);
    return d;
}

ag::var denoising_loss_at(const denoiser_fn& denoiser, const ag::tensor& z0, const loss_draw& draw,
                          const noise_schedule& schedule, std::span<const double> weights) {
    for (double v : z0.data)
        if (!std::isfinite(v)) throw training_error("denoising_loss: non-finite clean input");
    auto z_t  = ag::constant(forward_noise_batch(z0, draw.t, draw.eps, schedule));
    auto pred = denoiser(z_t, draw.t);
    if (pred->shape() != z0.shape)
        throw shape_error("denoiser output " + ag::shape_str(pred->shape()) + " differs from input " +
                          ag::shape_str(z0.shape));
    auto loss = ag::weighted_mse(pred, draw.eps, weights);
    if (!std::isfinite(loss->value[0])) throw training_error("denoising_loss: non-finite loss");
    return loss;
}

ag::var denoising_loss(const denoiser_fn& denoiser, const ag::tensor& z0, const noise_schedule& schedule,
                       std::mt19937_64& rng, std::span<const double> weights) {
    return denoising_loss_at(denoiser, z0, draw_noise(z0, schedule, rng), schedule, weights);
}

ag::tensor ancestral_sample(const denoiser_fn& denoiser, const ag::shape_t& shape, const noise_schedule& schedule,
                            std::mt19937_64& rng, std::optional<clamp_range> clamp) {
    if (shape.empty() || shape[0] < 1) throw shape_error("ancestral_sample: empty shape");
    ag::no_grad_guard no_grad;
    std::normal_distribution<double> normal;
    ag::tensor z(shape);
    for (auto& v : z.data) v = normal(rng);
    std::vector<int> ts(shape[0]);
    for (int t = schedule.steps; t >= 1; --t) {
        std::fill(ts.begin(), ts.end(), t);
        auto eps = denoiser(ag::constant(z), ts)->value;
        if (eps.shape != z.shape) throw shape_error("ancestral_sample: denoiser changed the shape");
        ag::tensor next = posterior_mean(z, t, eps, schedule);
        if (t > 1) {
            const double sigma = std::sqrt(posterior_variance(t, schedule));
            for (auto& v : next.data) v += sigma * normal(rng);
        }
        for (double v : next.data)
            if (!std::isfinite(v)) throw sampling_error("ancestral_sample: non-finite value at t=" + std::to_string(t));
        z = std::move(next);
    }
    if (clamp)
        for (auto& v : z.data) v = std::clamp(v, clamp->first, clamp->second);
    return z;
}

}  // namespace scenebooth::diffusion
