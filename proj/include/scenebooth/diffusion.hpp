#pragma once

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scenebooth/autograd.hpp"

namespace scenebooth::diffusion {

enum class schedule_kind { linear, cosine };

schedule_kind parse_schedule_kind(const std::string& name);

// Timesteps are 1-based: t in {1..steps}; the vectors are indexed by t-1.
struct noise_schedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(t - 1); }
    double alpha(int t) const { return alphas.at(t - 1); }
    double alpha_bar(int t) const { return alpha_bars.at(t - 1); }
    double alpha_bar_prev(int t) const { return t > 1 ? alpha_bars.at(t - 2) : 1.0; }
};

noise_schedule build_schedule(schedule_kind kind, int steps, double beta_start, double beta_end);

struct schedule_config {
    schedule_kind kind = schedule_kind::linear;
    int steps          = 100;
    double beta_start  = 1e-4;
    double beta_end    = 0.02;

    noise_schedule build() const { return build_schedule(kind, steps, beta_start, beta_end); }
};

std::string to_string(schedule_kind kind);

// Maps a noised batch and its per-sample timesteps to an epsilon prediction of
// identical shape. The leading dimension of z_t is the batch.
using denoiser_fn = std::function<ag::var(const ag::var& z_t, std::span<const int> t)>;

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
ag::tensor forward_noise(const ag::tensor& z0, int t, const ag::tensor& eps, const noise_schedule& schedule);

// Same closed form with one timestep per leading-dimension slice.
ag::tensor forward_noise_batch(const ag::tensor& z0, std::span<const int> t, const ag::tensor& eps,
                               const noise_schedule& schedule);

// Estimate of z0 from z_t and an epsilon prediction.
ag::tensor predict_start(const ag::tensor& z_t, int t, const ag::tensor& eps, const noise_schedule& schedule);

// Mean of the reverse step p(z_{t-1} | z_t) under an epsilon prediction.
ag::tensor posterior_mean(const ag::tensor& z_t, int t, const ag::tensor& eps, const noise_schedule& schedule);

// Variance of q(z_{t-1} | z_t, z0).
double posterior_variance(int t, const noise_schedule& schedule);

struct loss_draw {
    std::vector<int> t;
    ag::tensor eps;
};

// Samples t ~ U{1..T} per batch element and eps ~ N(0, I) with the shape of z0.
loss_draw draw_noise(const ag::tensor& z0, const noise_schedule& schedule, std::mt19937_64& rng);

// Mean squared error between the drawn eps and the denoiser's prediction.
// `weights` (same size as z0, optional) excludes padded elements.
ag::var denoising_loss(const denoiser_fn& denoiser, const ag::tensor& z0, const noise_schedule& schedule,
                       std::mt19937_64& rng, std::span<const double> weights = {});

// Loss at fixed (t, eps); used by the loss above and by gradient checks.
ag::var denoising_loss_at(const denoiser_fn& denoiser, const ag::tensor& z0, const loss_draw& draw,
                          const noise_schedule& schedule, std::span<const double> weights = {});

using clamp_range = std::pair<double, double>;

// DDPM ancestral sampling from pure noise. The clamp, when given, is applied to
// the final output only.
ag::tensor ancestral_sample(const denoiser_fn& denoiser, const ag::shape_t& shape, const noise_schedule& schedule,
                            std::mt19937_64& rng, std::optional<clamp_range> clamp = std::nullopt);

}  // namespace scenebooth::diffusion
