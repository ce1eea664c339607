#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "scenebooth/diffusion.hpp"
#include "scenebooth/errors.hpp"
#include "scenebooth/nn.hpp"
#include "support.hpp"

using namespace scenebooth;
using diffusion::schedule_kind;

namespace {

ag::tensor randn(ag::shape_t s, std::mt19937_64& rng) {
    ag::tensor t(std::move(s));
    std::normal_distribution<double> n;
    for (auto& v : t.data) v = n(rng);
    return t;
}

// Two-layer MLP on [z_t, t/T]; the smallest denoiser that exercises the loss path.
struct toy_denoiser {
    nn::parameter_store store;
    nn::linear_layer a, b;
    int dim, steps;

    toy_denoiser(int d, int hidden, int T, std::uint64_t seed) : dim(d), steps(T) {
        nn::rng_t rng(seed);
        a = nn::linear_layer::make(store, "a", d + 1, hidden, rng, true);
        b = nn::linear_layer::make(store, "b", hidden, d, rng, true);
    }
    diffusion::denoiser_fn fn() const {
        return [this](const ag::var& z, std::span<const int> t) {
            ag::tensor tt({static_cast<int>(t.size()), 1});
            for (std::size_t i = 0; i < t.size(); ++i) tt[i] = static_cast<double>(t[i]) / steps;
            return b(ag::silu(a(ag::concat_cols({z, ag::constant(tt)}))));
        };
    }
};

// Sinusoidal timestep features and two hidden layers, enough for a 2-D mixture.
struct mixture_denoiser {
    nn::parameter_store store;
    nn::linear_layer a, b, c;

    explicit mixture_denoiser(std::uint64_t seed) {
        nn::rng_t rng(seed);
        a = nn::linear_layer::make(store, "a", 2 + 16, 128, rng, true);
        b = nn::linear_layer::make(store, "b", 128, 128, rng, true);
        c = nn::linear_layer::make(store, "c", 128, 2, rng, true);
    }
    diffusion::denoiser_fn fn() const {
        return [this](const ag::var& z, std::span<const int> t) {
            const auto h = ag::silu(a(ag::concat_cols({z, ag::constant(nn::timestep_embedding(t, 16))})));
            return c(ag::silu(b(h)));
        };
    }
};

}  // namespace

TEST_CASE("single linear step keeps its beta") {
    const auto s = diffusion::build_schedule(schedule_kind::linear, 1, 0.1, 0.1);
    CHECK(s.betas == std::vector<double>{0.1});
    CHECK(s.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("linear schedule of 1000 steps nearly destroys the signal") {
    // running product computed independently from the beta formula
    double prod = 1.0;
    for (int i = 0; i < 1000; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
    const auto s = diffusion::build_schedule(schedule_kind::linear, 1000, 1e-4, 0.02);
    CHECK(s.alpha_bar(1000) < 1e-4);
    CHECK(std::abs(s.alpha_bar(1000) / prod - 1) < 1e-9);
}

TEST_CASE("schedule invariants hold for both families") {
    for (auto kind : {schedule_kind::linear, schedule_kind::cosine})
        for (int T : {1, 2, 10, 100, 1000}) {
            const auto s = diffusion::build_schedule(kind, T, 1e-4, 0.02);
            REQUIRE(s.steps == T);
            double prod = 1.0;
            for (int t = 1; t <= T; ++t) {
                CHECK(s.beta(t) > 0.0);
                CHECK(s.beta(t) < 1.0);
                CHECK(s.alpha(t) == doctest::Approx(1 - s.beta(t)).epsilon(1e-15));
                prod *= s.alpha(t);
                CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-12 * prod);
                if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            CHECK(s.alpha_bar(1) <= 1 - s.beta(1) + 1e-15);
        }
}

TEST_CASE("schedule rejects bad ranges") {
    CHECK_THROWS_AS(diffusion::build_schedule(schedule_kind::linear, 0, 1e-4, 0.02), invalid_range_error);
    CHECK_THROWS_AS(diffusion::build_schedule(schedule_kind::linear, 10, 0.0, 0.02), invalid_range_error);
    CHECK_THROWS_AS(diffusion::build_schedule(schedule_kind::linear, 10, 0.03, 0.02), invalid_range_error);
    CHECK_THROWS_AS(diffusion::build_schedule(schedule_kind::linear, 10, 1e-4, 1.0), invalid_range_error);
    CHECK_THROWS_AS(diffusion::parse_schedule_kind("sigmoid"), invalid_range_error);
}

TEST_CASE("forward noise closed form") {
    std::mt19937_64 rng(1);
    const auto s  = diffusion::build_schedule(schedule_kind::linear, 100, 1e-4, 0.02);
    const auto z0 = randn({8}, rng);
    SUBCASE("zero noise scales the signal") {
        const auto zt = diffusion::forward_noise(z0, 37, ag::tensor({8}), s);
        for (int i = 0; i < 8; ++i) CHECK(zt[i] == doctest::Approx(std::sqrt(s.alpha_bar(37)) * z0[i]).epsilon(1e-14));
    }
    SUBCASE("no noise schedule is the identity") {
        // the limit abar -> 1 approached by a single tiny beta
        const auto tiny = diffusion::build_schedule(schedule_kind::linear, 1, 1e-15, 1e-15);
        const auto zt   = diffusion::forward_noise(z0, 1, randn({8}, rng), tiny);
        for (int i = 0; i < 8; ++i) CHECK(zt[i] == doctest::Approx(z0[i]).epsilon(1e-7));
    }
    SUBCASE("shape mismatch and bad timestep") {
        CHECK_THROWS_AS(diffusion::forward_noise(z0, 1, ag::tensor({7}), s), shape_error);
        CHECK_THROWS_AS(diffusion::forward_noise(z0, 0, ag::tensor({8}), s), invalid_range_error);
        CHECK_THROWS_AS(diffusion::forward_noise(z0, 101, ag::tensor({8}), s), invalid_range_error);
    }
}

TEST_CASE("forward noise variance from a zero signal") {
    const auto s = diffusion::build_schedule(schedule_kind::cosine, 50, 1e-4, 0.02);
    std::mt19937_64 rng(2);
    for (int t : {1, 7, 25, 50}) {
        const auto eps = randn({10000}, rng);
        const auto zt  = diffusion::forward_noise(ag::tensor({10000}), t, eps, s);
        double m = std::accumulate(zt.data.begin(), zt.data.end(), 0.0) / 1e4, v = 0;
        for (double x : zt.data) v += (x - m) * (x - m);
        v /= 9999;
        CHECK(std::abs(v / (1 - s.alpha_bar(t)) - 1) < 0.05);
    }
}

TEST_CASE("posterior step with the true noise recovers the signal") {
    std::mt19937_64 rng(3);
    const auto s = diffusion::build_schedule(schedule_kind::linear, 100, 1e-4, 0.02);
    for (int trial = 0; trial < 20; ++trial) {
        const auto z0  = randn({8}, rng);
        const auto eps = randn({8}, rng);
        const int t    = 1 + trial * 5;
        const auto zt  = diffusion::forward_noise(z0, t, eps, s);
        const auto x0  = diffusion::predict_start(zt, t, eps, s);
        for (int i = 0; i < 8; ++i) CHECK(std::abs(x0[i] - z0[i]) < 1e-5);
    }
    const auto z0 = randn({8}, rng), eps = randn({8}, rng);
    const auto m  = diffusion::posterior_mean(diffusion::forward_noise(z0, 1, eps, s), 1, eps, s);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(m[i] - z0[i]) < 1e-5);
    CHECK(diffusion::posterior_variance(1, s) == doctest::Approx(0.0));
}

TEST_CASE("loss of a perfect and of a silent denoiser") {
    const auto s = diffusion::build_schedule(schedule_kind::linear, 100, 1e-4, 0.02);
    std::mt19937_64 rng(4);
    const auto z0 = randn({16, 8}, rng);
    SUBCASE("perfect denoiser") {
        std::mt19937_64 r1(9), r2(9);
        const auto draw = diffusion::draw_noise(z0, s, r1);
        auto oracle     = [&](const ag::var&, std::span<const int>) { return ag::constant(draw.eps); };
        CHECK(diffusion::denoising_loss(oracle, z0, s, r2)->value[0] == doctest::Approx(0.0));
    }
    SUBCASE("zero prediction costs the noise variance") {
        const ag::tensor big = randn({10000, 1}, rng);
        auto zero            = [](const ag::var& z, std::span<const int>) { return ag::constant(ag::tensor(z->shape())); };
        CHECK(std::abs(diffusion::denoising_loss(zero, big, s, rng)->value[0] - 1.0) < 0.05);
    }
    SUBCASE("seeded loss repeats") {
        toy_denoiser d(8, 16, 100, 5);
        std::mt19937_64 r1(11), r2(11);
        CHECK(diffusion::denoising_loss(d.fn(), z0, s, r1)->value[0] ==
              diffusion::denoising_loss(d.fn(), z0, s, r2)->value[0]);
    }
    SUBCASE("non-finite input is a training error") {
        auto bad = z0;
        bad[3]   = std::nan("");
        toy_denoiser d(8, 16, 100, 5);
        CHECK_THROWS_AS(diffusion::denoising_loss(d.fn(), bad, s, rng), training_error);
    }
}

TEST_CASE("loss gradient of a toy denoiser matches finite differences") {
    const auto s = diffusion::build_schedule(schedule_kind::linear, 100, 1e-4, 0.02);
    std::mt19937_64 rng(6);
    toy_denoiser d(4, 8, 100, 7);
    const auto z0   = randn({5, 4}, rng);
    const auto draw = diffusion::draw_noise(z0, s, rng);
    auto loss       = [&] { return diffusion::denoising_loss_at(d.fn(), z0, draw, s); };
    d.store.zero_grad();
    ag::backward(loss());
    for (auto& e : d.store.entries())
        for (std::size_t i = 0; i < e.value->value.numel(); ++i) {
            const double a = e.value->grad[i];
            const double n = sbtest::central_difference([&] { return loss()->value[0]; }, e.value->value.data[i], 1e-5);
            CHECK(sbtest::relative_error(a, n) < 1e-4);
        }
}

TEST_CASE("ancestral sampling") {
    std::mt19937_64 rng(8);
    SUBCASE("one step with the exact noise lands on the signal") {
        const auto s  = diffusion::build_schedule(schedule_kind::linear, 1, 0.3, 0.3);
        const auto z0 = randn({3, 4}, rng);
        auto oracle   = [&](const ag::var& z, std::span<const int> t) {
            ag::tensor eps(z->shape());
            const double ab = s.alpha_bar(t[0]);
            for (std::size_t i = 0; i < eps.numel(); ++i)
                eps[i] = (z->value[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1 - ab);
            return ag::constant(eps);
        };
        const auto out = diffusion::ancestral_sample(oracle, {3, 4}, s, rng);
        for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(z0[i]).epsilon(1e-12));
    }
    SUBCASE("seeded samples repeat and clamp applies") {
        const auto s = diffusion::build_schedule(schedule_kind::linear, 20, 1e-4, 0.02);
        toy_denoiser d(4, 8, 20, 3);
        std::mt19937_64 r1(5), r2(5);
        const auto a = diffusion::ancestral_sample(d.fn(), {6, 4}, s, r1, diffusion::clamp_range{0.0, 1.0});
        const auto b = diffusion::ancestral_sample(d.fn(), {6, 4}, s, r2, diffusion::clamp_range{0.0, 1.0});
        CHECK(a.data == b.data);
        for (double v : a.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    SUBCASE("non-finite prediction is a sampling error") {
        const auto s = diffusion::build_schedule(schedule_kind::linear, 5, 1e-4, 0.02);
        auto bad     = [](const ag::var& z, std::span<const int>) {
            return ag::constant(ag::tensor(z->shape(), std::numeric_limits<double>::infinity()));
        };
        CHECK_THROWS_AS(diffusion::ancestral_sample(bad, {2, 2}, s, rng), sampling_error);
    }
}

TEST_CASE("a denoiser trained on a two-mode mixture samples both modes") {
    const auto s = diffusion::build_schedule(schedule_kind::linear, 50, 1e-4, 0.2);
    const std::array<std::array<double, 2>, 2> means{{{-0.6, 0.4}, {0.5, -0.5}}};
    mixture_denoiser d(21);
    nn::adam opt(d.store.trainable(), nn::adam_config{3e-3, 0.9, 0.999, 1e-8, 1.0});
    std::mt19937_64 rng(22);
    std::normal_distribution<double> jitter(0.0, 0.05);
    std::bernoulli_distribution mode(0.5);
    for (int step = 0; step < 2000; ++step) {
        ag::tensor z0({128, 2});
        for (int i = 0; i < 128; ++i) {
            const auto& m = means[mode(rng)];
            z0[2 * i]     = m[0] + jitter(rng);
            z0[2 * i + 1] = m[1] + jitter(rng);
        }
        ag::backward(diffusion::denoising_loss(d.fn(), z0, s, rng));
        opt.step();
    }
    const auto out = diffusion::ancestral_sample(d.fn(), {1000, 2}, s, rng);
    std::array<std::array<double, 2>, 2> sum{};
    std::array<int, 2> count{};
    for (int i = 0; i < 1000; ++i) {
        const double x = out[2 * i], y = out[2 * i + 1];
        const int k    = std::hypot(x - means[0][0], y - means[0][1]) < std::hypot(x - means[1][0], y - means[1][1]) ? 0 : 1;
        sum[k][0] += x;
        sum[k][1] += y;
        ++count[k];
    }
    for (int k = 0; k < 2; ++k) {
        REQUIRE(count[k] > 100);
        CHECK(std::abs(sum[k][0] / count[k] - means[k][0]) < 0.1);
        CHECK(std::abs(sum[k][1] / count[k] - means[k][1]) < 0.1);
    }
}
