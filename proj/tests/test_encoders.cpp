#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "scenebooth/encoders.hpp"
#include "scenebooth/errors.hpp"

using namespace scenebooth;
using namespace scenebooth::encoders;

namespace {

image solid(int w, int h, double r, double g, double b) {
    image img(w, h, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.at(0, y, x) = r;
            img.at(1, y, x) = g;
            img.at(2, y, x) = b;
        }
    return img;
}

double norm(const std::vector<double>& v) {
    double n = 0;
    for (double x : v) n += x * x;
    return std::sqrt(n);
}

}  // namespace

TEST_CASE("fourier features by hand") {
    const fourier_embedder e{2, 2};
    const std::vector<double> x{0.25, 0.5};
    const auto f = fourier_embed(x, e);
    REQUIRE(f.size() == 8);
    REQUIRE(e.output_dim() == 8);
    const double pi = std::numbers::pi;
    const std::vector<double> expect{std::sin(pi * 0.25),     std::sin(pi * 0.5),     std::sin(2 * pi * 0.25),
                                     std::sin(2 * pi * 0.5),  std::cos(pi * 0.25),    std::cos(pi * 0.5),
                                     std::cos(2 * pi * 0.25), std::cos(2 * pi * 0.5)};
    for (int i = 0; i < 8; ++i) CHECK(f[i] == doctest::Approx(expect[i]).epsilon(1e-15));

    const auto zero = fourier_embed(std::vector<double>{0, 0, 0, 0}, fourier_embedder{});
    for (int i = 0; i < 24; ++i) CHECK(zero[i] == 0.0);
    for (int i = 24; i < 48; ++i) CHECK(zero[i] == 1.0);
}

TEST_CASE("fourier features separate distinct boxes") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const fourier_embedder e{};
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> a{u(rng), u(rng), u(rng), u(rng)}, b = a;
        // perturb one coordinate by a small, randomly signed amount
        const int k = i % 4;
        b[k]        = std::clamp(b[k] + (u(rng) < 0.5 ? -1 : 1) * (1e-4 + 0.1 * u(rng)), 0.0, 1.0);
        if (b[k] == a[k]) continue;
        const auto fa = fourier_embed(a, e), fb = fourier_embed(b, e);
        double d      = 0;
        for (std::size_t j = 0; j < fa.size(); ++j) d += std::abs(fa[j] - fb[j]);
        CHECK(d > 0.0);
        for (double v : fa) CHECK(std::abs(v) <= 1.0);
    }
}

TEST_CASE("subject augmentation") {
    image subject(10, 6, 4, 0.0);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 10; ++x) {
            subject.at(0, y, x) = 1.0;
            subject.at(3, y, x) = 1.0;
        }
    subject_augment_config cfg{32, 0.8, 1.2};
    SUBCASE("scale sets the pasted size and keeps the aspect ratio") {
        for (double s : {0.8, 1.0, 1.2, 2.0}) {
            const auto c = augment_subject_at_scale(subject, cfg, s);
            CHECK(c.width == 32);
            CHECK(c.channels == 3);
            int x0 = 32, x1 = -1, y0 = 32, y1 = -1;
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    if (c.at(0, y, x) == 1.0) {
                        x0 = std::min(x0, x), x1 = std::max(x1, x);
                        y0 = std::min(y0, y), y1 = std::max(y1, y);
                    }
            CHECK(x1 - x0 + 1 == std::lround(10 * s));
            CHECK(y1 - y0 + 1 == std::lround(6 * s));
            // centered
            CHECK(std::abs((x0 + x1) - 31) <= 1);
            CHECK(std::abs((y0 + y1) - 31) <= 1);
        }
    }
    SUBCASE("transparent pixels leave the blank canvas") {
        auto holed          = subject;
        holed.at(3, 0, 0)   = 0.0;
        const auto c        = augment_subject_at_scale(holed, cfg, 1.0);
        CHECK(c.at(0, 13, 11) == blank_canvas_value);
        CHECK(c.at(0, 0, 0) == blank_canvas_value);
    }
    SUBCASE("random scales stay in range and repeat under a seed") {
        std::mt19937_64 r1(3), r2(3);
        for (int i = 0; i < 50; ++i) CHECK(augment_subject(subject, cfg, r1) == augment_subject(subject, cfg, r2));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(augment_subject_at_scale(subject, subject_augment_config{8, 1, 1}, 1.0), input_error);
        CHECK_THROWS_AS(augment_subject_at_scale(image{}, cfg, 1.0), input_error);
        std::mt19937_64 r(1);
        CHECK_THROWS_AS(augment_subject(subject, subject_augment_config{32, 1.2, 0.8}, r), invalid_range_error);
    }
}

TEST_CASE("text encoder") {
    const toy_text_encoder t(64);
    const auto dog = t.encode("dog"), grass = t.encode("grass");
    CHECK(dog.size() == 64);
    CHECK(norm(dog) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dog == toy_text_encoder(64).encode("dog"));
    CHECK(dog == t.encode("  DOG! "));
    CHECK(cosine_similarity(dog, grass) < 0.5);
    CHECK(cosine_similarity(t.encode("a dog on grass"), dog) > cosine_similarity(t.encode("a cat on grass"), dog));
    CHECK(toy_text_encoder(64, 7).encode("dog") != dog);
    CHECK_THROWS_AS(t.encode(" .,"), input_error);
}

TEST_CASE("vision encoder") {
    const toy_vision_encoder v(64);
    const auto red = v.encode(solid(16, 16, 1, 0, 0)), blue = v.encode(solid(16, 16, 0, 0, 1));
    CHECK(norm(red) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_similarity(red, blue) < 0.9);
    CHECK(red == v.encode(solid(16, 16, 1, 0, 0)));
    // patch means are resolution independent for solid colours
    const auto red_big = v.encode(solid(40, 24, 1, 0, 0));
    CHECK(cosine_similarity(red, red_big) == doctest::Approx(1.0).epsilon(1e-12));
    // a black image projects to zero
    CHECK(v.encode(solid(8, 8, 0, 0, 0)) == v.zero_fallback());
    // fully transparent input reads as the blank canvas
    image clear(8, 8, 4, 0.0);
    CHECK(v.encode(clear) == v.encode(solid(8, 8, blank_canvas_value, blank_canvas_value, blank_canvas_value)));
    CHECK_THROWS_AS(v.encode(image{}), input_error);
}
