#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "scenebooth/image.hpp"

namespace scenebooth::encoders {

// Sinusoidal features: for x of arity k and F bands the output holds all
// sin(2^j pi x_i) first, then all cos(2^j pi x_i), each block ordered j-major.
struct fourier_embedder {
    int frequencies = 6;
    int arity       = 4;

    int output_dim() const { return 2 * arity * frequencies; }
    void embed_into(std::span<const double> x, double* out) const;
};

std::vector<double> fourier_embed(std::span<const double> x, const fourier_embedder& embedder);

struct subject_augment_config {
    int canvas_size  = 64;
    double scale_min = 0.8;
    double scale_max = 1.2;
};

constexpr double blank_canvas_value = 0.5;

// Rescales the subject by a uniform factor from the configured range and
// pastes it centered on a blank square canvas. Returns an RGB canvas.
image augment_subject(const image& subject, const subject_augment_config& cfg, std::mt19937_64& rng);
image augment_subject_at_scale(const image& subject, const subject_augment_config& cfg, double scale);

// Hashed bag-of-words text embedding; stands in for a frozen pretrained text tower.
class toy_text_encoder {
public:
    static constexpr std::uint64_t default_seed = 0x5ce4eb007ULL;

    explicit toy_text_encoder(int dim = 64, std::uint64_t seed = default_seed);

    std::vector<double> encode(std::string_view text) const;
    int dim() const { return dim_; }

private:
    int dim_;
    std::uint64_t seed_;
};

// Patch-mean random projection; stands in for a frozen pretrained vision tower.
class toy_vision_encoder {
public:
    static constexpr std::uint64_t default_seed = 0x715105eedULL;

    explicit toy_vision_encoder(int dim = 64, int grid = 4, std::uint64_t seed = default_seed);

    // Transparent pixels of an RGBA input read as the blank canvas value.
    std::vector<double> encode(const image& img) const;
    int dim() const { return dim_; }

    // Returned when the projected patch grid is exactly zero: the first basis vector.
    std::vector<double> zero_fallback() const;

private:
    int dim_;
    int grid_;
    std::vector<double> projection_;  // [dim][grid*grid*3]
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace scenebooth::encoders
