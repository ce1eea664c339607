#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scenebooth/autograd.hpp"
#include "scenebooth/diffusion.hpp"
#include "scenebooth/encoders.hpp"
#include "scenebooth/image.hpp"
#include "scenebooth/layout.hpp"
#include "scenebooth/nn.hpp"

namespace scenebooth::layoutgen {

struct model_config {
    int frequencies       = 6;
    double geometry_scale = 0.25;  // noised coordinates are scaled before the Fourier features
    int text_dim          = 64;
    int vis_dim           = 64;
    int width             = 256;
    int heads             = 4;
    int blocks            = 4;
    int ff_mult           = 2;
    int max_objects       = 8;
};

struct train_config {
    double lr        = 1e-4;
    int batch        = 64;
    long iterations  = 2000;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
};

// Frozen feature extractors shared by training and sampling.
struct frozen_encoders {
    encoders::toy_text_encoder text{64};
    encoders::toy_vision_encoder vision{64};
    encoders::subject_augment_config augment{};
};

// Conditioning inputs of one scene: the subject image, object phrases and caption.
struct scene_query {
    std::vector<object_spec> objects;
    image subject;  // RGBA crop or RGB image of the subject
    std::string caption;
};

struct training_example {
    scene_query query;
    layout target;  // same objects, ground-truth boxes
};

training_example make_example(const layout& target, const image& subject, const std::string& caption);

// Per-row conditioning of a padded batch of B scenes with S object slots.
struct token_batch {
    int batch = 0;
    int slots = 0;
    ag::tensor text;                 // [B*S, text_dim]
    ag::tensor visual;               // [B*S, vis_dim], subject feature on subject rows
    std::vector<std::uint8_t> use_null;  // 1 where the visual slot takes the null vector
    std::vector<std::uint8_t> valid;     // 1 on real object rows
    ag::tensor caption;              // [B, text_dim]
};

// Encodes queries into a padded batch. When augment_rng is given the subject is
// randomly rescaled before visual encoding, otherwise it is encoded at scale 1.
token_batch encode_batch(std::span<const scene_query* const> queries, const frozen_encoders& enc,
                         std::mt19937_64* augment_rng, int slots = 0);
// k copies of a single query.
token_batch encode_repeated(const scene_query& query, int k, const frozen_encoders& enc);

class layout_denoiser {
public:
    layout_denoiser(const model_config& cfg, std::uint64_t init_seed);

    const model_config& config() const { return cfg_; }
    nn::parameter_store& params() { return store_; }
    const nn::parameter_store& params() const { return store_; }
    int token_dim() const { return 8 * cfg_.frequencies + cfg_.text_dim + cfg_.vis_dim; }
    const ag::var& null_vector() const { return null_; }

    // Cat(fourier(g), phrase feature, visual feature or null) per row; z_t is [B,S,4].
    ag::var object_tokens(const ag::tensor& z_t, const token_batch& cond) const;
    // Transformer stack over object tokens; returns [B,S,4].
    ag::var denoise(const ag::var& tokens, const token_batch& cond, std::span<const int> t) const;
    ag::var operator()(const ag::tensor& z_t, std::span<const int> t, const token_batch& cond) const {
        return denoise(object_tokens(z_t, cond), cond, t);
    }

    diffusion::denoiser_fn bind(const token_batch& cond) const;

private:
    struct block {
        nn::layer_norm_layer ln_self, ln_cross, ln_ff;
        nn::attention_layer self_attn, cross_attn;
        nn::feed_forward_layer ff;
    };

    model_config cfg_;
    nn::parameter_store store_;
    ag::var null_;
    nn::linear_layer in_proj_, time_a_, time_b_;
    std::vector<block> blocks_;
    nn::layer_norm_layer ln_out_;
    nn::linear_layer head_;
};

// Geometry in diffusion space: [0,1] data coordinates mapped affinely to [-1,1].
ag::tensor layouts_to_tensor(std::span<const layout* const> layouts, int slots, std::vector<double>* weights);

struct step_record {
    long step = 0;  // 1-based
    double loss = 0.0;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

struct train_state {
    long step = 0;
    nn::adam optimizer;
};

using step_callback = std::function<void(const step_record&, const train_state&)>;

// Adam on the trainable parameters; the minibatch and noise of step s depend
// only on (seed, s), so a run resumed from a saved state continues identically.
std::vector<step_record> train_layout_model(layout_denoiser& model, const std::vector<training_example>& data,
                                            const train_config& cfg, const diffusion::noise_schedule& schedule,
                                            const frozen_encoders& enc, train_state& state,
                                            const step_callback& on_step = {});

// k layouts with the query's objects in order; boxes de-normalised and clamped.
std::vector<layout> sample_layouts(const layout_denoiser& model, const scene_query& query, int k,
                                   const diffusion::noise_schedule& schedule, const frozen_encoders& enc,
                                   std::mt19937_64& rng);

// Per-step generator derived from (seed, step).
std::mt19937_64 step_rng(std::uint64_t seed, long step);

}  // namespace scenebooth::layoutgen
