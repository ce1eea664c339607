#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scenebooth/autograd.hpp"
#include "scenebooth/data.hpp"
#include "scenebooth/diffusion.hpp"
#include "scenebooth/encoders.hpp"
#include "scenebooth/image.hpp"
#include "scenebooth/layout.hpp"
#include "scenebooth/layoutgen.hpp"
#include "scenebooth/nn.hpp"

namespace scenebooth::paintnet {

// ---------------------------------------------------------------------------
// Conditioning construction

struct pasted_subject {
    image canvas;       // RGB; blank value outside the subject
    binary_mask mask;   // 0 on pasted subject pixels, 1 elsewhere
    pixel_rect rect;
};

// Nearest-neighbour stretch of the subject onto the box's pixel rectangle.
pasted_subject rescale_and_paste(const image& subject, const bbox& box, int width, int height);
pasted_subject rescale_and_paste(const image& subject, const pixel_rect& rect, int width, int height);

// Subject pixels keep their [0,1] values, every pixel with mask 1 becomes -1.
image build_conditioning_image(const image& pasted, const binary_mask& mask);

enum class mask_strategy { instance, random };
mask_strategy parse_mask_strategy(const std::string& name);
std::string to_string(mask_strategy s);

struct random_mask_config {
    int min_rects = 1, max_rects = 4;
    int min_brushes = 0, max_brushes = 3;
    double min_coverage = 0.10, max_coverage = 0.60;
};

// Union of rectangles and random-walk brush strokes; the 0-region (revealed
// pixels) covers between min_coverage and max_coverage of the canvas.
binary_mask random_mask(int width, int height, std::mt19937_64& rng, const random_mask_config& cfg = {});

struct training_condition {
    image cond;         // conditioning image
    binary_mask mask;   // 0 = revealed
    image target;       // ground-truth RGB
    int instance = -1;  // revealed object for the instance strategy
};

training_condition sample_training_condition(const data::scene_sample& s, mask_strategy strategy, std::mt19937_64& rng,
                                             const random_mask_config& rcfg = {});

// I_comp = m * sample + (1 - m) * pasted, as per-pixel selection.
image composite(const image& sample, const image& pasted, const binary_mask& m);

// ---------------------------------------------------------------------------
// Model

enum class attention_kind { gated_self, gated_cross };

struct model_config {
    int image_size   = 32;
    int ch0          = 16;   // channels at full resolution
    int ch1          = 32;   // channels at 1/2 and 1/4 resolution
    int groups       = 8;
    int heads        = 4;
    int time_dim     = 64;
    int text_dim     = 64;
    int frequencies  = 6;
    int grounding_hidden = 128;
    int max_objects  = 8;
    attention_kind attention = attention_kind::gated_self;
};

// One scene's inputs to the painter, batched.
struct paint_condition {
    int batch = 0;
    int slots = 0;
    ag::tensor cond_image;                  // [B,3,H,W]
    ag::tensor grounding_in;                // [B*S, text_dim + 8F]: Cat(f_text(p), fourier(l))
    std::vector<std::uint8_t> grounding_valid;
    ag::tensor caption;                     // [B, text_dim]
};

struct scene_condition {
    const image* cond = nullptr;
    const layout* objects = nullptr;
    const std::string* caption = nullptr;
};

paint_condition encode_conditions(std::span<const scene_condition> scenes, const encoders::toy_text_encoder& text,
                                  const model_config& cfg);

struct gsa_layer {
    nn::layer_norm_layer ln;
    nn::attention_layer attn;
    ag::var gamma;
    double beta = 1.0;
    attention_kind kind = attention_kind::gated_self;
};

// v + beta * tanh(gamma) * TS(SA(LN([v, d]))); v is [B*M, D], d is [B*S, D]
// (S may be 0). Only the M visual rows are kept.
ag::var gated_self_attention(const ag::var& v, const ag::var& d, int batch, std::span<const std::uint8_t> d_valid,
                             const gsa_layer& layer);

class paint_unet {
public:
    paint_unet(const model_config& cfg, std::uint64_t init_seed);

    const model_config& config() const { return cfg_; }
    nn::parameter_store& params() { return store_; }
    const nn::parameter_store& params() const { return store_; }
    const encoders::toy_text_encoder& text_encoder() const { return text_; }
    std::vector<gsa_layer*> gsa_layers();

    // Base weights trainable (pretraining) or frozen with adapters trainable.
    void set_phase_pretrain();
    void set_phase_adapters();
    // Copies the base encoder and middle block into the control branch.
    void init_control_from_base();

    // d_i per object row, [B*S, ch1].
    ag::var grounding_tokens(const paint_condition& c) const;

    // base_only skips the control branch and every gated layer.
    ag::var forward(const ag::tensor& z_t, std::span<const int> t, const paint_condition& c,
                    bool base_only = false) const;
    diffusion::denoiser_fn bind(const paint_condition& c, bool base_only = false) const;

private:
    struct res_block {
        nn::group_norm_layer n1, n2;
        nn::conv_layer c1, c2;
        nn::linear_layer temb;
        std::optional<nn::conv_layer> skip;
    };
    struct transformer {
        nn::layer_norm_layer ln_self, ln_cross, ln_ff;
        nn::attention_layer self_attn, cross_attn;
        nn::feed_forward_layer ff;
        int gsa = -1;  // index into gsa_, -1 when absent
    };
    struct encoder {
        nn::conv_layer conv_in, down0, down1;
        res_block r0, r1, r2, m0, m1;
        transformer t1, t2, tm;
    };
    struct encoder_out {
        ag::var s0, s1, s2, mid;
    };

    res_block make_res(const std::string& name, int in, int out, nn::rng_t& rng, bool trainable);
    transformer make_transformer(const std::string& name, int dim, nn::rng_t& rng, bool trainable, bool with_gsa);
    encoder make_encoder(const std::string& name, nn::rng_t& rng, bool trainable, bool with_gsa);

    ag::var run_res(const res_block& b, const ag::var& x, const ag::var& temb) const;
    ag::var run_transformer(const transformer& tr, const ag::var& h, const ag::var& ctx, const ag::var& d,
                            const paint_condition& c, bool gated) const;
    encoder_out run_encoder(const encoder& e, const ag::var& x_in, const ag::var& temb, const ag::var& ctx,
                            const ag::var& d, const paint_condition& c, bool gated) const;

    model_config cfg_;
    nn::parameter_store store_;
    encoders::toy_text_encoder text_;
    std::vector<gsa_layer> gsa_;

    nn::linear_layer time_a_, time_b_;
    encoder base_enc_;
    res_block dec2_, dec1_, dec0_;
    transformer dt2_, dt1_;
    nn::group_norm_layer out_norm_;
    nn::conv_layer out_conv_;

    encoder control_;
    nn::conv_layer hint_a_, hint_b_;
    nn::conv_layer zero_s0_, zero_s1_, zero_s2_, zero_mid_;
    nn::linear_layer ground_a_, ground_b_;
};

// Grounding tokens of one scene, [N, ch1].
ag::tensor build_grounding_tokens(const paint_unet& unet, std::span<const object_spec> phrases,
                                  std::span<const bbox> boxes);

// ---------------------------------------------------------------------------
// Training

struct train_config {
    double base_lr = 1e-3;
    long base_iterations = 1000;
    double lr = 1e-3;
    int batch = 8;
    long iterations = 1000;
    double grad_clip = 1.0;
    mask_strategy strategy = mask_strategy::instance;
    std::uint64_t seed = 0;
};

enum class phase { pretrain, adapters };

struct step_record {
    paintnet::phase phase = phase::pretrain;
    long step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double wall_seconds = 0.0;
};

struct train_state {
    paintnet::phase phase = phase::pretrain;
    long step = 0;  // steps completed within the current phase
    nn::adam optimizer;
};

using step_callback = std::function<void(const step_record&, const train_state&)>;

// Base denoiser pretraining (caption-conditioned, no adapters).
std::vector<step_record> pretrain_base(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                       const train_config& cfg, const diffusion::noise_schedule& schedule,
                                       train_state& state, const step_callback& on_step = {});

// Adapter training with the base frozen; throws training_error if any frozen value changes.
std::vector<step_record> train_adapters(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                        const train_config& cfg, const diffusion::noise_schedule& schedule,
                                        train_state& state, const step_callback& on_step = {});

// Both phases in order, resuming from `state`.
std::vector<step_record> train_paintnet(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                        const train_config& cfg, const diffusion::noise_schedule& schedule,
                                        train_state& state, const step_callback& on_step = {});

// ---------------------------------------------------------------------------
// Generation

struct paint_request {
    image subject;                     // RGBA crop (alpha = silhouette) or RGB
    layout objects;                    // contains the subject box
    std::string caption;
    std::optional<pixel_rect> subject_rect;  // overrides the subject box's pixel rectangle
};

struct paint_result {
    image composed;
    image sample;   // raw painter output, 8-bit quantised
    image pasted;
    binary_mask mask;
    pixel_rect rect;
};

// Pixel rectangle for pasting a subject at a sampled box: kept on the canvas,
// at least one pixel wide, and grown a pixel at a time until at least one
// opaque subject pixel survives the nearest-neighbour resize.
pixel_rect paintable_rect(const image& subject, const bbox& box, int size);

// Requests are painted together in one batch that shares the generator. Without
// an explicit subject_rect the subject goes to paintable_rect of its box.
std::vector<paint_result> generate(const paint_unet& unet, std::span<const paint_request> requests,
                                   const diffusion::noise_schedule& schedule, std::mt19937_64& rng);

}  // namespace scenebooth::paintnet
