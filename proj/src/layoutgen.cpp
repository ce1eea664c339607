#include "scenebooth/layoutgen.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "scenebooth/errors.hpp"

namespace scenebooth::layoutgen {

namespace {

// Shrinks a subject that would not fit the augmentation canvas at the largest scale.
image fit_for_augment(const image& subject, const encoders::subject_augment_config& cfg) {
    const double limit = cfg.canvas_size / cfg.scale_max;
    const int longest  = std::max(subject.width, subject.height);
    if (longest <= static_cast<int>(std::floor(limit))) return subject;
    const double f = std::floor(limit) / longest;
    return resize_nearest(subject, std::max(1, static_cast<int>(subject.width * f)),
                          std::max(1, static_cast<int>(subject.height * f)));
}

std::vector<double> visual_feature(const image& subject, const frozen_encoders& enc, std::mt19937_64* rng) {
    const image fitted = fit_for_augment(subject, enc.augment);
    return enc.vision.encode(rng ? encoders::augment_subject(fitted, enc.augment, *rng)
                                 : encoders::augment_subject_at_scale(fitted, enc.augment, 1.0));
}

void check_finite(const ag::tensor& t, const char* what) {
    for (double v : t.data)
        if (!std::isfinite(v)) throw error(std::string("layout denoiser: non-finite ") + what);
}

}  // namespace

training_example make_example(const layout& target, const image& subject, const std::string& caption) {
    subject_index(target);
    return {{objects_of(target), subject, caption}, target};
}

token_batch encode_batch(std::span<const scene_query* const> queries, const frozen_encoders& enc,
                         std::mt19937_64* augment_rng, int slots) {
    if (queries.empty()) throw input_error("encode_batch: no queries");
    int s = slots;
    for (auto* q : queries) {
        subject_index(q->objects);
        s = std::max(s, static_cast<int>(q->objects.size()));
    }
    if (slots > 0 && s > slots) throw input_error("encode_batch: scene exceeds the slot count");
    const int B = static_cast<int>(queries.size()), dt = enc.text.dim(), dv = enc.vision.dim();
    token_batch tb;
    tb.batch   = B;
    tb.slots   = s;
    tb.text    = ag::tensor({B * s, dt});
    tb.visual  = ag::tensor({B * s, dv});
    tb.caption = ag::tensor({B, dt});
    tb.use_null.assign(static_cast<std::size_t>(B) * s, 1);
    tb.valid.assign(static_cast<std::size_t>(B) * s, 0);
    for (int b = 0; b < B; ++b) {
        const auto& q   = *queries[b];
        const auto vis  = visual_feature(q.subject, enc, augment_rng);
        const auto capt = enc.text.encode(q.caption);
        std::copy(capt.begin(), capt.end(), tb.caption.data.begin() + static_cast<std::ptrdiff_t>(b) * dt);
        for (int i = 0; i < static_cast<int>(q.objects.size()); ++i) {
            const int r = b * s + i;
            tb.valid[r] = 1;
            const auto txt = enc.text.encode(q.objects[i].phrase);
            std::copy(txt.begin(), txt.end(), tb.text.data.begin() + static_cast<std::ptrdiff_t>(r) * dt);
            if (q.objects[i].is_subject) {
                tb.use_null[r] = 0;
                std::copy(vis.begin(), vis.end(), tb.visual.data.begin() + static_cast<std::ptrdiff_t>(r) * dv);
            }
        }
    }
    return tb;
}

token_batch encode_repeated(const scene_query& query, int k, const frozen_encoders& enc) {
    if (k < 1) throw input_error("encode_repeated: k must be >= 1");
    const scene_query* one[] = {&query};
    token_batch single = encode_batch(one, enc, nullptr);
    token_batch tb;
    tb.batch = k;
    tb.slots = single.slots;
    auto tile = [k](const ag::tensor& t) {
        ag::tensor out({k * t.dim(0), t.dim(1)});
        for (int i = 0; i < k; ++i) std::copy(t.data.begin(), t.data.end(), out.data.begin() + i * t.numel());
        return out;
    };
    auto tile_flags = [k](const std::vector<std::uint8_t>& f) {
        std::vector<std::uint8_t> out;
        for (int i = 0; i < k; ++i) out.insert(out.end(), f.begin(), f.end());
        return out;
    };
    tb.text     = tile(single.text);
    tb.visual   = tile(single.visual);
    tb.caption  = tile(single.caption);
    tb.use_null = tile_flags(single.use_null);
    tb.valid    = tile_flags(single.valid);
    return tb;
}

layout_denoiser::layout_denoiser(const model_config& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (cfg.width % cfg.heads != 0) throw invalid_range_error("layout model: width must be divisible by heads");
    nn::rng_t rng(init_seed);
    null_    = store_.create("null_vector", nn::normal_init({cfg.vis_dim}, 0.02, rng), true);
    in_proj_ = nn::linear_layer::make(store_, "in_proj", token_dim(), cfg.width, rng, true);
    time_a_  = nn::linear_layer::make(store_, "time.0", cfg.width, cfg.width, rng, true);
    time_b_  = nn::linear_layer::make(store_, "time.1", cfg.width, cfg.width, rng, true);
    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string p = "block" + std::to_string(i);
        block b;
        b.ln_self    = nn::layer_norm_layer::make(store_, p + ".ln_self", cfg.width, true);
        b.self_attn  = nn::attention_layer::make(store_, p + ".self", cfg.width, cfg.width, cfg.heads, rng, true);
        b.ln_cross   = nn::layer_norm_layer::make(store_, p + ".ln_cross", cfg.width, true);
        b.cross_attn = nn::attention_layer::make(store_, p + ".cross", cfg.width, cfg.text_dim, cfg.heads, rng, true);
        b.ln_ff      = nn::layer_norm_layer::make(store_, p + ".ln_ff", cfg.width, true);
        b.ff         = nn::feed_forward_layer::make(store_, p + ".ff", cfg.width, cfg.ff_mult * cfg.width, rng, true);
        blocks_.push_back(std::move(b));
    }
    ln_out_ = nn::layer_norm_layer::make(store_, "ln_out", cfg.width, true);
    head_   = nn::linear_layer::make(store_, "head", cfg.width, 4, rng, true);
}

ag::var layout_denoiser::object_tokens(const ag::tensor& z_t, const token_batch& cond) const {
    const int rows = cond.batch * cond.slots;
    if (z_t.rank() != 3 || z_t.dim(0) != cond.batch || z_t.dim(1) != cond.slots || z_t.dim(2) != 4)
        throw shape_error("layout tokens: geometry " + ag::shape_str(z_t.shape) + " does not match the batch");
    check_finite(z_t, "geometry");
    const encoders::fourier_embedder fe{cfg_.frequencies, 4};
    const int fd = fe.output_dim();
    ag::tensor geo({rows, fd});
    for (int r = 0; r < rows; ++r) {
        const double g[4] = {z_t[r * 4] * cfg_.geometry_scale, z_t[r * 4 + 1] * cfg_.geometry_scale,
                             z_t[r * 4 + 2] * cfg_.geometry_scale, z_t[r * 4 + 3] * cfg_.geometry_scale};
        fe.embed_into(g, geo.data.data() + static_cast<std::size_t>(r) * fd);
    }
    auto vis = ag::select_rows(ag::constant(cond.visual), null_, cond.use_null);
    return ag::concat_cols({ag::constant(std::move(geo)), ag::constant(cond.text), vis});
}

ag::var layout_denoiser::denoise(const ag::var& tokens, const token_batch& cond, std::span<const int> t) const {
    if (cond.batch * cond.slots == 0) throw input_error("layout denoiser: empty token sequence");
    if (static_cast<int>(t.size()) != cond.batch) throw shape_error("layout denoiser: one timestep per scene");
    const int B = cond.batch;
    auto h      = in_proj_(tokens);
    auto temb   = time_b_(ag::silu(time_a_(ag::constant(nn::timestep_embedding(t, cfg_.width)))));
    h           = ag::add_rows_per_sample(h, temb, B);
    auto ctx    = ag::constant(cond.caption);
    for (const auto& b : blocks_) {
        auto n = b.ln_self(h);
        h      = ag::add(h, b.self_attn(n, n, B, cond.valid));
        h      = ag::add(h, b.cross_attn(b.ln_cross(h), ctx, B));
        h      = ag::add(h, b.ff(b.ln_ff(h)));
    }
    auto out = ag::reshape(head_(ln_out_(h)), {B, cond.slots, 4});
    check_finite(out->value, "activation");
    return out;
}

diffusion::denoiser_fn layout_denoiser::bind(const token_batch& cond) const {
    return [this, &cond](const ag::var& z_t, std::span<const int> t) { return (*this)(z_t->value, t, cond); };
}

ag::tensor layouts_to_tensor(std::span<const layout* const> layouts, int slots, std::vector<double>* weights) {
    const int B = static_cast<int>(layouts.size());
    ag::tensor z({B, slots, 4});
    if (weights) weights->assign(z.numel(), 0.0);
    for (int b = 0; b < B; ++b) {
        const auto& l = *layouts[b];
        if (static_cast<int>(l.size()) > slots) throw input_error("layout exceeds the slot count");
        for (std::size_t i = 0; i < l.size(); ++i) {
            const auto a = l[i].box.as_array();
            for (int c = 0; c < 4; ++c) {
                const std::size_t idx = (static_cast<std::size_t>(b) * slots + i) * 4 + c;
                z[idx]                = 2.0 * a[c] - 1.0;
                if (weights) (*weights)[idx] = 1.0;
            }
        }
    }
    return z;
}

std::mt19937_64 step_rng(std::uint64_t seed, long step) {
    const auto s = static_cast<std::uint64_t>(step);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
    return std::mt19937_64(seq);
}

std::vector<step_record> train_layout_model(layout_denoiser& model, const std::vector<training_example>& data,
                                            const train_config& cfg, const diffusion::noise_schedule& schedule,
                                            const frozen_encoders& enc, train_state& state,
                                            const step_callback& on_step) {
    if (data.empty()) throw training_error("train_layout_model: dataset is empty");
    if (cfg.batch < 1) throw invalid_range_error("train_layout_model: batch must be >= 1");
    if (state.optimizer.empty())
        state.optimizer = nn::adam(model.params().trainable(), nn::adam_config{cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<step_record> log;
    std::vector<const scene_query*> queries(cfg.batch);
    std::vector<const layout*> targets(cfg.batch);
    std::vector<double> weights;
    for (long s = state.step + 1; s <= cfg.iterations; ++s) {
        auto rng = step_rng(cfg.seed, s);
        std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& ex = data[pick(rng)];
            queries[b]     = &ex.query;
            targets[b]     = &ex.target;
        }
        const token_batch cond = encode_batch(queries, enc, &rng, 0);
        const ag::tensor z0    = layouts_to_tensor(targets, cond.slots, &weights);
        auto loss              = diffusion::denoising_loss(model.bind(cond), z0, schedule, rng, weights);
        ag::backward(loss);
        step_record rec;
        rec.step      = s;
        rec.loss      = loss->value[0];
        rec.grad_norm = state.optimizer.step();
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.step = s;
        log.push_back(rec);
        if (on_step) on_step(rec, state);
    }
    return log;
}

std::vector<layout> sample_layouts(const layout_denoiser& model, const scene_query& query, int k,
                                   const diffusion::noise_schedule& schedule, const frozen_encoders& enc,
                                   std::mt19937_64& rng) {
    if (k < 1) throw input_error("sample_layouts: k must be >= 1");
    subject_index(query.objects);
    const token_batch cond = encode_repeated(query, k, enc);
    const int n            = static_cast<int>(query.objects.size());
    const ag::tensor z = diffusion::ancestral_sample(model.bind(cond), {k, n, 4}, schedule, rng,
                                                     diffusion::clamp_range{-1.0, 1.0});
    std::vector<layout> out(k);
    for (int b = 0; b < k; ++b)
        for (int i = 0; i < n; ++i) {
            const double* p = z.data.data() + (static_cast<std::size_t>(b) * n + i) * 4;
            const bbox raw{(p[0] + 1) / 2, (p[1] + 1) / 2, (p[2] + 1) / 2, (p[3] + 1) / 2};
            out[b].push_back({query.objects[i], clamp_box(raw)});
        }
    return out;
}

}  // namespace scenebooth::layoutgen
