#include "scenebooth/paintnet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "scenebooth/errors.hpp"

namespace scenebooth::paintnet {

// ---------------------------------------------------------------------------
// Conditioning construction

pasted_subject rescale_and_paste(const image& subject, const bbox& box, int width, int height) {
    return rescale_and_paste(subject, to_pixel_rect(box, width, height), width, height);
}

pasted_subject rescale_and_paste(const image& subject, const pixel_rect& rect, int width, int height) {
    if (subject.empty()) throw input_error("rescale_and_paste: empty subject image");
    if (rect.w < 1 || rect.h < 1)
        throw invalid_range_error("rescale_and_paste: degenerate box (" + std::to_string(rect.w) + "x" +
                                  std::to_string(rect.h) + " pixels)");
    const image scaled = resize_nearest(subject, rect.w, rect.h);
    pasted_subject out{image(width, height, 3, encoders::blank_canvas_value), binary_mask(width, height, 1), rect};
    for (int y = std::max(0, rect.y0); y < std::min(height, rect.y0 + rect.h); ++y)
        for (int x = std::max(0, rect.x0); x < std::min(width, rect.x0 + rect.w); ++x) {
            const int sy = y - rect.y0, sx = x - rect.x0;
            if (!scaled.opaque(sy, sx)) continue;
            for (int c = 0; c < 3; ++c) out.canvas.at(c, y, x) = scaled.at(c, sy, sx);
            out.mask.at(y, x) = 0;
        }
    if (out.mask.count() == out.mask.data.size()) throw input_error("rescale_and_paste: no subject pixel lands on the canvas");
    return out;
}

image build_conditioning_image(const image& pasted, const binary_mask& mask) {
    if (pasted.width != mask.width || pasted.height != mask.height || pasted.channels < 3)
        throw input_error("build_conditioning_image: mask does not match the pasted image");
    image out(pasted.width, pasted.height, 3, -1.0);
    for (int y = 0; y < pasted.height; ++y)
        for (int x = 0; x < pasted.width; ++x) {
            if (mask.at(y, x) > 1) throw input_error("build_conditioning_image: mask is not binary");
            if (mask.at(y, x)) continue;
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = std::clamp(pasted.at(c, y, x), 0.0, 1.0);
        }
    return out;
}

mask_strategy parse_mask_strategy(const std::string& name) {
    if (name == "instance") return mask_strategy::instance;
    if (name == "random") return mask_strategy::random;
    throw invalid_range_error("unknown mask strategy: " + name);
}

std::string to_string(mask_strategy s) { return s == mask_strategy::instance ? "instance" : "random"; }

binary_mask random_mask(int width, int height, std::mt19937_64& rng, const random_mask_config& cfg) {
    using uid = std::uniform_int_distribution<int>;
    using urd = std::uniform_real_distribution<double>;
    const double total = static_cast<double>(width) * height;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        binary_mask m(width, height, 1);
        const int rects = uid(cfg.min_rects, cfg.max_rects)(rng);
        for (int r = 0; r < rects; ++r) {
            const int w = uid(std::max(1, width / 8), std::max(1, width / 2))(rng);
            const int h = uid(std::max(1, height / 8), std::max(1, height / 2))(rng);
            const int x0 = uid(0, width - w)(rng), y0 = uid(0, height - h)(rng);
            for (int y = y0; y < y0 + h; ++y)
                for (int x = x0; x < x0 + w; ++x) m.at(y, x) = 0;
        }
        const int brushes = uid(cfg.min_brushes, cfg.max_brushes)(rng);
        for (int b = 0; b < brushes; ++b) {
            double px = urd(0, width)(rng), py = urd(0, height)(rng);
            const int segments = uid(3, 8)(rng);
            const double radius = urd(1.0, 2.5)(rng);
            for (int s = 0; s < segments; ++s) {
                const double angle = urd(0, 2 * std::numbers::pi)(rng);
                const double len   = urd(2.0, std::max(2.0, width / 6.0))(rng);
                const double qx = px + len * std::cos(angle), qy = py + len * std::sin(angle);
                const int n = static_cast<int>(std::ceil(len)) + 1;
                for (int i = 0; i <= n; ++i) {
                    const double cx = px + (qx - px) * i / n, cy = py + (qy - py) * i / n;
                    for (int y = static_cast<int>(cy - radius); y <= static_cast<int>(cy + radius); ++y)
                        for (int x = static_cast<int>(cx - radius); x <= static_cast<int>(cx + radius); ++x) {
                            if (x < 0 || y < 0 || x >= width || y >= height) continue;
                            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                            if (dx * dx + dy * dy <= radius * radius) m.at(y, x) = 0;
                        }
                }
                px = std::clamp(qx, 0.0, width - 1e-9);
                py = std::clamp(qy, 0.0, height - 1e-9);
            }
        }
        const double revealed = (total - static_cast<double>(m.count())) / total;
        if (revealed >= cfg.min_coverage && revealed <= cfg.max_coverage) return m;
    }
    throw input_error("random_mask: coverage bounds unreachable");
}

training_condition sample_training_condition(const data::scene_sample& s, mask_strategy strategy, std::mt19937_64& rng,
                                             const random_mask_config& rcfg) {
    if (s.img.empty()) throw input_error("sample_training_condition: sample " + s.id + " has no pixels");
    training_condition tc;
    tc.target = s.img;
    if (tc.target.channels != 3) {
        tc.target.data.resize(3 * tc.target.plane());
        tc.target.channels = 3;
    }
    if (strategy == mask_strategy::instance) {
        std::vector<int> candidates;
        for (std::size_t i = 0; i < s.instance_masks.size(); ++i)
            if (s.instance_masks[i].count() > 0) candidates.push_back(static_cast<int>(i));
        if (candidates.empty()) throw input_error("sample_training_condition: sample " + s.id + " has no instances");
        tc.instance = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
        const auto& inst = s.instance_masks[tc.instance];
        tc.mask          = binary_mask(s.width, s.height, 1);
        for (std::size_t i = 0; i < inst.data.size(); ++i) tc.mask.data[i] = inst.data[i] ? 0 : 1;
    } else {
        tc.mask = random_mask(s.width, s.height, rng, rcfg);
    }
    tc.cond = build_conditioning_image(tc.target, tc.mask);
    return tc;
}

image composite(const image& sample, const image& pasted, const binary_mask& m) {
    if (sample.width != pasted.width || sample.height != pasted.height || sample.width != m.width ||
        sample.height != m.height)
        throw shape_error("composite: size mismatch");
    image out(sample.width, sample.height, 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < sample.height; ++y)
            for (int x = 0; x < sample.width; ++x) out.at(c, y, x) = m.at(y, x) ? sample.at(c, y, x) : pasted.at(c, y, x);
    return out;
}

// ---------------------------------------------------------------------------
// Model

paint_condition encode_conditions(std::span<const scene_condition> scenes, const encoders::toy_text_encoder& text,
                                  const model_config& cfg) {
    if (scenes.empty()) throw input_error("encode_conditions: no scenes");
    const int B = static_cast<int>(scenes.size()), S = cfg.image_size;
    int slots = 0;
    for (auto& sc : scenes) slots = std::max(slots, static_cast<int>(sc.objects->size()));
    const encoders::fourier_embedder fe{cfg.frequencies, 4};
    const int gin = cfg.text_dim + fe.output_dim();
    paint_condition c;
    c.batch        = B;
    c.slots        = slots;
    c.cond_image   = ag::tensor({B, 3, S, S});
    c.grounding_in = ag::tensor({B * slots, gin});
    c.grounding_valid.assign(static_cast<std::size_t>(B) * slots, 0);
    c.caption = ag::tensor({B, cfg.text_dim});
    for (int b = 0; b < B; ++b) {
        const auto& sc = scenes[b];
        if (sc.cond->width != S || sc.cond->height != S || sc.cond->channels < 3)
            throw shape_error("encode_conditions: conditioning image must be 3x" + std::to_string(S) + "x" +
                              std::to_string(S));
        std::copy(sc.cond->data.begin(), sc.cond->data.begin() + 3 * sc.cond->plane(),
                  c.cond_image.data.begin() + static_cast<std::ptrdiff_t>(b) * 3 * S * S);
        const auto cap = text.encode(*sc.caption);
        std::copy(cap.begin(), cap.end(), c.caption.data.begin() + static_cast<std::ptrdiff_t>(b) * cfg.text_dim);
        for (std::size_t i = 0; i < sc.objects->size(); ++i) {
            const auto& e = (*sc.objects)[i];
            const int r   = b * slots + static_cast<int>(i);
            double* row   = c.grounding_in.data.data() + static_cast<std::size_t>(r) * gin;
            const auto f  = text.encode(e.object.phrase);
            std::copy(f.begin(), f.end(), row);
            const auto box = e.box.as_array();
            fe.embed_into(box, row + cfg.text_dim);
            c.grounding_valid[r] = 1;
        }
    }
    return c;
}

ag::var gated_self_attention(const ag::var& v, const ag::var& d, int batch, std::span<const std::uint8_t> d_valid,
                             const gsa_layer& layer) {
    const bool has_d = d && d->value.numel() > 0;
    if (has_d && d->value.dim(1) != v->value.dim(1))
        throw shape_error("gated_self_attention: grounding width " + std::to_string(d->value.dim(1)) +
                          " differs from visual width " + std::to_string(v->value.dim(1)));
    const int m = v->value.dim(0) / batch;
    const auto gate = ag::scale(ag::tanh(layer.gamma), layer.beta);
    if (layer.kind == attention_kind::gated_cross) {
        if (!has_d) return v;
        return ag::add(v, ag::mul_scalar(layer.attn(layer.ln(v), d, batch, d_valid), gate));
    }
    if (!has_d) {
        auto n = layer.ln(v);
        return ag::add(v, ag::mul_scalar(layer.attn(n, n, batch), gate));
    }
    const int s = d->value.dim(0) / batch;
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(batch) * (m + s), 1);
    if (!d_valid.empty())
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < s; ++i) valid[static_cast<std::size_t>(b) * (m + s) + m + i] = d_valid[b * s + i];
    auto n   = layer.ln(ag::concat_rows_batched(v, d, batch));
    auto att = ag::take_rows_batched(layer.attn(n, n, batch, valid), batch, m);
    return ag::add(v, ag::mul_scalar(att, gate));
}

paint_unet::res_block paint_unet::make_res(const std::string& name, int in, int out, nn::rng_t& rng, bool trainable) {
    res_block b;
    b.n1   = nn::group_norm_layer::make(store_, name + ".n1", in, cfg_.groups, trainable);
    b.c1   = nn::conv_layer::make(store_, name + ".c1", in, out, 3, 1, rng, trainable);
    b.temb = nn::linear_layer::make(store_, name + ".temb", cfg_.time_dim, out, rng, trainable);
    b.n2   = nn::group_norm_layer::make(store_, name + ".n2", out, cfg_.groups, trainable);
    b.c2   = nn::conv_layer::make(store_, name + ".c2", out, out, 3, 1, rng, trainable);
    if (in != out) b.skip = nn::conv_layer::make(store_, name + ".skip", in, out, 1, 1, rng, trainable);
    return b;
}

paint_unet::transformer paint_unet::make_transformer(const std::string& name, int dim, nn::rng_t& rng, bool trainable,
                                                     bool with_gsa) {
    transformer t;
    t.ln_self    = nn::layer_norm_layer::make(store_, name + ".ln_self", dim, trainable);
    t.self_attn  = nn::attention_layer::make(store_, name + ".self", dim, dim, cfg_.heads, rng, trainable);
    t.ln_cross   = nn::layer_norm_layer::make(store_, name + ".ln_cross", dim, trainable);
    t.cross_attn = nn::attention_layer::make(store_, name + ".cross", dim, cfg_.text_dim, cfg_.heads, rng, trainable);
    t.ln_ff      = nn::layer_norm_layer::make(store_, name + ".ln_ff", dim, trainable);
    t.ff         = nn::feed_forward_layer::make(store_, name + ".ff", dim, 2 * dim, rng, trainable);
    if (with_gsa) {
        const std::string g = "adapter.gsa" + std::to_string(gsa_.size());
        gsa_layer layer;
        layer.ln    = nn::layer_norm_layer::make(store_, g + ".ln", dim, true);
        layer.attn  = nn::attention_layer::make(store_, g + ".attn", dim, dim, cfg_.heads, rng, true);
        layer.gamma = store_.create(g + ".gamma", ag::tensor({1}, 0.0), true);
        layer.kind  = cfg_.attention;
        t.gsa       = static_cast<int>(gsa_.size());
        gsa_.push_back(std::move(layer));
    }
    return t;
}

paint_unet::encoder paint_unet::make_encoder(const std::string& name, nn::rng_t& rng, bool trainable, bool with_gsa) {
    encoder e;
    const int c0 = cfg_.ch0, c1 = cfg_.ch1;
    e.conv_in = nn::conv_layer::make(store_, name + ".conv_in", 3, c0, 3, 1, rng, trainable);
    e.r0      = make_res(name + ".r0", c0, c0, rng, trainable);
    e.down0   = nn::conv_layer::make(store_, name + ".down0", c0, c1, 3, 2, rng, trainable);
    e.r1      = make_res(name + ".r1", c1, c1, rng, trainable);
    e.t1      = make_transformer(name + ".t1", c1, rng, trainable, with_gsa);
    e.down1   = nn::conv_layer::make(store_, name + ".down1", c1, c1, 3, 2, rng, trainable);
    e.r2      = make_res(name + ".r2", c1, c1, rng, trainable);
    e.t2      = make_transformer(name + ".t2", c1, rng, trainable, with_gsa);
    e.m0      = make_res(name + ".m0", c1, c1, rng, trainable);
    e.tm      = make_transformer(name + ".tm", c1, rng, trainable, with_gsa);
    e.m1      = make_res(name + ".m1", c1, c1, rng, trainable);
    return e;
}

paint_unet::paint_unet(const model_config& cfg, std::uint64_t init_seed) : cfg_(cfg), text_(cfg.text_dim) {
    if (cfg.image_size % 4 != 0) throw invalid_range_error("paint model: image size must be divisible by 4");
    if (cfg.ch0 % cfg.groups != 0 || cfg.ch1 % cfg.groups != 0 || cfg.ch1 % cfg.heads != 0)
        throw invalid_range_error("paint model: channel counts must be divisible by groups and heads");
    nn::rng_t rng(init_seed);
    const int c0 = cfg.ch0, c1 = cfg.ch1;
    time_a_   = nn::linear_layer::make(store_, "base.time.0", cfg.time_dim, cfg.time_dim, rng, true);
    time_b_   = nn::linear_layer::make(store_, "base.time.1", cfg.time_dim, cfg.time_dim, rng, true);
    base_enc_ = make_encoder("base.enc", rng, true, true);
    dec2_     = make_res("base.dec2", 2 * c1, c1, rng, true);
    dt2_      = make_transformer("base.dt2", c1, rng, true, true);
    dec1_     = make_res("base.dec1", 2 * c1, c1, rng, true);
    dt1_      = make_transformer("base.dt1", c1, rng, true, true);
    dec0_     = make_res("base.dec0", c1 + c0, c0, rng, true);
    out_norm_ = nn::group_norm_layer::make(store_, "base.out_norm", c0, cfg.groups, true);
    out_conv_ = nn::conv_layer::make(store_, "base.out_conv", c0, 3, 3, 1, rng, true);

    control_  = make_encoder("control.enc", rng, false, false);
    hint_a_   = nn::conv_layer::make(store_, "adapter.hint.0", 3, c0, 3, 1, rng, false);
    hint_b_   = nn::conv_layer::make(store_, "adapter.hint.1", c0, c0, 3, 1, rng, false, true);
    zero_s0_  = nn::conv_layer::make(store_, "adapter.zero.s0", c0, c0, 1, 1, rng, false, true);
    zero_s1_  = nn::conv_layer::make(store_, "adapter.zero.s1", c1, c1, 1, 1, rng, false, true);
    zero_s2_  = nn::conv_layer::make(store_, "adapter.zero.s2", c1, c1, 1, 1, rng, false, true);
    zero_mid_ = nn::conv_layer::make(store_, "adapter.zero.mid", c1, c1, 1, 1, rng, false, true);
    const int gin = cfg.text_dim + 8 * cfg.frequencies;
    ground_a_ = nn::linear_layer::make(store_, "adapter.ground.0", gin, cfg.grounding_hidden, rng, false);
    ground_b_ = nn::linear_layer::make(store_, "adapter.ground.1", cfg.grounding_hidden, c1, rng, false);
    init_control_from_base();
    set_phase_adapters();
}

std::vector<gsa_layer*> paint_unet::gsa_layers() {
    std::vector<gsa_layer*> out;
    for (auto& g : gsa_) out.push_back(&g);
    return out;
}

void paint_unet::set_phase_pretrain() {
    store_.set_trainable("base.", true);
    store_.set_trainable("control.", false);
    store_.set_trainable("adapter.", false);
}

void paint_unet::set_phase_adapters() {
    store_.set_trainable("base.", false);
    store_.set_trainable("control.", true);
    store_.set_trainable("adapter.", true);
}

void paint_unet::init_control_from_base() { store_.copy_values("base.enc", "control.enc"); }

ag::var paint_unet::grounding_tokens(const paint_condition& c) const {
    if (c.slots == 0) return nullptr;
    return ground_b_(ag::silu(ground_a_(ag::constant(c.grounding_in))));
}

ag::var paint_unet::run_res(const res_block& b, const ag::var& x, const ag::var& temb) const {
    auto h = b.c1(ag::silu(b.n1(x)));
    h      = ag::add_channel_per_sample(h, b.temb(temb));
    h      = b.c2(ag::silu(b.n2(h)));
    return ag::add(b.skip ? (*b.skip)(x) : x, h);
}

ag::var paint_unet::run_transformer(const transformer& tr, const ag::var& h, const ag::var& ctx, const ag::var& d,
                                    const paint_condition& c, bool gated) const {
    const int B = h->value.dim(0), C = h->value.dim(1), H = h->value.dim(2), W = h->value.dim(3);
    auto x = ag::to_tokens(h);
    auto n = tr.ln_self(x);
    x      = ag::add(x, tr.self_attn(n, n, B));
    if (gated && tr.gsa >= 0) x = gated_self_attention(x, d, B, c.grounding_valid, gsa_[tr.gsa]);
    x = ag::add(x, tr.cross_attn(tr.ln_cross(x), ctx, B));
    x = ag::add(x, tr.ff(tr.ln_ff(x)));
    return ag::from_tokens(x, B, C, H, W);
}

paint_unet::encoder_out paint_unet::run_encoder(const encoder& e, const ag::var& x_in, const ag::var& temb,
                                                const ag::var& ctx, const ag::var& d, const paint_condition& c,
                                                bool gated) const {
    encoder_out o;
    o.s0   = run_res(e.r0, x_in, temb);
    auto h = run_res(e.r1, e.down0(o.s0), temb);
    o.s1   = run_transformer(e.t1, h, ctx, d, c, gated);
    h      = run_res(e.r2, e.down1(o.s1), temb);
    o.s2   = run_transformer(e.t2, h, ctx, d, c, gated);
    h      = run_res(e.m0, o.s2, temb);
    h      = run_transformer(e.tm, h, ctx, d, c, gated);
    o.mid  = run_res(e.m1, h, temb);
    return o;
}

ag::var paint_unet::forward(const ag::tensor& z_t, std::span<const int> t, const paint_condition& c,
                            bool base_only) const {
    const int S = cfg_.image_size;
    if (z_t.rank() != 4 || z_t.dim(0) != c.batch || z_t.dim(1) != 3 || z_t.dim(2) != S || z_t.dim(3) != S)
        throw shape_error("paint model: input " + ag::shape_str(z_t.shape) + " does not match the condition batch");
    if (static_cast<int>(t.size()) != c.batch) throw shape_error("paint model: one timestep per sample");
    const int B = c.batch;
    auto temb   = ag::silu(time_b_(ag::silu(time_a_(ag::constant(nn::timestep_embedding(t, cfg_.time_dim))))));
    auto ctx    = ag::constant(c.caption);
    auto z      = ag::constant(z_t);
    const bool gated = !base_only;
    ag::var d        = gated ? grounding_tokens(c) : nullptr;

    auto enc = run_encoder(base_enc_, base_enc_.conv_in(z), temb, ctx, d, c, gated);
    if (!base_only) {
        auto hint = hint_b_(ag::silu(hint_a_(ag::constant(c.cond_image))));
        auto ctl  = run_encoder(control_, ag::add(control_.conv_in(z), hint), temb, ctx, nullptr, c, false);
        enc.s0    = ag::add(enc.s0, zero_s0_(ctl.s0));
        enc.s1    = ag::add(enc.s1, zero_s1_(ctl.s1));
        enc.s2    = ag::add(enc.s2, zero_s2_(ctl.s2));
        enc.mid   = ag::add(enc.mid, zero_mid_(ctl.mid));
    }
    auto h = run_res(dec2_, ag::concat_channels(enc.mid, enc.s2), temb);
    h      = run_transformer(dt2_, h, ctx, d, c, gated);
    h      = run_res(dec1_, ag::concat_channels(ag::upsample_nearest2x(h), enc.s1), temb);
    h      = run_transformer(dt1_, h, ctx, d, c, gated);
    h      = run_res(dec0_, ag::concat_channels(ag::upsample_nearest2x(h), enc.s0), temb);
    auto out = out_conv_(ag::silu(out_norm_(h)));
    for (double v : out->value.data)
        if (!std::isfinite(v)) throw error("paint model: non-finite activation");
    (void)B;
    return out;
}

diffusion::denoiser_fn paint_unet::bind(const paint_condition& c, bool base_only) const {
    return [this, &c, base_only](const ag::var& z_t, std::span<const int> t) {
        return forward(z_t->value, t, c, base_only);
    };
}

ag::tensor build_grounding_tokens(const paint_unet& unet, std::span<const object_spec> phrases,
                                  std::span<const bbox> boxes) {
    if (phrases.size() != boxes.size())
        throw input_error("build_grounding_tokens: " + std::to_string(phrases.size()) + " phrases but " +
                          std::to_string(boxes.size()) + " boxes");
    layout l;
    for (std::size_t i = 0; i < phrases.size(); ++i) l.push_back({phrases[i], boxes[i]});
    const int S = unet.config().image_size;
    const image blank(S, S, 3, -1.0);
    const std::string caption = "scene";
    const scene_condition sc{&blank, &l, &caption};
    auto c = encode_conditions(std::span(&sc, 1), unet.text_encoder(), unet.config());
    auto d = unet.grounding_tokens(c);
    return d ? d->value : ag::tensor({0, unet.config().ch1});
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct paint_batch {
    std::vector<training_condition> conds;
    std::vector<const data::scene_sample*> samples;
    ag::tensor z0;
    paint_condition cond;
};

paint_batch make_batch(const paint_unet& unet, const std::vector<data::scene_sample>& data, const train_config& cfg,
                       std::mt19937_64& rng) {
    const int S = unet.config().image_size;
    paint_batch pb;
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    for (int b = 0; b < cfg.batch; ++b) {
        const auto& s = data[pick(rng)];
        if (s.width != S || s.height != S)
            throw input_error("paint training: sample " + s.id + " is " + std::to_string(s.width) + "x" +
                              std::to_string(s.height) + ", model expects " + std::to_string(S));
        pb.samples.push_back(&s);
        pb.conds.push_back(sample_training_condition(s, cfg.strategy, rng));
    }
    pb.z0 = ag::tensor({cfg.batch, 3, S, S});
    std::vector<scene_condition> scenes;
    for (int b = 0; b < cfg.batch; ++b) {
        const auto t = image_to_tensor(pb.conds[b].target, true);
        std::copy(t.data.begin(), t.data.end(), pb.z0.data.begin() + static_cast<std::ptrdiff_t>(b) * t.numel());
        scenes.push_back({&pb.conds[b].cond, &pb.samples[b]->objects, &pb.samples[b]->caption});
    }
    pb.cond = encode_conditions(scenes, unet.text_encoder(), unet.config());
    return pb;
}

std::vector<step_record> run_phase(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                   const train_config& cfg, const diffusion::noise_schedule& schedule,
                                   train_state& state, const step_callback& on_step, phase ph) {
    if (data.empty()) throw training_error("paint training: dataset is empty");
    if (cfg.batch < 1) throw invalid_range_error("paint training: batch must be >= 1");
    const bool base_only = ph == phase::pretrain;
    const long total     = base_only ? cfg.base_iterations : cfg.iterations;
    const double lr      = base_only ? cfg.base_lr : cfg.lr;
    if (state.optimizer.empty())
        state.optimizer = nn::adam(unet.params().trainable(), nn::adam_config{lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
    const std::uint64_t phase_seed = cfg.seed ^ (base_only ? 0x9e3779b97f4a7c15ULL : 0);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<step_record> log;
    for (long s = state.step + 1; s <= total; ++s) {
        auto rng      = layoutgen::step_rng(phase_seed, s);
        paint_batch pb = make_batch(unet, data, cfg, rng);
        auto loss     = diffusion::denoising_loss(unet.bind(pb.cond, base_only), pb.z0, schedule, rng);
        ag::backward(loss);
        step_record rec;
        rec.phase        = ph;
        rec.step         = s;
        rec.loss         = loss->value[0];
        rec.grad_norm    = state.optimizer.step();
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        state.step       = s;
        log.push_back(rec);
        if (on_step) on_step(rec, state);
    }
    return log;
}

}  // namespace

std::vector<step_record> pretrain_base(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                       const train_config& cfg, const diffusion::noise_schedule& schedule,
                                       train_state& state, const step_callback& on_step) {
    unet.set_phase_pretrain();
    state.phase = phase::pretrain;
    return run_phase(unet, data, cfg, schedule, state, on_step, phase::pretrain);
}

std::vector<step_record> train_adapters(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                        const train_config& cfg, const diffusion::noise_schedule& schedule,
                                        train_state& state, const step_callback& on_step) {
    unet.set_phase_adapters();
    state.phase            = phase::adapters;
    const auto frozen_hash = unet.params().checksum(false);
    auto log               = run_phase(unet, data, cfg, schedule, state, on_step, phase::adapters);
    if (unet.params().checksum(false) != frozen_hash)
        throw training_error("train_adapters: frozen base parameters changed during training");
    return log;
}

std::vector<step_record> train_paintnet(paint_unet& unet, const std::vector<data::scene_sample>& data,
                                        const train_config& cfg, const diffusion::noise_schedule& schedule,
                                        train_state& state, const step_callback& on_step) {
    std::vector<step_record> log;
    if (state.phase == phase::pretrain) {
        log = pretrain_base(unet, data, cfg, schedule, state, on_step);
        unet.init_control_from_base();
        state.phase     = phase::adapters;
        state.step      = 0;
        state.optimizer = nn::adam();
    }
    auto rest = train_adapters(unet, data, cfg, schedule, state, on_step);
    log.insert(log.end(), rest.begin(), rest.end());
    return log;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

bool lands_on_canvas(const image& subject, const pixel_rect& r, int size) {
    const image scaled = resize_nearest(subject, r.w, r.h);
    for (int y = std::max(0, r.y0); y < std::min(size, r.y0 + r.h); ++y)
        for (int x = std::max(0, r.x0); x < std::min(size, r.x0 + r.w); ++x)
            if (scaled.opaque(y - r.y0, x - r.x0)) return true;
    return false;
}

}  // namespace

pixel_rect paintable_rect(const image& subject, const bbox& box, int size) {
    pixel_rect r = to_pixel_rect(box, size, size);
    r.w          = std::clamp(r.w, 1, size);
    r.h          = std::clamp(r.h, 1, size);
    for (;;) {
        r.x0 = std::clamp(r.x0, 0, size - r.w);
        r.y0 = std::clamp(r.y0, 0, size - r.h);
        if (lands_on_canvas(subject, r, size) || (r.w == size && r.h == size)) return r;
        if (r.w < size) {
            ++r.w;
            r.x0 -= r.w % 2;
        }
        if (r.h < size) {
            ++r.h;
            r.y0 -= r.h % 2;
        }
    }
}

std::vector<paint_result> generate(const paint_unet& unet, std::span<const paint_request> requests,
                                   const diffusion::noise_schedule& schedule, std::mt19937_64& rng) {
    if (requests.empty()) return {};
    const int S = unet.config().image_size;
    std::vector<paint_result> out(requests.size());
    std::vector<image> conds(requests.size());
    std::vector<scene_condition> scenes;
    for (std::size_t i = 0; i < requests.size(); ++i) {
        const auto& r  = requests[i];
        const int subj = subject_index(r.objects);
        const pixel_rect rect = r.subject_rect ? *r.subject_rect : paintable_rect(r.subject, r.objects[subj].box, S);
        auto pasted           = rescale_and_paste(r.subject, rect, S, S);
        conds[i]       = build_conditioning_image(pasted.canvas, pasted.mask);
        out[i].pasted  = std::move(pasted.canvas);
        out[i].mask    = std::move(pasted.mask);
        out[i].rect    = pasted.rect;
    }
    for (std::size_t i = 0; i < requests.size(); ++i)
        scenes.push_back({&conds[i], &requests[i].objects, &requests[i].caption});
    const paint_condition c = encode_conditions(scenes, unet.text_encoder(), unet.config());
    const int B             = static_cast<int>(requests.size());
    const ag::tensor z = diffusion::ancestral_sample(unet.bind(c), {B, 3, S, S}, schedule, rng,
                                                     diffusion::clamp_range{-1.0, 1.0});
    for (int b = 0; b < B; ++b) {
        out[b].sample   = quantize8(tensor_to_image(z, b, true));
        out[b].composed = composite(out[b].sample, out[b].pasted, out[b].mask);
    }
    return out;
}

}  // namespace scenebooth::paintnet
