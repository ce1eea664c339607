#include <doctest.h>

#include <cmath>
#include <random>

#include "scenebooth/errors.hpp"
#include "scenebooth/paintnet.hpp"
#include "support.hpp"

using namespace scenebooth;
using namespace scenebooth::paintnet;

namespace {

// 2x2 RGBA subject: red, green / blue, transparent.
image quad_subject() {
    image s(2, 2, 4, 0.0);
    s.at(0, 0, 0) = 1, s.at(3, 0, 0) = 1;
    s.at(1, 0, 1) = 1, s.at(3, 0, 1) = 1;
    s.at(2, 1, 0) = 1, s.at(3, 1, 0) = 1;
    return s;
}

std::vector<data::scene_sample> small_scenes(int n, std::uint64_t seed) {
    auto g   = data::synthetic_grammar::default_grammar();
    g.canvas = 16;
    for (auto& c : g.categories) {
        c.width_range  = {0.2, 0.35};
        c.height_range = {0.2, 0.3};
    }
    std::mt19937_64 rng(seed);
    return data::synth_generate(g, n, rng);
}

ag::tensor randn(ag::shape_t s, std::mt19937_64& rng) {
    ag::tensor t(std::move(s));
    std::normal_distribution<double> n;
    for (auto& v : t.data) v = n(rng);
    return t;
}

double max_abs_diff(const ag::tensor& a, const ag::tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

paint_condition condition_for(const paint_unet& u, const image& cond, const layout& l, const std::string& cap) {
    const scene_condition sc{&cond, &l, &cap};
    return encode_conditions(std::span(&sc, 1), u.text_encoder(), u.config());
}

}  // namespace

TEST_CASE("rescale and paste by hand") {
    const auto p = rescale_and_paste(quad_subject(), pixel_rect{1, 2, 4, 4}, 8, 8);
    CHECK(p.rect == pixel_rect{1, 2, 4, 4});
    // each source pixel becomes a 2x2 block; the transparent one stays blank and unmasked
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const bool inside = x >= 1 && x < 5 && y >= 2 && y < 6;
            const int sx = (x - 1) / 2, sy = (y - 2) / 2;
            const bool opaque = inside && !(sx == 1 && sy == 1);
            CHECK(p.mask.at(y, x) == (opaque ? 0 : 1));
            for (int c = 0; c < 3; ++c) {
                const double expect = opaque ? quad_subject().at(c, sy, sx) : encoders::blank_canvas_value;
                CHECK(p.canvas.at(c, y, x) == expect);
            }
        }
    // box form goes through the same pixel rectangle
    const auto q = rescale_and_paste(quad_subject(), bbox::from_corners(0.125, 0.25, 0.625, 0.75), 8, 8);
    CHECK(q.mask == p.mask);
    CHECK_THROWS_AS(rescale_and_paste(quad_subject(), pixel_rect{0, 0, 0, 3}, 8, 8), invalid_range_error);
    CHECK_THROWS_AS(rescale_and_paste(quad_subject(), pixel_rect{9, 9, 2, 2}, 8, 8), input_error);
    CHECK_THROWS_AS(rescale_and_paste(image{}, pixel_rect{0, 0, 2, 2}, 8, 8), input_error);
}

TEST_CASE("conditioning image") {
    const auto p    = rescale_and_paste(quad_subject(), pixel_rect{0, 0, 2, 2}, 4, 4);
    const auto cond = build_conditioning_image(p.canvas, p.mask);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c)
                CHECK(cond.at(c, y, x) == (p.mask.at(y, x) ? -1.0 : p.canvas.at(c, y, x)));
    CHECK(cond.at(0, 0, 0) == 1.0);
    CHECK(cond.at(0, 1, 1) == -1.0);
    auto bad    = p.mask;
    bad.at(0, 0) = 2;
    CHECK_THROWS_AS(build_conditioning_image(p.canvas, bad), input_error);
    CHECK_THROWS_AS(build_conditioning_image(p.canvas, binary_mask(3, 4)), input_error);
}

TEST_CASE("random masks respect coverage bounds") {
    std::mt19937_64 rng(1), again(1);
    for (int i = 0; i < 300; ++i) {
        const auto m = random_mask(32, 32, rng);
        CHECK(m == random_mask(32, 32, again));
        const double revealed = 1.0 - static_cast<double>(m.count()) / 1024.0;
        CHECK(revealed >= 0.10);
        CHECK(revealed <= 0.60);
    }
    random_mask_config impossible;
    impossible.min_coverage = 0.99;
    impossible.max_rects    = 1;
    impossible.max_brushes  = 0;
    CHECK_THROWS_AS(random_mask(32, 32, rng, impossible), input_error);
    CHECK(parse_mask_strategy("random") == mask_strategy::random);
    CHECK(to_string(mask_strategy::instance) == "instance");
    CHECK_THROWS_AS(parse_mask_strategy("box"), invalid_range_error);
}

TEST_CASE("instance strategy reveals exactly one object") {
    const auto scenes = small_scenes(30, 2);
    std::mt19937_64 rng(3);
    for (auto& s : scenes) {
        const auto tc = sample_training_condition(s, mask_strategy::instance, rng);
        REQUIRE(tc.instance >= 0);
        const auto& inst = s.instance_masks[tc.instance];
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                CHECK(tc.mask.at(y, x) == (inst.at(y, x) ? 0 : 1));
                for (int c = 0; c < 3; ++c)
                    CHECK(tc.cond.at(c, y, x) == (inst.at(y, x) ? s.img.at(c, y, x) : -1.0));
            }
        CHECK(tc.target == s.img);
    }
}

TEST_CASE("composite selects per pixel") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u;
    image a(5, 4, 3), b(5, 4, 3);
    for (auto& v : a.data) v = u(rng);
    for (auto& v : b.data) v = u(rng);
    binary_mask m(5, 4);
    for (auto& v : m.data) v = u(rng) < 0.5;
    const auto out = composite(a, b, m);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) {
                const double mv = m.at(y, x);
                CHECK(out.at(c, y, x) == mv * a.at(c, y, x) + (1 - mv) * b.at(c, y, x));
            }
    CHECK_THROWS_AS(composite(a, image(4, 4, 3), m), shape_error);
}

TEST_CASE("gated self-attention") {
    paint_unet u(sbtest::small_paint_config(), 5);
    auto& layer = *u.gsa_layers()[0];
    std::mt19937_64 rng(5);
    const auto v = ag::constant(randn({2 * 6, 16}, rng));
    const auto d = ag::constant(randn({2 * 3, 16}, rng));
    const std::vector<std::uint8_t> valid{1, 1, 0, 1, 0, 0};
    SUBCASE("closed gate is the identity") {
        REQUIRE(layer.gamma->value[0] == 0.0);
        CHECK(max_abs_diff(gated_self_attention(v, d, 2, valid, layer)->value, v->value) == 0.0);
        CHECK(max_abs_diff(gated_self_attention(v, nullptr, 2, {}, layer)->value, v->value) == 0.0);
    }
    SUBCASE("open gate mixes in the grounding tokens") {
        layer.gamma->value[0] = 0.7;
        const auto with_d = gated_self_attention(v, d, 2, valid, layer)->value;
        CHECK(with_d.shape == v->value.shape);
        CHECK(max_abs_diff(with_d, v->value) > 1e-6);
        // invalid grounding rows are ignored
        auto d2 = d->value;
        for (int c = 0; c < 16; ++c) d2[2 * 16 + c] += 5.0, d2[5 * 16 + c] -= 3.0;
        CHECK(max_abs_diff(gated_self_attention(v, ag::constant(d2), 2, valid, layer)->value, with_d) < 1e-12);
        // and without any grounding it reduces to gated plain self-attention
        const auto none = gated_self_attention(v, ag::constant(ag::tensor({0, 16})), 2, {}, layer)->value;
        CHECK(max_abs_diff(none, gated_self_attention(v, nullptr, 2, {}, layer)->value) == 0.0);
    }
    SUBCASE("width mismatch") {
        CHECK_THROWS_AS(gated_self_attention(v, ag::constant(randn({6, 8}, rng)), 2, valid, layer), shape_error);
    }
}

TEST_CASE("grounding tokens") {
    paint_unet u(sbtest::small_paint_config(), 6);
    std::mt19937_64 rng(6);
    const auto l = sbtest::random_layout(rng, 4, 4);
    std::vector<object_spec> ph;
    std::vector<bbox> bx;
    for (auto& e : l) ph.push_back(e.object), bx.push_back(e.box);
    const auto d = build_grounding_tokens(u, ph, bx);
    REQUIRE(d.shape == ag::shape_t{4, 16});
    // rows depend on their own object only
    std::swap(ph[1], ph[3]);
    std::swap(bx[1], bx[3]);
    const auto p = build_grounding_tokens(u, ph, bx);
    for (int c = 0; c < 16; ++c) {
        CHECK(p[16 + c] == doctest::Approx(d[3 * 16 + c]).epsilon(1e-14));
        CHECK(p[0 + c] == doctest::Approx(d[c]).epsilon(1e-14));
    }
    bx[0].cx += 0.1;
    CHECK(max_abs_diff(build_grounding_tokens(u, ph, bx), p) > 1e-9);
    CHECK(build_grounding_tokens(u, {}, {}).shape == ag::shape_t{0, 16});
    bx.pop_back();
    CHECK_THROWS_AS(build_grounding_tokens(u, ph, bx), input_error);
}

TEST_CASE("adapters start silent") {
    const paint_unet u(sbtest::small_paint_config(), 7);
    std::mt19937_64 rng(7);
    const auto l  = sbtest::random_layout(rng, 3, 3);
    image c1(16, 16, 3, -1.0), c2(16, 16, 3, -1.0);
    for (int y = 3; y < 9; ++y)
        for (int x = 2; x < 7; ++x) c2.at(0, y, x) = 0.9;
    const auto z  = randn({1, 3, 16, 16}, rng);
    const std::vector<int> t{4};
    const auto a  = u.forward(z, t, condition_for(u, c1, l, "a scene"));
    const auto b  = u.forward(z, t, condition_for(u, c2, l, "a scene"));
    const auto bo = u.forward(z, t, condition_for(u, c2, l, "a scene"), true);
    CHECK(max_abs_diff(a->value, b->value) == 0.0);
    CHECK(max_abs_diff(a->value, bo->value) < 1e-12);
    CHECK(a->value.shape == ag::shape_t{1, 3, 16, 16});
    // the caption does reach the base network
    const auto other = u.forward(z, t, condition_for(u, c1, l, "a moon over water"));
    CHECK(max_abs_diff(a->value, other->value) > 1e-9);
}

TEST_CASE("phases partition the parameters") {
    paint_unet u(sbtest::small_paint_config(), 8);
    for (auto& e : u.params().entries()) {
        const bool base = e.name.rfind("base.", 0) == 0;
        CHECK(e.trainable == !base);
        CHECK(e.value->requires_grad == e.trainable);
    }
    u.set_phase_pretrain();
    for (auto& e : u.params().entries()) CHECK(e.trainable == (e.name.rfind("base.", 0) == 0));
    // the control branch mirrors the base encoder
    u.params().find("base.enc.conv_in.weight")->value->value[0] = 0.123;
    u.init_control_from_base();
    CHECK(u.params().find("control.enc.conv_in.weight")->value->value[0] == 0.123);
}

TEST_CASE("adapter training leaves the base untouched and wakes the control branch") {
    const auto scenes = small_scenes(8, 9);
    paint_unet u(sbtest::small_paint_config(), 9);
    const auto sched = diffusion::build_schedule(diffusion::schedule_kind::linear, 20, 1e-4, 0.02);
    train_config cfg;
    cfg.batch      = 2;
    cfg.iterations = 3;
    cfg.lr         = 1e-2;
    const auto frozen = u.params().checksum(false);
    const auto live   = u.params().checksum(true);
    train_state st;
    const auto log = train_adapters(u, scenes, cfg, sched, st);
    CHECK(log.size() == 3);
    CHECK(u.params().checksum(false) == frozen);
    CHECK(u.params().checksum(true) != live);
    for (auto& e : u.params().entries())
        if (!e.trainable) CHECK(e.value->grad.empty());
    // with trained zero convolutions the conditioning image matters
    std::mt19937_64 rng(9);
    const auto l = scenes[0].objects;
    image c1(16, 16, 3, -1.0), c2(16, 16, 3, 0.8);
    const auto z = randn({1, 3, 16, 16}, rng);
    const std::vector<int> t{4};
    CHECK(max_abs_diff(u.forward(z, t, condition_for(u, c1, l, "x"))->value,
                       u.forward(z, t, condition_for(u, c2, l, "x"))->value) > 1e-9);
}

TEST_CASE("pretraining lowers the loss and resumes exactly") {
    const auto scenes = small_scenes(4, 10);
    const auto sched  = diffusion::build_schedule(diffusion::schedule_kind::linear, 20, 1e-4, 0.02);
    train_config cfg;
    cfg.batch           = 4;
    cfg.base_iterations = 120;
    cfg.base_lr         = 3e-3;
    cfg.iterations      = 0;
    cfg.seed            = 3;
    paint_unet u(sbtest::small_paint_config(), 10);
    train_state st;
    const auto log = train_paintnet(u, scenes, cfg, sched, st);
    REQUIRE(log.size() == 120);
    double first = 0, last = 0;
    for (int i = 0; i < 20; ++i) first += log[i].loss, last += log[100 + i].loss;
    CHECK(last < 0.7 * first);
    CHECK(st.phase == phase::adapters);

    paint_unet v(sbtest::small_paint_config(), 10);
    train_state sv;
    auto half            = cfg;
    half.base_iterations = 50;
    pretrain_base(v, scenes, half, sched, sv);
    const auto rest = train_paintnet(v, scenes, cfg, sched, sv);
    REQUIRE(rest.size() == 70);
    CHECK(rest.back().loss == log.back().loss);
    CHECK(v.params().checksum(false) == u.params().checksum(false));
}

TEST_CASE("paintable rectangles and generation") {
    const paint_unet u(sbtest::small_paint_config(), 11);
    SUBCASE("tiny and off-canvas boxes still land a pixel") {
        const image s = quad_subject();
        for (const bbox b : {bbox{0.5, 0.5, 1e-3, 1e-3}, bbox{1.3, -0.2, 0.2, 0.2}, bbox{0.01, 0.99, 0.02, 0.02}}) {
            const auto r = paintable_rect(s, b, 16);
            CHECK(r.w >= 1);
            CHECK(r.x0 >= 0);
            CHECK(r.y0 >= 0);
            CHECK(r.x0 + r.w <= 16);
            CHECK(r.y0 + r.h <= 16);
            CHECK_NOTHROW(rescale_and_paste(s, r, 16, 16));
        }
        const bbox ok{0.5, 0.5, 0.25, 0.25};
        CHECK(paintable_rect(s, ok, 16) == to_pixel_rect(ok, 16, 16));
    }
    SUBCASE("subject pixels survive composition") {
        std::mt19937_64 gen(11);
        std::vector<paint_request> reqs;
        for (int i = 0; i < 2; ++i) reqs.push_back({quad_subject(), sbtest::random_layout(gen, 3, 3), "a scene", {}});
        reqs[1].subject_rect = pixel_rect{2, 3, 6, 4};
        const auto sched     = diffusion::build_schedule(diffusion::schedule_kind::linear, 5, 1e-4, 0.02);
        std::mt19937_64 r1(12), r2(12);
        const auto out = generate(u, reqs, sched, r1);
        REQUIRE(out.size() == 2);
        CHECK(out[1].rect == pixel_rect{2, 3, 6, 4});
        for (auto& r : out) {
            CHECK(r.sample == quantize8(r.sample));
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x)
                    for (int c = 0; c < 3; ++c)
                        CHECK(r.composed.at(c, y, x) == (r.mask.at(y, x) ? r.sample.at(c, y, x) : r.pasted.at(c, y, x)));
        }
        const auto again = generate(u, reqs, sched, r2);
        CHECK(again[0].composed == out[0].composed);
        CHECK(generate(u, std::span<const paint_request>{}, sched, r1).empty());
    }
}
