#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "scenebooth/autograd.hpp"
#include "scenebooth/errors.hpp"
#include "scenebooth/nn.hpp"
#include "support.hpp"

using namespace scenebooth;
using ag::shape_t;
using ag::tensor;
using ag::var;

namespace {

tensor randn(shape_t s, std::mt19937_64& rng, double scale = 1.0) {
    tensor t(std::move(s));
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : t.data) v = n(rng);
    return t;
}

// Checks every input gradient of f against central differences of the
// scalar sum(f(inputs) * R) for a fixed random R.
void check_gradients(const std::vector<var>& inputs, const std::function<var()>& f, std::mt19937_64& rng,
                     double tol = 1e-6) {
    const auto probe = randn(f()->value.shape, rng);
    auto loss        = [&] {
        const auto out = f();
        double s       = 0;
        for (std::size_t i = 0; i < probe.numel(); ++i) s += out->value[i] * probe[i];
        return s;
    };
    for (auto& x : inputs) x->grad.clear();
    const auto out = f();
    ag::backward(ag::sum(ag::mul(out, ag::constant(probe))));
    for (auto& x : inputs) {
        REQUIRE(x->grad.size() == x->value.numel());
        for (std::size_t i = 0; i < x->value.numel(); ++i) {
            const double n = sbtest::central_difference(loss, x->value.data[i], 1e-6);
            const double a = x->grad[i];
            if (std::abs(a) < 1e-9 && std::abs(n) < 1e-9) continue;
            CHECK_MESSAGE(sbtest::relative_error(a, n) < tol, "index " << i << " analytic " << a << " numeric " << n);
        }
    }
}

var param(shape_t s, std::mt19937_64& rng, double scale = 1.0) { return ag::leaf(randn(std::move(s), rng, scale), true); }

}  // namespace

TEST_CASE("elementwise gradients") {
    std::mt19937_64 rng(1);
    const auto a = param({3, 4}, rng), b = param({3, 4}, rng), s = param({1}, rng);
    check_gradients({a, b}, [&] { return ag::add(a, b); }, rng);
    check_gradients({a, b}, [&] { return ag::sub(a, b); }, rng);
    check_gradients({a, b}, [&] { return ag::mul(a, b); }, rng);
    check_gradients({a}, [&] { return ag::scale(a, -2.5); }, rng);
    check_gradients({a, s}, [&] { return ag::mul_scalar(a, s); }, rng);
    check_gradients({a}, [&] { return ag::tanh(a); }, rng);
    check_gradients({a}, [&] { return ag::silu(a); }, rng);
    check_gradients({a}, [&] { return ag::gelu(a); }, rng);
    check_gradients({a}, [&] { return ag::reshape(a, {2, 6}); }, rng);
    CHECK_THROWS_AS(ag::add(a, param({4, 3}, rng)), shape_error);
}

TEST_CASE("dense algebra matches loops and differentiates") {
    std::mt19937_64 rng(2);
    const auto a = param({3, 5}, rng), b = param({5, 2}, rng);
    const auto c = ag::matmul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            double s = 0;
            for (int k = 0; k < 5; ++k) s += a->value[i * 5 + k] * b->value[k * 2 + j];
            CHECK(c->value[i * 2 + j] == doctest::Approx(s).epsilon(1e-14));
        }
    check_gradients({a, b}, [&] { return ag::matmul(a, b); }, rng);

    const auto x = param({4, 5}, rng), w = param({3, 5}, rng), bias = param({3}, rng);
    const auto y = ag::linear(x, w, bias);
    for (int r = 0; r < 4; ++r)
        for (int o = 0; o < 3; ++o) {
            double s = bias->value[o];
            for (int k = 0; k < 5; ++k) s += x->value[r * 5 + k] * w->value[o * 5 + k];
            CHECK(y->value[r * 3 + o] == doctest::Approx(s).epsilon(1e-14));
        }
    check_gradients({x, w, bias}, [&] { return ag::linear(x, w, bias); }, rng);
    check_gradients({x, w}, [&] { return ag::linear(x, w, nullptr); }, rng);

    const auto g = param({5}, rng), be = param({5}, rng);
    const auto ln = ag::layer_norm(x, g, be);
    for (int r = 0; r < 4; ++r) {
        double m = 0, v = 0;
        for (int k = 0; k < 5; ++k) m += x->value[r * 5 + k] / 5;
        for (int k = 0; k < 5; ++k) v += std::pow(x->value[r * 5 + k] - m, 2) / 5;
        for (int k = 0; k < 5; ++k)
            CHECK(ln->value[r * 5 + k] ==
                  doctest::Approx((x->value[r * 5 + k] - m) / std::sqrt(v + 1e-5) * g->value[k] + be->value[k]).epsilon(1e-12));
    }
    check_gradients({x, g, be}, [&] { return ag::layer_norm(x, g, be); }, rng);
}

TEST_CASE("attention matches a naive softmax and masks keys") {
    std::mt19937_64 rng(3);
    const int B = 2, lq = 3, lk = 4, d = 4, H = 2, dh = 2;
    const auto q = param({B * lq, d}, rng), k = param({B * lk, d}, rng), v = param({B * lk, d}, rng);
    const std::vector<std::uint8_t> valid{1, 0, 1, 1, 1, 1, 1, 0};
    const auto out = ag::attention(q, k, v, B, H, valid);
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < lq; ++i) {
                std::vector<double> s(lk);
                double mx = -1e300, z = 0;
                for (int j = 0; j < lk; ++j) {
                    s[j] = 0;
                    for (int c = 0; c < dh; ++c)
                        s[j] += q->value[(b * lq + i) * d + h * dh + c] * k->value[(b * lk + j) * d + h * dh + c];
                    s[j] /= std::sqrt(static_cast<double>(dh));
                    if (valid[b * lk + j]) mx = std::max(mx, s[j]);
                }
                for (int j = 0; j < lk; ++j) z += valid[b * lk + j] ? std::exp(s[j] - mx) : 0.0;
                for (int c = 0; c < dh; ++c) {
                    double o = 0;
                    for (int j = 0; j < lk; ++j)
                        if (valid[b * lk + j]) o += std::exp(s[j] - mx) / z * v->value[(b * lk + j) * d + h * dh + c];
                    CHECK(out->value[(b * lq + i) * d + h * dh + c] == doctest::Approx(o).epsilon(1e-12));
                }
            }
    check_gradients({q, k, v}, [&] { return ag::attention(q, k, v, B, H, valid); }, rng);
    check_gradients({q, k, v}, [&] { return ag::attention(q, k, v, B, H); }, rng);
}

TEST_CASE("image ops") {
    std::mt19937_64 rng(4);
    const auto x = param({2, 3, 5, 4}, rng), w = param({2, 3, 3, 3}, rng, 0.5), b = param({2}, rng);
    SUBCASE("convolution against direct summation") {
        for (int stride : {1, 2}) {
            const auto y = ag::conv2d(x, w, b, stride, 1);
            const int oh = (5 + 2 - 3) / stride + 1, ow = (4 + 2 - 3) / stride + 1;
            REQUIRE(y->value.shape == shape_t{2, 2, oh, ow});
            for (int n = 0; n < 2; ++n)
                for (int o = 0; o < 2; ++o)
                    for (int i = 0; i < oh; ++i)
                        for (int j = 0; j < ow; ++j) {
                            double s = b->value[o];
                            for (int c = 0; c < 3; ++c)
                                for (int ki = 0; ki < 3; ++ki)
                                    for (int kj = 0; kj < 3; ++kj) {
                                        const int yy = i * stride + ki - 1, xx = j * stride + kj - 1;
                                        if (yy < 0 || yy >= 5 || xx < 0 || xx >= 4) continue;
                                        s += w->value[((o * 3 + c) * 3 + ki) * 3 + kj] *
                                             x->value[((n * 3 + c) * 5 + yy) * 4 + xx];
                                    }
                            CHECK(y->value[((n * 2 + o) * oh + i) * ow + j] == doctest::Approx(s).epsilon(1e-12));
                        }
            check_gradients({x, w, b}, [&] { return ag::conv2d(x, w, b, stride, 1); }, rng);
        }
    }
    SUBCASE("group norm") {
        const auto g = param({4}, rng), be = param({4}, rng), x4 = param({2, 4, 3, 3}, rng);
        const auto y = ag::group_norm(x4, g, be, 2);
        for (int n = 0; n < 2; ++n)
            for (int grp = 0; grp < 2; ++grp) {
                double m = 0, v = 0;
                for (int i = 0; i < 18; ++i) m += x4->value[n * 36 + grp * 18 + i] / 18;
                for (int i = 0; i < 18; ++i) v += std::pow(x4->value[n * 36 + grp * 18 + i] - m, 2) / 18;
                for (int i = 0; i < 18; ++i) {
                    const int ch = grp * 2 + i / 9;
                    CHECK(y->value[n * 36 + grp * 18 + i] ==
                          doctest::Approx((x4->value[n * 36 + grp * 18 + i] - m) / std::sqrt(v + 1e-5) * g->value[ch] +
                                          be->value[ch])
                              .epsilon(1e-12));
                }
            }
        check_gradients({x4, g, be}, [&] { return ag::group_norm(x4, g, be, 2); }, rng);
        CHECK_THROWS(ag::group_norm(x4, g, be, 3));
    }
    SUBCASE("layout plumbing") {
        const auto u = ag::upsample_nearest2x(x);
        REQUIRE(u->value.shape == shape_t{2, 3, 10, 8});
        CHECK(u->value[((1 * 3 + 2) * 10 + 7) * 8 + 5] == x->value[((1 * 3 + 2) * 5 + 3) * 4 + 2]);
        check_gradients({x}, [&] { return ag::upsample_nearest2x(x); }, rng);
        const auto x2 = param({2, 2, 5, 4}, rng);
        check_gradients({x, x2}, [&] { return ag::concat_channels(x, x2); }, rng);
        const auto t = ag::to_tokens(x);
        CHECK(t->value[(1 * 20 + 2 * 4 + 3) * 3 + 1] == x->value[((1 * 3 + 1) * 5 + 2) * 4 + 3]);
        check_gradients({x}, [&] { return ag::from_tokens(ag::to_tokens(ag::scale(x, 2)), 2, 3, 5, 4); }, rng);
        const auto e = param({2, 3}, rng);
        check_gradients({x, e}, [&] { return ag::add_channel_per_sample(x, e); }, rng);
    }
}

TEST_CASE("token bookkeeping") {
    std::mt19937_64 rng(5);
    const auto a = param({2 * 3, 4}, rng), b = param({2 * 2, 4}, rng), e = param({2, 4}, rng), r = param({4}, rng);
    check_gradients({a, e}, [&] { return ag::add_rows_per_sample(a, e, 2); }, rng);
    const auto cat = ag::concat_rows_batched(a, b, 2);
    CHECK(cat->value[(1 * 5 + 3) * 4 + 2] == b->value[(1 * 2 + 0) * 4 + 2]);
    check_gradients({a, b}, [&] { return ag::concat_rows_batched(a, b, 2); }, rng);
    const auto back = ag::take_rows_batched(cat, 2, 3);
    CHECK(back->value.data == a->value.data);
    check_gradients({a, b}, [&] { return ag::take_rows_batched(ag::concat_rows_batched(a, b, 2), 2, 3); }, rng);
    const auto side = param({6, 2}, rng);
    check_gradients({a, side}, [&] { return ag::concat_cols({a, side}); }, rng);
    const std::vector<std::uint8_t> use{1, 0, 0, 1, 0, 1};
    const auto sel = ag::select_rows(a, r, use);
    CHECK(sel->value[3 * 4 + 1] == r->value[1]);
    CHECK(sel->value[1 * 4 + 1] == a->value[1 * 4 + 1]);
    check_gradients({a, r}, [&] { return ag::select_rows(a, r, use); }, rng);
}

TEST_CASE("reductions and weighted loss") {
    std::mt19937_64 rng(6);
    const auto x = param({3, 4}, rng);
    const auto target = randn({3, 4}, rng);
    std::vector<double> w(12);
    for (int i = 0; i < 12; ++i) w[i] = i % 3 == 0 ? 0.0 : 1.0 + i;
    double num = 0, den = 0;
    for (int i = 0; i < 12; ++i) num += w[i] * std::pow(x->value[i] - target[i], 2), den += w[i];
    CHECK(ag::weighted_mse(x, target, w)->value[0] == doctest::Approx(num / den).epsilon(1e-14));
    check_gradients({x}, [&] { return ag::weighted_mse(x, target, w); }, rng);
    check_gradients({x}, [&] { return ag::weighted_mse(x, target); }, rng);
    check_gradients({x}, [&] { return ag::mean(x); }, rng);
    check_gradients({x}, [&] { return ag::sum(ag::mul(x, x)); }, rng);
}

TEST_CASE("graph bookkeeping") {
    std::mt19937_64 rng(7);
    const auto x = param({2, 2}, rng);
    SUBCASE("reused nodes accumulate") {
        ag::backward(ag::sum(ag::add(x, x)));
        for (double g : x->grad) CHECK(g == 2.0);
    }
    SUBCASE("no-grad records nothing") {
        ag::no_grad_guard guard;
        CHECK_FALSE(ag::grad_enabled());
        const auto y = ag::mul(x, x);
        CHECK_FALSE(y->requires_grad);
    }
    SUBCASE("constants never receive gradient") {
        const auto c = ag::constant(randn({2, 2}, rng));
        ag::backward(ag::sum(ag::mul(x, c)));
        CHECK(c->grad.empty());
    }
    SUBCASE("storage is aligned") {
        const auto t = randn({3, 7}, rng);
        CHECK(reinterpret_cast<std::uintptr_t>(t.data.data()) % 64 == 0);
    }
}

TEST_CASE("adam step by hand and clipping") {
    nn::parameter_store store;
    const auto p = store.create("p", tensor({2}, std::vector<double>{1.0, -2.0}), true);
    nn::adam opt(store.trainable(), nn::adam_config{0.1, 0.9, 0.999, 1e-8, 0.0});
    p->grad = {0.5, -3.0};
    CHECK(opt.step() == doctest::Approx(std::sqrt(0.25 + 9.0)));
    // first bias-corrected step moves each coordinate by lr * sign(g)
    CHECK(p->value[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(p->value[1] == doctest::Approx(-1.9).epsilon(1e-7));
    CHECK(p->grad.empty());

    nn::adam clipped(store.trainable(), nn::adam_config{0.1, 0.9, 0.999, 1e-8, 1.0});
    p->grad = {3.0, 4.0};
    CHECK(clipped.step() == doctest::Approx(5.0));
    CHECK(clipped.first_moments()[0][0] == doctest::Approx(0.1 * 0.6));
    p->grad = {std::nan(""), 0.0};
    CHECK_THROWS_AS(clipped.step(), training_error);
}

TEST_CASE("parameter store partitions") {
    nn::parameter_store store;
    std::mt19937_64 rng(8);
    store.create("base.a", randn({3}, rng), true);
    store.create("base.b", randn({2}, rng), true);
    store.create("copy.a", randn({3}, rng), false);
    CHECK(store.count(true) == 5);
    CHECK(store.count(false) == 3);
    const auto frozen = store.checksum(false);
    store.set_trainable("base.", false);
    CHECK(store.trainable().empty());
    CHECK(store.checksum(false) != frozen);
    store.copy_values("base.", "copy.");
    CHECK(store.find("copy.a")->value->value.data == store.find("base.a")->value->value.data);
    CHECK(store.find("missing") == nullptr);
    CHECK_THROWS(store.create("base.a", randn({3}, rng), true));
}

TEST_CASE("timestep embedding") {
    const std::vector<int> t{0, 7};
    const auto e = nn::timestep_embedding(t, 8);
    REQUIRE(e.shape == shape_t{2, 8});
    for (int j = 0; j < 4; ++j) {
        CHECK(e[j] == 0.0);
        CHECK(e[4 + j] == 1.0);
        const double f = std::exp(-std::log(10000.0) * j / 4);
        CHECK(e[8 + j] == doctest::Approx(std::sin(7 * f)).epsilon(1e-14));
    }
}
