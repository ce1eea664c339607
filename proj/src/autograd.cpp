#include "scenebooth/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "scenebooth/errors.hpp"

namespace scenebooth::ag {

namespace {

using matrix    = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using map_t     = Eigen::Map<matrix>;
using cmap_t    = Eigen::Map<const matrix>;
using strided_t = Eigen::Map<matrix, 0, Eigen::OuterStride<>>;
using cstrided  = Eigen::Map<const matrix, 0, Eigen::OuterStride<>>;

cmap_t cview(const buffer& d, int rows, int cols) { return cmap_t(d.data(), rows, cols); }
map_t view(buffer& d, int rows, int cols) { return map_t(d.data(), rows, cols); }

thread_local bool grad_mode = true;

var make_result(tensor value, std::vector<var> parents, std::function<void(node&)> fn) {
    auto out   = std::make_shared<node>();
    out->value = std::move(value);
    bool needs = grad_mode && std::any_of(parents.begin(), parents.end(), [](const var& p) { return p && p->requires_grad; });
    if (needs) {
        out->requires_grad = true;
        out->parents       = std::move(parents);
        out->backward_fn   = std::move(fn);
    }
    return out;
}

void require(bool cond, const std::string& what) {
    if (!cond) throw shape_error(what);
}

void require_same(const var& a, const var& b, const char* op) {
    if (a->shape() != b->shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " +
                          shape_str(b->shape()));
}

template <class F>
var unary(const var& x, F&& fwd_deriv) {
    tensor out(x->shape());
    buffer deriv(x->value.numel());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        auto [y, dy] = fwd_deriv(x->value[i]);
        out[i]       = y;
        deriv[i]     = dy;
    }
    return make_result(std::move(out), {x}, [deriv = std::move(deriv)](node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv[i];
    });
}

}  // namespace

no_grad_guard::no_grad_guard() : previous_(grad_mode) { grad_mode = false; }
no_grad_guard::~no_grad_guard() { grad_mode = previous_; }
bool grad_enabled() { return grad_mode; }

std::size_t numel_of(const shape_t& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const shape_t& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

tensor::tensor(shape_t s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

tensor::tensor(shape_t s, const std::vector<double>& d) : tensor(std::move(s), buffer(d.begin(), d.end())) {}

tensor::tensor(shape_t s, buffer d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
        throw shape_error("tensor: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
}

buffer& node::ensure_grad() {
    if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0);
    return grad;
}

var constant(tensor t) { return leaf(std::move(t), false); }

var leaf(tensor t, bool requires_grad) {
    auto n           = std::make_shared<node>();
    n->value         = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

void backward(const var& root) {
    require(root->value.numel() == 1, "backward: root must hold a single element");
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<node*> order;
    std::unordered_set<node*> seen;
    std::vector<std::pair<node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// --- elementwise -----------------------------------------------------------

var add(const var& a, const var& b) {
    require_same(a, b, "add");
    tensor out(a->shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return make_result(std::move(out), {a, b}, [](node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

var sub(const var& a, const var& b) {
    require_same(a, b, "sub");
    tensor out(a->shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    return make_result(std::move(out), {a, b}, [](node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            auto& g   = p->ensure_grad();
            double sg = k == 0 ? 1.0 : -1.0;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg * self.grad[i];
        }
    });
}

var mul(const var& a, const var& b) {
    require_same(a, b, "mul");
    tensor out(a->shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    return make_result(std::move(out), {a, b}, [](node& self) {
        auto& a = self.parents[0];
        auto& b = self.parents[1];
        if (a->requires_grad) {
            auto& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            auto& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
        }
    });
}

var scale(const var& a, double s) {
    tensor out(a->shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
    return make_result(std::move(out), {a}, [s](node& self) {
        auto& p = self.parents[0];
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

var mul_scalar(const var& x, const var& s) {
    require(s->value.numel() == 1, "mul_scalar: scale must hold one element");
    const double sv = s->value[0];
    tensor out(x->shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * sv;
    return make_result(std::move(out), {x, s}, [](node& self) {
        auto& x = self.parents[0];
        auto& s = self.parents[1];
        if (x->requires_grad) {
            auto& g = x->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s->value[0];
        }
        if (s->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x->value[i];
            s->ensure_grad()[0] += acc;
        }
    });
}

var tanh(const var& x) {
    return unary(x, [](double v) {
        double y = std::tanh(v);
        return std::pair{y, 1.0 - y * y};
    });
}

var silu(const var& x) {
    const auto n = static_cast<Eigen::Index>(x->value.numel());
    Eigen::Map<const Eigen::ArrayXd> xv(x->value.data.data(), n);
    const Eigen::ArrayXd sig = 1.0 / (1.0 + (-xv).exp());
    tensor out(x->shape());
    Eigen::Map<Eigen::ArrayXd>(out.data.data(), n) = xv * sig;
    return make_result(std::move(out), {x}, [sig, n](node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        Eigen::Map<const Eigen::ArrayXd> xv(p->value.data.data(), n);
        Eigen::Map<const Eigen::ArrayXd> gy(self.grad.data(), n);
        Eigen::Map<Eigen::ArrayXd>(p->ensure_grad().data(), n) += gy * sig * (1.0 + xv * (1.0 - sig));
    });
}

var gelu(const var& x) {
    return unary(x, [](double v) {
        constexpr double inv_sqrt2     = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi  = 0.39894228040143267794;
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return std::pair{v * cdf, cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v)};
    });
}

// --- dense algebra ---------------------------------------------------------

var matmul(const var& a, const var& b) {
    require(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(0),
            "matmul: incompatible " + shape_str(a->shape()) + " x " + shape_str(b->shape()));
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    tensor out({m, n});
    view(out.data, m, n).noalias() = cview(a->value.data, m, k) * cview(b->value.data, k, n);
    return make_result(std::move(out), {a, b}, [m, k, n](node& self) {
        auto& a  = self.parents[0];
        auto& b  = self.parents[1];
        auto dy  = cview(self.grad, m, n);
        if (a->requires_grad) view(a->ensure_grad(), m, k).noalias() += dy * cview(b->value.data, k, n).transpose();
        if (b->requires_grad) view(b->ensure_grad(), k, n).noalias() += cview(a->value.data, m, k).transpose() * dy;
    });
}

var linear(const var& x, const var& w, const var& bias) {
    require(x->value.rank() == 2 && w->value.rank() == 2 && x->value.dim(1) == w->value.dim(1),
            "linear: incompatible " + shape_str(x->shape()) + " with weight " + shape_str(w->shape()));
    const int r = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
    if (bias) require(bias->value.numel() == static_cast<std::size_t>(out_dim), "linear: bias size");
    tensor out({r, out_dim});
    auto y = view(out.data, r, out_dim);
    y.noalias() = cview(x->value.data, r, in) * cview(w->value.data, out_dim, in).transpose();
    if (bias) y.rowwise() += cview(bias->value.data, 1, out_dim).row(0);
    std::vector<var> parents{x, w};
    if (bias) parents.push_back(bias);
    return make_result(std::move(out), std::move(parents), [r, in, out_dim](node& self) {
        auto& x = self.parents[0];
        auto& w = self.parents[1];
        auto dy = cview(self.grad, r, out_dim);
        if (x->requires_grad) view(x->ensure_grad(), r, in).noalias() += dy * cview(w->value.data, out_dim, in);
        if (w->requires_grad)
            view(w->ensure_grad(), out_dim, in).noalias() += dy.transpose() * cview(x->value.data, r, in);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad)
            view(self.parents[2]->ensure_grad(), 1, out_dim) += dy.colwise().sum();
    });
}

var layer_norm(const var& x, const var& gamma, const var& beta, double eps) {
    require(x->value.rank() == 2, "layer_norm: expects a rank-2 input");
    const int r = x->value.dim(0), d = x->value.dim(1);
    require(gamma->value.numel() == static_cast<std::size_t>(d) && beta->value.numel() == static_cast<std::size_t>(d),
            "layer_norm: affine size");
    tensor out({r, d});
    buffer xhat(static_cast<std::size_t>(r) * d), inv_std(r);
    for (int i = 0; i < r; ++i) {
        const double* row = x->value.data.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var_ = 0.0;
        for (int j = 0; j < d; ++j) var_ += (row[j] - mu) * (row[j] - mu);
        var_ /= d;
        inv_std[i] = 1.0 / std::sqrt(var_ + eps);
        for (int j = 0; j < d; ++j) {
            std::size_t idx = static_cast<std::size_t>(i) * d + j;
            xhat[idx]       = (row[j] - mu) * inv_std[i];
            out[idx]        = xhat[idx] * gamma->value[j] + beta->value[j];
        }
    }
    return make_result(std::move(out), {x, gamma, beta},
                       [r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](node& self) {
                           auto& x = self.parents[0];
                           auto& g = self.parents[1];
                           auto& b = self.parents[2];
                           if (g->requires_grad || b->requires_grad) {
                               auto& gg = g->ensure_grad();
                               auto& gb = b->ensure_grad();
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < d; ++j) {
                                       std::size_t idx = static_cast<std::size_t>(i) * d + j;
                                       gg[j] += self.grad[idx] * xhat[idx];
                                       gb[j] += self.grad[idx];
                                   }
                           }
                           if (!x->requires_grad) return;
                           auto& gx = x->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               double m1 = 0.0, m2 = 0.0;
                               for (int j = 0; j < d; ++j) {
                                   std::size_t idx = static_cast<std::size_t>(i) * d + j;
                                   double dxh      = self.grad[idx] * g->value[j];
                                   m1 += dxh;
                                   m2 += dxh * xhat[idx];
                               }
                               m1 /= d;
                               m2 /= d;
                               for (int j = 0; j < d; ++j) {
                                   std::size_t idx = static_cast<std::size_t>(i) * d + j;
                                   double dxh      = self.grad[idx] * g->value[j];
                                   gx[idx] += inv_std[i] * (dxh - m1 - xhat[idx] * m2);
                               }
                           }
                       });
}

var attention(const var& q, const var& k, const var& v, int batch, int heads, std::span<const std::uint8_t> key_valid) {
    require(q->value.rank() == 2 && k->value.rank() == 2 && v->value.rank() == 2, "attention: rank-2 inputs");
    const int d = q->value.dim(1);
    require(k->value.dim(1) == d && v->value.dim(1) == d, "attention: width mismatch");
    require(batch > 0 && q->value.dim(0) % batch == 0 && k->value.dim(0) % batch == 0 &&
                k->value.dim(0) == v->value.dim(0),
            "attention: rows not divisible by batch");
    require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
    const int lq = q->value.dim(0) / batch, lk = k->value.dim(0) / batch, dh = d / heads;
    require(key_valid.empty() || key_valid.size() == static_cast<std::size_t>(batch) * lk,
            "attention: key mask size");
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    tensor out({batch * lq, d});
    // Softmax probabilities, [batch][heads][lq][lk].
    auto probs = std::make_shared<buffer>(static_cast<std::size_t>(batch) * heads * lq * lk);
    std::vector<std::uint8_t> mask(key_valid.begin(), key_valid.end());

    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            cstrided qb(q->value.data.data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh,
                        Eigen::OuterStride<>(d));
            cstrided kb(k->value.data.data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh,
                        Eigen::OuterStride<>(d));
            cstrided vb(v->value.data.data() + static_cast<std::size_t>(b) * lk * d + h * dh, lk, dh,
                        Eigen::OuterStride<>(d));
            map_t p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk);
            p.noalias() = (qb * kb.transpose()) * sc;
            bool masked = false;
            if (!mask.empty())
                for (int j = 0; j < lk; ++j)
                    if (!mask[static_cast<std::size_t>(b) * lk + j]) {
                        p.col(j).setConstant(-INFINITY);
                        masked = true;
                    }
            const Eigen::VectorXd mx = p.rowwise().maxCoeff();
            for (int i = 0; i < lq; ++i) {
                if (mx(i) == -INFINITY) {
                    p.row(i).setZero();
                    continue;
                }
                p.row(i) = (p.row(i).array() - mx(i)).exp();
            }
            if (masked)
                for (int j = 0; j < lk; ++j)
                    if (!mask[static_cast<std::size_t>(b) * lk + j]) p.col(j).setZero();
            const Eigen::VectorXd z = p.rowwise().sum();
            for (int i = 0; i < lq; ++i)
                if (z(i) > 0.0) p.row(i) /= z(i);
            strided_t ob(out.data.data() + static_cast<std::size_t>(b) * lq * d + h * dh, lq, dh,
                         Eigen::OuterStride<>(d));
            ob.noalias() = p * vb;
        }
    }
    return make_result(std::move(out), {q, k, v}, [=](node& self) {
        auto& q = self.parents[0];
        auto& k = self.parents[1];
        auto& v = self.parents[2];
        double* gq = q->requires_grad ? q->ensure_grad().data() : nullptr;
        double* gk = k->requires_grad ? k->ensure_grad().data() : nullptr;
        double* gv = v->requires_grad ? v->ensure_grad().data() : nullptr;
        matrix dp, ds;
        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                const std::size_t qoff = static_cast<std::size_t>(b) * lq * d + h * dh;
                const std::size_t koff = static_cast<std::size_t>(b) * lk * d + h * dh;
                cstrided qb(q->value.data.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
                cstrided kb(k->value.data.data() + koff, lk, dh, Eigen::OuterStride<>(d));
                cstrided vb(v->value.data.data() + koff, lk, dh, Eigen::OuterStride<>(d));
                cstrided dob(self.grad.data() + qoff, lq, dh, Eigen::OuterStride<>(d));
                cmap_t p(probs->data() + (static_cast<std::size_t>(b) * heads + h) * lq * lk, lq, lk);
                if (gv) strided_t(gv + koff, lk, dh, Eigen::OuterStride<>(d)).noalias() += p.transpose() * dob;
                if (!gq && !gk) continue;
                dp.noalias() = dob * vb.transpose();
                ds           = p.cwiseProduct(dp);
                Eigen::VectorXd rs = ds.rowwise().sum();
                ds -= (p.array().colwise() * rs.array()).matrix();
                ds *= sc;
                if (gq) strided_t(gq + qoff, lq, dh, Eigen::OuterStride<>(d)).noalias() += ds * kb;
                if (gk) strided_t(gk + koff, lk, dh, Eigen::OuterStride<>(d)).noalias() += ds.transpose() * qb;
            }
        }
    });
}

// --- image tensors ---------------------------------------------------------

namespace {

struct conv_geom {
    int batch, cin, h, w, cout, k, stride, pad, ho, wo;
    int col_rows() const { return cin * k * k; }
    int col_cols() const { return ho * wo; }
};

// Valid output-column range [lo, hi) for kernel offset kx when stride is 1.
inline void valid_cols(const conv_geom& g, int kx, int& lo, int& hi) {
    lo = std::clamp(g.pad - kx, 0, g.wo);
    hi = std::clamp(g.w + g.pad - kx, lo, g.wo);
}

void im2col(const double* x, const conv_geom& g, double* col) {
    for (int c = 0; c < g.cin; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                double* dst = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * g.ho * g.wo;
                int lo = 0, hi = 0;
                if (g.stride == 1) valid_cols(g, kx, lo, hi);
                for (int oy = 0; oy < g.ho; ++oy, dst += g.wo) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    if (g.stride == 1) {
                        std::fill(dst, dst + lo, 0.0);
                        std::copy(src + lo - g.pad + kx, src + hi - g.pad + kx, dst + lo);
                        std::fill(dst + hi, dst + g.wo, 0.0);
                        continue;
                    }
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox]      = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* col, const conv_geom& g, double* dx) {
    for (int c = 0; c < g.cin; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const double* src = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * g.ho * g.wo;
                int lo = 0, hi = 0;
                if (g.stride == 1) valid_cols(g, kx, lo, hi);
                for (int oy = 0; oy < g.ho; ++oy, src += g.wo) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    double* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    if (g.stride == 1) {
                        for (int ox = lo; ox < hi; ++ox) dst[ox - g.pad + kx] += src[ox];
                        continue;
                    }
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

var conv2d(const var& x, const var& w, const var& bias, int stride, int pad) {
    require(x->value.rank() == 4 && w->value.rank() == 4, "conv2d: expects [B,C,H,W] input and [O,I,K,K] weight");
    require(x->value.dim(1) == w->value.dim(1), "conv2d: channel mismatch " + shape_str(x->shape()) + " vs " +
                                                    shape_str(w->shape()));
    conv_geom g{x->value.dim(0), x->value.dim(1), x->value.dim(2), x->value.dim(3), w->value.dim(0),
                w->value.dim(2), stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    require(g.ho > 0 && g.wo > 0, "conv2d: empty output");
    if (bias) require(bias->value.numel() == static_cast<std::size_t>(g.cout), "conv2d: bias size");

    const std::size_t col_size = static_cast<std::size_t>(g.col_rows()) * g.col_cols();
    auto cols = std::make_shared<buffer>(col_size * g.batch);
    tensor out({g.batch, g.cout, g.ho, g.wo});
    auto wm = cview(w->value.data, g.cout, g.col_rows());
    for (int b = 0; b < g.batch; ++b) {
        double* col = cols->data() + col_size * b;
        im2col(x->value.data.data() + static_cast<std::size_t>(b) * g.cin * g.h * g.w, g, col);
        map_t ob(out.data.data() + static_cast<std::size_t>(b) * g.cout * g.col_cols(), g.cout, g.col_cols());
        ob.noalias() = wm * cmap_t(col, g.col_rows(), g.col_cols());
        if (bias) ob.colwise() += cview(bias->value.data, g.cout, 1).col(0);
    }
    std::vector<var> parents{x, w};
    if (bias) parents.push_back(bias);
    return make_result(std::move(out), std::move(parents), [g, cols, col_size](node& self) {
        auto& x = self.parents[0];
        auto& w = self.parents[1];
        const bool has_bias = self.parents.size() > 2 && self.parents[2]->requires_grad;
        buffer dcol(x->requires_grad ? col_size : 0);
        auto wm = cview(w->value.data, g.cout, g.col_rows());
        for (int b = 0; b < g.batch; ++b) {
            cmap_t dy(self.grad.data() + static_cast<std::size_t>(b) * g.cout * g.col_cols(), g.cout, g.col_cols());
            cmap_t col(cols->data() + col_size * b, g.col_rows(), g.col_cols());
            if (w->requires_grad) view(w->ensure_grad(), g.cout, g.col_rows()).noalias() += dy * col.transpose();
            if (has_bias) view(self.parents[2]->ensure_grad(), g.cout, 1) += dy.rowwise().sum();
            if (x->requires_grad) {
                view(dcol, g.col_rows(), g.col_cols()).noalias() = wm.transpose() * dy;
                col2im(dcol.data(), g, x->ensure_grad().data() + static_cast<std::size_t>(b) * g.cin * g.h * g.w);
            }
        }
    });
}

var group_norm(const var& x, const var& gamma, const var& beta, int groups, double eps) {
    require(x->value.rank() == 4, "group_norm: expects [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    require(groups > 0 && C % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma->value.numel() == static_cast<std::size_t>(C) && beta->value.numel() == static_cast<std::size_t>(C),
            "group_norm: affine size");
    const int cpg = C / groups;
    const std::size_t gsize = static_cast<std::size_t>(cpg) * HW;
    tensor out(x->shape());
    buffer xhat(x->value.numel()), inv_std(static_cast<std::size_t>(B) * groups);
    for (int b = 0; b < B; ++b)
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + gi * cpg) * HW;
            double mu = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) mu += x->value[off + i];
            mu /= gsize;
            double var_ = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) var_ += (x->value[off + i] - mu) * (x->value[off + i] - mu);
            var_ /= gsize;
            double is = 1.0 / std::sqrt(var_ + eps);
            inv_std[static_cast<std::size_t>(b) * groups + gi] = is;
            for (std::size_t i = 0; i < gsize; ++i) {
                int c            = gi * cpg + static_cast<int>(i / HW);
                xhat[off + i]    = (x->value[off + i] - mu) * is;
                out[off + i]     = xhat[off + i] * gamma->value[c] + beta->value[c];
            }
        }
    return make_result(
        std::move(out), {x, gamma, beta},
        [B, C, HW, groups, cpg, gsize, xhat = std::move(xhat), inv_std = std::move(inv_std)](node& self) {
            auto& x = self.parents[0];
            auto& g = self.parents[1];
            auto& bt = self.parents[2];
            if (g->requires_grad || bt->requires_grad) {
                auto& gg = g->ensure_grad();
                auto& gb = bt->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
                        for (int i = 0; i < HW; ++i) {
                            gg[c] += self.grad[off + i] * xhat[off + i];
                            gb[c] += self.grad[off + i];
                        }
                    }
            }
            if (!x->requires_grad) return;
            auto& gx = x->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int gi = 0; gi < groups; ++gi) {
                    const std::size_t off = (static_cast<std::size_t>(b) * C + gi * cpg) * HW;
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < gsize; ++i) {
                        double dxh = self.grad[off + i] * g->value[gi * cpg + static_cast<int>(i / HW)];
                        m1 += dxh;
                        m2 += dxh * xhat[off + i];
                    }
                    m1 /= gsize;
                    m2 /= gsize;
                    double is = inv_std[static_cast<std::size_t>(b) * groups + gi];
                    for (std::size_t i = 0; i < gsize; ++i) {
                        double dxh = self.grad[off + i] * g->value[gi * cpg + static_cast<int>(i / HW)];
                        gx[off + i] += is * (dxh - m1 - xhat[off + i] * m2);
                    }
                }
        });
}

var upsample_nearest2x(const var& x) {
    require(x->value.rank() == 4, "upsample: expects [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    tensor out({B, C, 2 * H, 2 * W});
    for (int bc = 0; bc < B * C; ++bc)
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                out[(static_cast<std::size_t>(bc) * 2 * H + y) * 2 * W + xx] =
                    x->value[(static_cast<std::size_t>(bc) * H + y / 2) * W + xx / 2];
    return make_result(std::move(out), {x}, [B, C, H, W](node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (int bc = 0; bc < B * C; ++bc)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    gx[(static_cast<std::size_t>(bc) * H + y / 2) * W + xx / 2] +=
                        self.grad[(static_cast<std::size_t>(bc) * 2 * H + y) * 2 * W + xx];
    });
}

var concat_channels(const var& a, const var& b) {
    require(a->value.rank() == 4 && b->value.rank() == 4 && a->value.dim(0) == b->value.dim(0) &&
                a->value.dim(2) == b->value.dim(2) && a->value.dim(3) == b->value.dim(3),
            "concat_channels: incompatible " + shape_str(a->shape()) + " and " + shape_str(b->shape()));
    const int B = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
    const std::size_t hw = static_cast<std::size_t>(a->value.dim(2)) * a->value.dim(3);
    tensor out({B, ca + cb, a->value.dim(2), a->value.dim(3)});
    for (int bi = 0; bi < B; ++bi) {
        std::copy_n(a->value.data.begin() + bi * ca * hw, ca * hw, out.data.begin() + bi * (ca + cb) * hw);
        std::copy_n(b->value.data.begin() + bi * cb * hw, cb * hw, out.data.begin() + (bi * (ca + cb) + ca) * hw);
    }
    return make_result(std::move(out), {a, b}, [B, ca, cb, hw](node& self) {
        auto& a = self.parents[0];
        auto& b = self.parents[1];
        for (int bi = 0; bi < B; ++bi) {
            if (a->requires_grad) {
                auto& g = a->ensure_grad();
                for (std::size_t i = 0; i < ca * hw; ++i) g[bi * ca * hw + i] += self.grad[bi * (ca + cb) * hw + i];
            }
            if (b->requires_grad) {
                auto& g = b->ensure_grad();
                for (std::size_t i = 0; i < cb * hw; ++i)
                    g[bi * cb * hw + i] += self.grad[(bi * (ca + cb) + ca) * hw + i];
            }
        }
    });
}

var to_tokens(const var& x) {
    require(x->value.rank() == 4, "to_tokens: expects [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1), HW = x->value.dim(2) * x->value.dim(3);
    tensor out({B * HW, C});
    for (int b = 0; b < B; ++b)
        view(out.data, B * HW, C).middleRows(static_cast<Eigen::Index>(b) * HW, HW) =
            cmap_t(x->value.data.data() + static_cast<std::size_t>(b) * C * HW, C, HW).transpose();
    return make_result(std::move(out), {x}, [B, C, HW](node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (int b = 0; b < B; ++b)
            map_t(gx.data() + static_cast<std::size_t>(b) * C * HW, C, HW) +=
                cview(self.grad, B * HW, C).middleRows(static_cast<Eigen::Index>(b) * HW, HW).transpose();
    });
}

var from_tokens(const var& x, int batch, int channels, int height, int width) {
    const int HW = height * width;
    require(x->value.rank() == 2 && x->value.dim(0) == batch * HW && x->value.dim(1) == channels,
            "from_tokens: shape " + shape_str(x->shape()));
    tensor out({batch, channels, height, width});
    for (int b = 0; b < batch; ++b)
        map_t(out.data.data() + static_cast<std::size_t>(b) * channels * HW, channels, HW) =
            cview(x->value.data, batch * HW, channels).middleRows(static_cast<Eigen::Index>(b) * HW, HW).transpose();
    return make_result(std::move(out), {x}, [batch, channels, HW](node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (int b = 0; b < batch; ++b)
            view(gx, batch * HW, channels).middleRows(static_cast<Eigen::Index>(b) * HW, HW) +=
                cmap_t(self.grad.data() + static_cast<std::size_t>(b) * channels * HW, channels, HW).transpose();
    });
}

var add_channel_per_sample(const var& x, const var& e) {
    require(x->value.rank() == 4 && e->value.numel() == static_cast<std::size_t>(x->value.dim(0)) * x->value.dim(1),
            "add_channel_per_sample: shape " + shape_str(x->shape()) + " vs " + shape_str(e->shape()));
    const int BC = x->value.dim(0) * x->value.dim(1);
    const int HW = x->value.dim(2) * x->value.dim(3);
    tensor out = x->value;
    for (int i = 0; i < BC; ++i)
        for (int j = 0; j < HW; ++j) out[static_cast<std::size_t>(i) * HW + j] += e->value[i];
    return make_result(std::move(out), {x, e}, [BC, HW](node& self) {
        auto& x = self.parents[0];
        auto& e = self.parents[1];
        if (x->requires_grad) {
            auto& g = x->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (e->requires_grad) {
            auto& g = e->ensure_grad();
            for (int i = 0; i < BC; ++i)
                for (int j = 0; j < HW; ++j) g[i] += self.grad[static_cast<std::size_t>(i) * HW + j];
        }
    });
}

// --- token bookkeeping -----------------------------------------------------

var add_rows_per_sample(const var& x, const var& e, int batch) {
    require(x->value.rank() == 2 && batch > 0 && x->value.dim(0) % batch == 0 &&
                e->value.numel() == static_cast<std::size_t>(batch) * x->value.dim(1),
            "add_rows_per_sample: shape " + shape_str(x->shape()) + " vs " + shape_str(e->shape()));
    const int L = x->value.dim(0) / batch, D = x->value.dim(1);
    tensor out = x->value;
    for (int b = 0; b < batch; ++b)
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < D; ++j) out[(static_cast<std::size_t>(b) * L + l) * D + j] += e->value[b * D + j];
    return make_result(std::move(out), {x, e}, [batch, L, D](node& self) {
        auto& x = self.parents[0];
        auto& e = self.parents[1];
        if (x->requires_grad) {
            auto& g = x->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (e->requires_grad) {
            auto& g = e->ensure_grad();
            for (int b = 0; b < batch; ++b)
                for (int l = 0; l < L; ++l)
                    for (int j = 0; j < D; ++j) g[b * D + j] += self.grad[(static_cast<std::size_t>(b) * L + l) * D + j];
        }
    });
}

var concat_rows_batched(const var& a, const var& b, int batch) {
    require(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(1) == b->value.dim(1),
            "concat_rows_batched: width mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    require(a->value.dim(0) % batch == 0 && b->value.dim(0) % batch == 0, "concat_rows_batched: batch");
    const int la = a->value.dim(0) / batch, lb = b->value.dim(0) / batch, D = a->value.dim(1);
    tensor out({batch * (la + lb), D});
    for (int bi = 0; bi < batch; ++bi) {
        std::copy_n(a->value.data.begin() + static_cast<std::size_t>(bi) * la * D, static_cast<std::size_t>(la) * D,
                    out.data.begin() + static_cast<std::size_t>(bi) * (la + lb) * D);
        std::copy_n(b->value.data.begin() + static_cast<std::size_t>(bi) * lb * D, static_cast<std::size_t>(lb) * D,
                    out.data.begin() + (static_cast<std::size_t>(bi) * (la + lb) + la) * D);
    }
    return make_result(std::move(out), {a, b}, [batch, la, lb, D](node& self) {
        auto& a = self.parents[0];
        auto& b = self.parents[1];
        for (int bi = 0; bi < batch; ++bi) {
            if (a->requires_grad) {
                auto& g = a->ensure_grad();
                for (std::size_t i = 0; i < static_cast<std::size_t>(la) * D; ++i)
                    g[static_cast<std::size_t>(bi) * la * D + i] += self.grad[static_cast<std::size_t>(bi) * (la + lb) * D + i];
            }
            if (b->requires_grad) {
                auto& g = b->ensure_grad();
                for (std::size_t i = 0; i < static_cast<std::size_t>(lb) * D; ++i)
                    g[static_cast<std::size_t>(bi) * lb * D + i] +=
                        self.grad[(static_cast<std::size_t>(bi) * (la + lb) + la) * D + i];
            }
        }
    });
}

var take_rows_batched(const var& x, int batch, int keep) {
    require(x->value.rank() == 2 && x->value.dim(0) % batch == 0, "take_rows_batched: shape");
    const int L = x->value.dim(0) / batch, D = x->value.dim(1);
    require(keep >= 0 && keep <= L, "take_rows_batched: keep out of range");
    tensor out({batch * keep, D});
    for (int b = 0; b < batch; ++b)
        std::copy_n(x->value.data.begin() + static_cast<std::size_t>(b) * L * D, static_cast<std::size_t>(keep) * D,
                    out.data.begin() + static_cast<std::size_t>(b) * keep * D);
    return make_result(std::move(out), {x}, [batch, L, D, keep](node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < static_cast<std::size_t>(keep) * D; ++i)
                g[static_cast<std::size_t>(b) * L * D + i] += self.grad[static_cast<std::size_t>(b) * keep * D + i];
    });
}

var concat_cols(const std::vector<var>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int rows = parts[0]->value.dim(0);
    std::vector<int> widths;
    int total = 0;
    for (auto& p : parts) {
        require(p->value.rank() == 2 && p->value.dim(0) == rows, "concat_cols: row mismatch");
        widths.push_back(p->value.dim(1));
        total += p->value.dim(1);
    }
    tensor out({rows, total});
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        view(out.data, rows, total).middleCols(off, widths[k]) = cview(parts[k]->value.data, rows, widths[k]);
        off += widths[k];
    }
    return make_result(std::move(out), parts, [rows, total, widths](node& self) {
        int off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (p->requires_grad)
                view(p->ensure_grad(), rows, widths[k]) += cview(self.grad, rows, total).middleCols(off, widths[k]);
            off += widths[k];
        }
    });
}

var select_rows(const var& base, const var& row, std::span<const std::uint8_t> use_row) {
    require(base->value.rank() == 2, "select_rows: base must be rank 2");
    const int R = base->value.dim(0), D = base->value.dim(1);
    require(row->value.numel() == static_cast<std::size_t>(D), "select_rows: row width");
    require(use_row.size() == static_cast<std::size_t>(R), "select_rows: flag count");
    tensor out = base->value;
    std::vector<std::uint8_t> flags(use_row.begin(), use_row.end());
    for (int r = 0; r < R; ++r)
        if (flags[r]) std::copy_n(row->value.data.begin(), D, out.data.begin() + static_cast<std::size_t>(r) * D);
    return make_result(std::move(out), {base, row}, [R, D, flags = std::move(flags)](node& self) {
        auto& base = self.parents[0];
        auto& row  = self.parents[1];
        for (int r = 0; r < R; ++r) {
            const double* g = self.grad.data() + static_cast<std::size_t>(r) * D;
            if (flags[r]) {
                if (row->requires_grad) {
                    auto& gr = row->ensure_grad();
                    for (int j = 0; j < D; ++j) gr[j] += g[j];
                }
            } else if (base->requires_grad) {
                auto& gb = base->ensure_grad();
                for (int j = 0; j < D; ++j) gb[static_cast<std::size_t>(r) * D + j] += g[j];
            }
        }
    });
}

var reshape(const var& x, shape_t shape) {
    require(numel_of(shape) == x->value.numel(), "reshape: " + shape_str(x->shape()) + " -> " + shape_str(shape));
    tensor out(std::move(shape), x->value.data);
    return make_result(std::move(out), {x}, [](node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// --- reductions ------------------------------------------------------------

var sum(const var& x) {
    double s = std::accumulate(x->value.data.begin(), x->value.data.end(), 0.0);
    return make_result(tensor::scalar(s), {x}, [](node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

var mean(const var& x) { return scale(sum(x), 1.0 / static_cast<double>(x->value.numel())); }

var weighted_mse(const var& pred, const tensor& target, std::span<const double> weights) {
    require(pred->shape() == target.shape, "weighted_mse: shape mismatch " + shape_str(pred->shape()) + " vs " +
                                               shape_str(target.shape));
    require(weights.empty() || weights.size() == target.numel(), "weighted_mse: weight count");
    buffer w(target.numel(), 1.0);
    if (!weights.empty()) w.assign(weights.begin(), weights.end());
    double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    require(wsum > 0.0, "weighted_mse: zero total weight");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        double d = pred->value[i] - target[i];
        acc += w[i] * d * d;
    }
    return make_result(tensor::scalar(acc / wsum), {pred}, [target, w = std::move(w), wsum](node& self) {
        auto& p = self.parents[0];
        auto& g = p->ensure_grad();
        const double s = 2.0 * self.grad[0] / wsum;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * w[i] * (p->value[i] - target[i]);
    });
}

}  // namespace scenebooth::ag
