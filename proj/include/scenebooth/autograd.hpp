#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// A graph is built eagerly: every op returns a new node holding its value and,
// when any input requires a gradient, a closure that scatters the output
// gradient back into the inputs. Nodes that do not depend on a trainable leaf
// carry no closure, so inference builds no graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace scenebooth::ag {

using shape_t = std::vector<int>;

std::size_t numel_of(const shape_t& shape);
std::string shape_str(const shape_t& shape);

// Storage with a fixed 64-byte base alignment, so vectorised reductions split
// their work the same way wherever the allocator places a buffer.
template <class T>
struct aligned_allocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    aligned_allocator() = default;
    template <class U>
    aligned_allocator(const aligned_allocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const aligned_allocator<U>&) const { return true; }
};

using buffer = std::vector<double, aligned_allocator<double>>;

struct tensor {
    shape_t shape;
    buffer data;

    tensor() = default;
    explicit tensor(shape_t s, double fill = 0.0);
    tensor(shape_t s, const std::vector<double>& d);
    tensor(shape_t s, buffer d);

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    static tensor scalar(double v) { return tensor({1}, std::vector<double>{v}); }
};

struct node {
    tensor value;
    buffer grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<node>> parents;
    std::function<void(node&)> backward_fn;

    buffer& ensure_grad();
    const shape_t& shape() const { return value.shape; }
};

using var = std::shared_ptr<node>;

var constant(tensor t);
var leaf(tensor t, bool requires_grad);

// While alive, ops on this thread record no backward graph (inference).
class no_grad_guard {
public:
    no_grad_guard();
    ~no_grad_guard();
    no_grad_guard(const no_grad_guard&)            = delete;
    no_grad_guard& operator=(const no_grad_guard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Reverse sweep from a single-element root. Gradients accumulate into every
// node reachable from `root` that requires a gradient.
void backward(const var& root);

// --- elementwise -----------------------------------------------------------
var add(const var& a, const var& b);
var sub(const var& a, const var& b);
var mul(const var& a, const var& b);
var scale(const var& a, double s);
// x * s where s is a single-element node.
var mul_scalar(const var& x, const var& s);
var tanh(const var& x);
var silu(const var& x);
var gelu(const var& x);

// --- dense algebra ---------------------------------------------------------
// a [m,k] x b [k,n]
var matmul(const var& a, const var& b);
// x [r,in] · w[out,in]^T + bias[out]; bias may be null.
var linear(const var& x, const var& w, const var& bias);
var layer_norm(const var& x, const var& gamma, const var& beta, double eps = 1e-5);

// Multi-head scaled dot-product attention on row-major token matrices.
// q: [batch*lq, d], k/v: [batch*lk, d]. key_valid (size batch*lk) masks keys;
// empty means all keys are valid.
var attention(const var& q, const var& k, const var& v, int batch, int heads,
              std::span<const std::uint8_t> key_valid = {});

// --- image tensors [B,C,H,W] ----------------------------------------------
var conv2d(const var& x, const var& w, const var& bias, int stride, int pad);
var group_norm(const var& x, const var& gamma, const var& beta, int groups, double eps = 1e-5);
var upsample_nearest2x(const var& x);
var concat_channels(const var& a, const var& b);
var to_tokens(const var& x);  // [B,C,H,W] -> [B*H*W, C]
var from_tokens(const var& x, int batch, int channels, int height, int width);
// x[b,c,:,:] += e[b,c]
var add_channel_per_sample(const var& x, const var& e);

// --- token bookkeeping -----------------------------------------------------
// x[b*l + i, :] += e[b, :] for x of shape [batch*l, d].
var add_rows_per_sample(const var& x, const var& e, int batch);
// Per-sample row concatenation: [B*la, d] ++ [B*lb, d] -> [B*(la+lb), d].
var concat_rows_batched(const var& a, const var& b, int batch);
// First `keep` rows of every sample group of a [B*l, d] matrix.
var take_rows_batched(const var& x, int batch, int keep);
var concat_cols(const std::vector<var>& parts);
// out[r] = use_row[r] ? row : base[r]; row has `d` elements.
var select_rows(const var& base, const var& row, std::span<const std::uint8_t> use_row);
var reshape(const var& x, shape_t shape);

// --- reductions ------------------------------------------------------------
var sum(const var& x);
var mean(const var& x);
// sum(w * (pred - target)^2) / sum(w); w empty means uniform weights.
var weighted_mse(const var& pred, const tensor& target, std::span<const double> weights = {});

}  // namespace scenebooth::ag
