#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scenebooth/autograd.hpp"

namespace scenebooth::nn {

using rng_t = std::mt19937_64;

struct param_entry {
    std::string name;
    ag::var value;
    bool trainable = true;
};

// Named parameter registry. Frozen entries are leaves with requires_grad = false,
// so no gradient ever reaches them.
class parameter_store {
public:
    ag::var create(const std::string& name, ag::tensor init, bool trainable);

    const std::vector<param_entry>& entries() const { return entries_; }
    std::vector<ag::var> trainable() const;
    const param_entry* find(const std::string& name) const;

    // FNV-1a over names and raw values of the selected partition.
    std::uint64_t checksum(bool trainable_part) const;
    std::size_t count(bool trainable_part) const;
    void zero_grad();

    // Flips the partition of every parameter whose name starts with `prefix`.
    void set_trainable(const std::string& prefix, bool trainable);
    // Copies values of `from_prefix*` into the matching `to_prefix*` parameters.
    void copy_values(const std::string& from_prefix, const std::string& to_prefix);

private:
    std::vector<param_entry> entries_;
};

ag::tensor uniform_init(ag::shape_t shape, double bound, rng_t& rng);
ag::tensor normal_init(ag::shape_t shape, double stddev, rng_t& rng);

struct linear_layer {
    ag::var weight;  // [out, in]
    ag::var bias;    // [out]

    static linear_layer make(parameter_store& store, const std::string& name, int in, int out, rng_t& rng,
                             bool trainable, bool zero_init = false);
    ag::var operator()(const ag::var& x) const { return ag::linear(x, weight, bias); }
};

struct layer_norm_layer {
    ag::var gamma, beta;

    static layer_norm_layer make(parameter_store& store, const std::string& name, int dim, bool trainable);
    ag::var operator()(const ag::var& x) const { return ag::layer_norm(x, gamma, beta); }
};

struct group_norm_layer {
    ag::var gamma, beta;
    int groups = 1;

    static group_norm_layer make(parameter_store& store, const std::string& name, int channels, int groups,
                                 bool trainable);
    ag::var operator()(const ag::var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

struct conv_layer {
    ag::var weight;  // [out, in, k, k]
    ag::var bias;
    int stride = 1;
    int pad    = 0;

    static conv_layer make(parameter_store& store, const std::string& name, int in, int out, int kernel, int stride,
                           rng_t& rng, bool trainable, bool zero_init = false);
    ag::var operator()(const ag::var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

struct attention_layer {
    linear_layer q, k, v, out;
    int heads = 1;

    static attention_layer make(parameter_store& store, const std::string& name, int dim, int context_dim, int heads,
                                rng_t& rng, bool trainable);
    // x: [batch*lq, dim]; context: [batch*lk, context_dim].
    ag::var operator()(const ag::var& x, const ag::var& context, int batch,
                       std::span<const std::uint8_t> key_valid = {}) const;
};

struct feed_forward_layer {
    linear_layer up, down;

    static feed_forward_layer make(parameter_store& store, const std::string& name, int dim, int hidden, rng_t& rng,
                                   bool trainable);
    ag::var operator()(const ag::var& x) const { return down(ag::gelu(up(x))); }
};

// Sinusoidal embedding of integer timesteps, [t.size(), dim].
ag::tensor timestep_embedding(std::span<const int> t, int dim);

struct adam_config {
    double lr    = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps   = 1e-8;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

class adam {
public:
    adam() = default;
    adam(std::vector<ag::var> params, adam_config cfg);

    // Returns the pre-clip global gradient norm.
    double step();
    long steps_taken() const { return t_; }
    bool empty() const { return params_.empty(); }

    // Moment buffers, in parameter order, for checkpointing.
    std::vector<ag::tensor>& first_moments() { return m_; }
    std::vector<ag::tensor>& second_moments() { return v_; }
    const std::vector<ag::tensor>& first_moments() const { return m_; }
    const std::vector<ag::tensor>& second_moments() const { return v_; }
    void set_steps_taken(long t) { t_ = t; }
    const adam_config& config() const { return cfg_; }

private:
    std::vector<ag::var> params_;
    std::vector<ag::tensor> m_, v_;
    adam_config cfg_;
    long t_ = 0;
};

}  // namespace scenebooth::nn
