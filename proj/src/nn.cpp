#include "scenebooth/nn.hpp"

#include <cmath>
#include <cstring>

#include "scenebooth/errors.hpp"

namespace scenebooth::nn {

ag::var parameter_store::create(const std::string& name, ag::tensor init, bool trainable) {
    if (find(name)) throw input_error("duplicate parameter name: " + name);
    auto v = ag::leaf(std::move(init), trainable);
    entries_.push_back({name, v, trainable});
    return v;
}

std::vector<ag::var> parameter_store::trainable() const {
    std::vector<ag::var> out;
    for (auto& e : entries_)
        if (e.trainable) out.push_back(e.value);
    return out;
}

const param_entry* parameter_store::find(const std::string& name) const {
    for (auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

std::uint64_t parameter_store::checksum(bool trainable_part) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix        = [&h](const void* p, std::size_t n) {
        auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (auto& e : entries_) {
        if (e.trainable != trainable_part) continue;
        mix(e.name.data(), e.name.size());
        mix(e.value->value.data.data(), e.value->value.data.size() * sizeof(double));
    }
    return h;
}

std::size_t parameter_store::count(bool trainable_part) const {
    std::size_t n = 0;
    for (auto& e : entries_)
        if (e.trainable == trainable_part) n += e.value->value.numel();
    return n;
}

void parameter_store::zero_grad() {
    for (auto& e : entries_) e.value->grad.clear();
}

void parameter_store::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& e : entries_) {
        if (e.name.compare(0, prefix.size(), prefix) != 0) continue;
        e.trainable             = trainable;
        e.value->requires_grad = trainable;
        e.value->grad.clear();
    }
}

void parameter_store::copy_values(const std::string& from_prefix, const std::string& to_prefix) {
    for (auto& e : entries_) {
        if (e.name.compare(0, to_prefix.size(), to_prefix) != 0) continue;
        const auto* src = find(from_prefix + e.name.substr(to_prefix.size()));
        if (!src) throw input_error("copy_values: no source for " + e.name);
        if (src->value->value.shape != e.value->value.shape) throw shape_error("copy_values: shape mismatch at " + e.name);
        e.value->value.data = src->value->value.data;
    }
}

ag::tensor uniform_init(ag::shape_t shape, double bound, rng_t& rng) {
    ag::tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

ag::tensor normal_init(ag::shape_t shape, double stddev, rng_t& rng) {
    ag::tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

linear_layer linear_layer::make(parameter_store& store, const std::string& name, int in, int out, rng_t& rng,
                                bool trainable, bool zero_init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    linear_layer l;
    l.weight = store.create(name + ".weight", zero_init ? ag::tensor({out, in}) : uniform_init({out, in}, bound, rng),
                            trainable);
    l.bias   = store.create(name + ".bias", zero_init ? ag::tensor({out}) : uniform_init({out}, bound, rng), trainable);
    return l;
}

layer_norm_layer layer_norm_layer::make(parameter_store& store, const std::string& name, int dim, bool trainable) {
    return {store.create(name + ".gamma", ag::tensor({dim}, 1.0), trainable),
            store.create(name + ".beta", ag::tensor({dim}, 0.0), trainable)};
}

group_norm_layer group_norm_layer::make(parameter_store& store, const std::string& name, int channels, int groups,
                                        bool trainable) {
    return {store.create(name + ".gamma", ag::tensor({channels}, 1.0), trainable),
            store.create(name + ".beta", ag::tensor({channels}, 0.0), trainable), groups};
}

conv_layer conv_layer::make(parameter_store& store, const std::string& name, int in, int out, int kernel, int stride,
                            rng_t& rng, bool trainable, bool zero_init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    conv_layer c;
    c.weight = store.create(name + ".weight",
                            zero_init ? ag::tensor({out, in, kernel, kernel})
                                      : uniform_init({out, in, kernel, kernel}, bound, rng),
                            trainable);
    c.bias   = store.create(name + ".bias", zero_init ? ag::tensor({out}) : uniform_init({out}, bound, rng), trainable);
    c.stride = stride;
    c.pad    = kernel / 2;
    return c;
}

attention_layer attention_layer::make(parameter_store& store, const std::string& name, int dim, int context_dim,
                                      int heads, rng_t& rng, bool trainable) {
    attention_layer a;
    a.q     = linear_layer::make(store, name + ".q", dim, dim, rng, trainable);
    a.k     = linear_layer::make(store, name + ".k", context_dim, dim, rng, trainable);
    a.v     = linear_layer::make(store, name + ".v", context_dim, dim, rng, trainable);
    a.out   = linear_layer::make(store, name + ".out", dim, dim, rng, trainable);
    a.heads = heads;
    return a;
}

ag::var attention_layer::operator()(const ag::var& x, const ag::var& context, int batch,
                                    std::span<const std::uint8_t> key_valid) const {
    return out(ag::attention(q(x), k(context), v(context), batch, heads, key_valid));
}

feed_forward_layer feed_forward_layer::make(parameter_store& store, const std::string& name, int dim, int hidden,
                                            rng_t& rng, bool trainable) {
    return {linear_layer::make(store, name + ".up", dim, hidden, rng, trainable),
            linear_layer::make(store, name + ".down", hidden, dim, rng, trainable)};
}

ag::tensor timestep_embedding(std::span<const int> t, int dim) {
    ag::tensor out({static_cast<int>(t.size()), dim});
    const int half = dim / 2;
    for (std::size_t i = 0; i < t.size(); ++i)
        for (int j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(10000.0) * j / std::max(1, half));
            out[i * dim + j]        = std::sin(t[i] * freq);
            out[i * dim + half + j] = std::cos(t[i] * freq);
        }
    return out;
}

adam::adam(std::vector<ag::var> params, adam_config cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
    }
}

double adam::step() {
    double sq = 0.0;
    for (auto& p : params_)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw training_error("non-finite gradient norm");
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (p->grad.empty()) continue;
        auto& m = m_[k].data;
        auto& v = v_[k].data;
        for (std::size_t i = 0; i < p->grad.size(); ++i) {
            double g = p->grad[i] * clip;
            m[i]     = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i]     = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            p->value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
        p->grad.clear();
    }
    return norm;
}

}  // namespace scenebooth::nn
