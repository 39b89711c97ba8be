#include "genplugin/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace genplugin::nn {

Var ParameterStore::create(const std::string& name, Matrix init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Var v = ag::leaf(std::move(init), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
}

Var ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
}

std::vector<Var> ParameterStore::with_prefix(const std::string& prefix) const {
    std::vector<Var> out;
    for (const auto& [name, v] : entries_)
        if (name.rfind(prefix, 0) == 0) out.push_back(v);
    return out;
}

void ParameterStore::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& v : with_prefix(prefix)) v->requires_grad = trainable;
}

std::vector<Var> ParameterStore::trainable() const {
    std::vector<Var> out;
    for (const auto& [name, v] : entries_)
        if (v->requires_grad) out.push_back(v);
    return out;
}

void ParameterStore::zero_grad() {
    for (auto& [name, v] : entries_) v->grad = Matrix();
}

std::uint64_t ParameterStore::checksum(const std::string& prefix) const {
    std::uint64_t h = fnv1a("params");
    for (const auto& [name, v] : entries_) {
        if (name.rfind(prefix, 0) != 0) continue;
        h = fnv1a(name, h);
        h = fnv1a_bytes(v->value.data(), v->value.size() * sizeof(double), h);
    }
    return h;
}

std::size_t ParameterStore::count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, v] : entries_)
        if (name.rfind(prefix, 0) == 0) n += v->value.size();
    return n;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
    for (auto& [name, v] : entries_) {
        if (!other.contains(name)) continue;
        const Var src = other.get(name);
        if (!src->value.same_shape(v->value)) throw std::invalid_argument("shape mismatch copying " + name);
        v->value = src->value;
    }
}

Matrix xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix m(fan_in, fan_out);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (2.0 * rng.uniform() - 1.0) * limit;
    return m;
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal(0.0, stddev);
    return m;
}

NoGrad::NoGrad() : previous_(ag::grad_enabled()) { ag::set_grad_enabled(false); }
NoGrad::~NoGrad() { ag::set_grad_enabled(previous_); }
bool grad_enabled() { return ag::grad_enabled(); }

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : weight(store.create(name + ".weight", xavier(in, out, rng))), bias(store.create(name + ".bias", Matrix(1, out))) {}

Var Linear::operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim)
    : gamma(store.create(name + ".gamma", Matrix(1, dim, 1.0))), beta(store.create(name + ".beta", Matrix(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }

FeedForward::FeedForward(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                         Rng& rng)
    : up(store, name + ".up", dim, hidden, rng), down(store, name + ".down", hidden, dim, rng) {}

Var FeedForward::operator()(const Var& x) const { return down(ag::gelu(up(x))); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t dim,
                                       std::size_t h, Rng& rng)
    : q(store, name + ".q", dim, dim, rng),
      k(store, name + ".k", dim, dim, rng),
      v(store, name + ".v", dim, dim, rng),
      o(store, name + ".o", dim, dim, rng),
      heads(h) {
    if (h == 0 || dim % h != 0) throw std::invalid_argument("attention width must be divisible by heads");
}

Var MultiHeadAttention::operator()(const Var& query, const Var& keys, const Var& values,
                                   const ag::AttentionMask& mask) const {
    return o(ag::attention(q(query), keys, values, heads, mask));
}

Var EncoderLayer::operator()(const Var& x, const ag::AttentionMask& mask) const {
    const Var h = ln1(x);
    Var y = ag::add(x, attn(h, attn.k(h), attn.v(h), mask));
    return ag::add(y, ffn(ln2(y)));
}

TransformerEncoder::TransformerEncoder(ParameterStore& store, const std::string& name, const TransformerDims& dims,
                                       Rng& rng)
    : dims_(dims) {
    for (std::size_t l = 0; l < dims.layers; ++l) {
        const std::string p = name + ".layer" + std::to_string(l);
        EncoderLayer layer;
        layer.ln1 = LayerNorm(store, p + ".ln1", dims.d_model);
        layer.attn = MultiHeadAttention(store, p + ".attn", dims.d_model, dims.heads, rng);
        layer.ln2 = LayerNorm(store, p + ".ln2", dims.d_model);
        layer.ffn = FeedForward(store, p + ".ffn", dims.d_model, dims.ffn, rng);
        layers_.push_back(std::move(layer));
    }
    final_ = LayerNorm(store, name + ".final_ln", dims.d_model);
}

Var TransformerEncoder::operator()(const Var& x, const std::vector<std::uint8_t>& key_valid, bool causal) const {
    if (x->value.cols() != dims_.d_model) throw std::invalid_argument("encoder input width mismatch");
    ag::AttentionMask mask{causal, key_valid};
    Var h = x;
    for (const auto& layer : layers_) h = layer(h, mask);
    return final_(h);
}

TransformerDecoder::TransformerDecoder(ParameterStore& store, const std::string& name, const TransformerDims& dims,
                                       Rng& rng)
    : dims_(dims) {
    for (std::size_t l = 0; l < dims.layers; ++l) {
        const std::string p = name + ".layer" + std::to_string(l);
        DecoderLayer layer;
        layer.ln1 = LayerNorm(store, p + ".ln1", dims.d_model);
        layer.self_attn = MultiHeadAttention(store, p + ".self_attn", dims.d_model, dims.heads, rng);
        layer.ln2 = LayerNorm(store, p + ".ln2", dims.d_model);
        layer.cross_attn = MultiHeadAttention(store, p + ".cross_attn", dims.d_model, dims.heads, rng);
        layer.ln3 = LayerNorm(store, p + ".ln3", dims.d_model);
        layer.ffn = FeedForward(store, p + ".ffn", dims.d_model, dims.ffn, rng);
        layers_.push_back(std::move(layer));
    }
    final_ = LayerNorm(store, name + ".final_ln", dims.d_model);
}

ProjectedMemory TransformerDecoder::project_memory(const Var& memory, std::vector<std::uint8_t> key_valid) const {
    if (memory->value.cols() != dims_.d_model) throw std::invalid_argument("decoder memory width mismatch");
    ProjectedMemory pm;
    for (const auto& layer : layers_) {
        pm.keys.push_back(layer.cross_attn.k(memory));
        pm.values.push_back(layer.cross_attn.v(memory));
    }
    pm.key_valid = std::move(key_valid);
    return pm;
}

Var TransformerDecoder::operator()(const Var& x, const ProjectedMemory& memory) const {
    if (x->value.cols() != dims_.d_model) throw std::invalid_argument("decoder input width mismatch");
    if (memory.keys.size() != layers_.size()) throw std::invalid_argument("memory projected for another decoder");
    const ag::AttentionMask causal{true, {}};
    const ag::AttentionMask cross{false, memory.key_valid};
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        const Var a = layer.ln1(h);
        h = ag::add(h, layer.self_attn(a, layer.self_attn.k(a), layer.self_attn.v(a), causal));
        h = ag::add(h, layer.cross_attn(layer.ln2(h), memory.keys[l], memory.values[l], cross));
        h = ag::add(h, layer.ffn(layer.ln3(h)));
    }
    return final_(h);
}

}  // namespace genplugin::nn
