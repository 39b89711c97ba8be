#pragma once

// Parameter registry and Transformer building blocks (pre-LN).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "genplugin/autograd.hpp"
#include "genplugin/rng.hpp"

namespace genplugin::nn {

using ag::Var;

/// Named, ordered collection of trainable leaves. Modules keep handles to the
/// leaves they create; the store is what the optimizer, freezing and
/// checkpointing operate on.
class ParameterStore {
public:
    Var create(const std::string& name, Matrix init);

    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    /// Parameters whose names start with `prefix`.
    std::vector<Var> with_prefix(const std::string& prefix) const;
    void set_trainable(const std::string& prefix, bool trainable);
    std::vector<Var> trainable() const;

    void zero_grad();
    /// FNV-1a over the raw bytes of every parameter under `prefix` (names included).
    std::uint64_t checksum(const std::string& prefix = "") const;
    std::size_t count(const std::string& prefix = "") const;

    /// Copies values from `other` for every name present in both stores.
    void copy_values_from(const ParameterStore& other);

private:
    std::vector<std::pair<std::string, Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Initialisers.
Matrix xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

/// Disables graph recording on this thread while alive.
class NoGrad {
public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

struct Linear {
    Var weight;  // in × out
    Var bias;    // 1 × out
    Linear() = default;
    Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
    Var operator()(const Var& x) const;
};

struct LayerNorm {
    Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim);
    Var operator()(const Var& x) const;
};

struct FeedForward {
    Linear up, down;
    FeedForward() = default;
    FeedForward(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);
    Var operator()(const Var& x) const;
};

struct TransformerDims {
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t ffn = 64;
    std::size_t layers = 2;
};

/// Keys/values of a fixed memory, projected once per decoder layer.
struct ProjectedMemory {
    std::vector<Var> keys, values;
    std::vector<std::uint8_t> key_valid;
};

struct MultiHeadAttention {
    Linear q, k, v, o;
    std::size_t heads = 1;
    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng);
    Var operator()(const Var& query, const Var& keys, const Var& values, const ag::AttentionMask& mask) const;
};

struct EncoderLayer {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    FeedForward ffn;
    Var operator()(const Var& x, const ag::AttentionMask& mask) const;
};

/// Stack of pre-LN self-attention layers with a final LayerNorm.
class TransformerEncoder {
public:
    TransformerEncoder() = default;
    TransformerEncoder(ParameterStore& store, const std::string& name, const TransformerDims& dims, Rng& rng);
    /// `key_valid` marks real (non-pad) positions; empty means all real.
    Var operator()(const Var& x, const std::vector<std::uint8_t>& key_valid, bool causal = false) const;
    const TransformerDims& dims() const { return dims_; }

private:
    TransformerDims dims_;
    std::vector<EncoderLayer> layers_;
    LayerNorm final_;
};

struct DecoderLayer {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
};

class TransformerDecoder {
public:
    TransformerDecoder() = default;
    TransformerDecoder(ParameterStore& store, const std::string& name, const TransformerDims& dims, Rng& rng);

    ProjectedMemory project_memory(const Var& memory, std::vector<std::uint8_t> key_valid = {}) const;
    /// Causal self-attention over `x` (one row per target position) plus
    /// cross-attention over the projected memory.
    Var operator()(const Var& x, const ProjectedMemory& memory) const;
    const TransformerDims& dims() const { return dims_; }

private:
    TransformerDims dims_;
    std::vector<DecoderLayer> layers_;
    LayerNorm final_;
};

}  // namespace genplugin::nn
