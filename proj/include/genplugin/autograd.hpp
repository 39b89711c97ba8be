#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A graph is built implicitly by calling the op functions below on `Var`s.
// Nodes whose inputs do not require gradients record no backward closure, so
// frozen sub-networks cost only their forward pass.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "genplugin/kernels.hpp"
#include "genplugin/matrix.hpp"

namespace genplugin::ag {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Matrix& grad_buffer() {
        if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

/// Thread-local switch; when off, ops record no backward closures.
bool grad_enabled();
void set_grad_enabled(bool enabled);

Var constant(Matrix value);
Var leaf(Matrix value, bool requires_grad = true);

/// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
void backward(const Var& loss);

/// Scalar value of a 1×1 node.
double item(const Var& v);

// Linear algebra
Var matmul(const Var& a, const Var& b, kernels::Trans ta = kernels::Trans::No,
           kernels::Trans tb = kernels::Trans::No);
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast a 1×n row over every row of a
Var gelu(const Var& a);
Var exp(const Var& a);

// Shape
Var gather_rows(const Var& table, std::span<const std::size_t> index);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
/// out[r] = a[r, index[r]], as an n×1 column.
Var pick(const Var& a, std::span<const std::size_t> index);

// Normalisation / probability
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var log_softmax_rows(const Var& a);

struct AttentionMask {
    bool causal = false;
    /// Empty means every key is valid.
    std::vector<std::uint8_t> key_valid;
};

/// Multi-head scaled dot-product attention. q: n×d, k/v: m×d, d divisible by heads.
/// Query rows with no admissible key produce zeros.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const AttentionMask& mask);

/// Mean token-level cross-entropy of row-wise logits against integer targets.
Var cross_entropy(const Var& logits, std::span<const std::size_t> targets);

}  // namespace genplugin::ag
