#include "genplugin/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace genplugin::ag {
namespace {

using kernels::Trans;

thread_local bool t_grad_enabled = true;

Var make(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    const bool req = t_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
    if (req) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

void require_same(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                                    b->value.shape_str());
    }
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }
void set_grad_enabled(bool enabled) { t_grad_enabled = enabled; }

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var leaf(Matrix value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

double item(const Var& v) {
    if (v->value.size() != 1) throw std::invalid_argument("item: node is " + v->value.shape_str());
    return v->value[0];
}

void backward(const Var& loss) {
    if (loss->value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && p->backward_fn && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.same_shape(n->value)) n->backward_fn(*n);
    }
}

Var matmul(const Var& a, const Var& b, Trans ta, Trans tb) {
    Matrix out = kernels::matmul(a->value, b->value, ta, tb);
    return make(std::move(out), {a, b}, [a, b, ta, tb](Node& n) {
        const Matrix& g = n.grad;
        if (a->requires_grad) {
            // C = op(A) op(B)
            if (ta == Trans::No) {
                kernels::gemm(g, Trans::No, b->value, tb == Trans::No ? Trans::Yes : Trans::No, a->grad_buffer(), true);
            } else {
                // op(A) = Aᵀ → dA = op(B) · gᵀ
                kernels::gemm(b->value, tb, g, Trans::Yes, a->grad_buffer(), true);
            }
        }
        if (b->requires_grad) {
            if (tb == Trans::No) {
                kernels::gemm(a->value, ta == Trans::No ? Trans::Yes : Trans::No, g, Trans::No, b->grad_buffer(), true);
            } else {
                // op(B) = Bᵀ → dB = gᵀ · op(A)
                kernels::gemm(g, Trans::Yes, a->value, ta, b->grad_buffer(), true);
            }
        }
    });
}

Var transpose(const Var& a) {
    const Matrix& x = a->value;
    Matrix out(x.cols(), x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
    return make(std::move(out), {a}, [a](Node& n) {
        Matrix& ga = a->grad_buffer();
        for (std::size_t r = 0; r < ga.rows(); ++r)
            for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += n.grad(c, r);
    });
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    Matrix out = a->value;
    out += b->value;
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->grad_buffer() += n.grad;
        if (b->requires_grad) b->grad_buffer() += n.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    Matrix out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->grad_buffer() += n.grad;
        if (b->requires_grad) {
            Matrix& gb = b->grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    Matrix out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Matrix& g = a->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Matrix& g = b->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Matrix out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make(std::move(out), {a}, [a, s](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row->value.rows() != 1 || row->value.cols() != a->value.cols()) {
        throw std::invalid_argument("add_row: row " + row->value.shape_str() + " vs " + a->value.shape_str());
    }
    Matrix out = a->value;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += row->value[c];
    return make(std::move(out), {a, row}, [a, row](Node& n) {
        if (a->requires_grad) a->grad_buffer() += n.grad;
        if (row->requires_grad) {
            Matrix& g = row->grad_buffer();
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
                for (std::size_t c = 0; c < n.grad.cols(); ++c) g[c] += n.grad(r, c);
        }
    });
}

Var gelu(const Var& a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Matrix out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    return make(std::move(out), {a}, [a](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = a->value[i];
            const double t = std::tanh(kC * (x + kA * x * x * x));
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
            g[i] += n.grad[i] * d;
        }
    });
}

Var exp(const Var& a) {
    Matrix out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    return make(std::move(out), {a}, [a](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value[i];
    });
}

Var gather_rows(const Var& table, std::span<const std::size_t> index) {
    const Matrix& t = table->value;
    Matrix out(index.size(), t.cols());
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= t.rows()) {
            throw std::out_of_range("gather_rows: index " + std::to_string(index[r]) + " >= " +
                                    std::to_string(t.rows()));
        }
        std::copy_n(t.data() + index[r] * t.cols(), t.cols(), out.data() + r * t.cols());
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make(std::move(out), {table}, [table, idx = std::move(idx)](Node& n) {
        Matrix& g = table->grad_buffer();
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < c; ++j) g(idx[r], j) += n.grad(r, j);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t cols = parts.front()->value.cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p->value.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p->value.rows();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.size(), out.data() + off * cols);
        off += p->value.rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make(std::move(out), ps, [ps](Node& n) {
        std::size_t o = 0;
        for (const auto& p : ps) {
            if (p->requires_grad) {
                Matrix& g = p->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[o * n.grad.cols() + i];
            }
            o += p->value.rows();
        }
    });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
    const Matrix& x = a->value;
    if (begin + count > x.rows()) throw std::out_of_range("slice_rows: range exceeds " + x.shape_str());
    Matrix out(count, x.cols());
    std::copy_n(x.data() + begin * x.cols(), count * x.cols(), out.data());
    return make(std::move(out), {a}, [a, begin](Node& n) {
        Matrix& g = a->grad_buffer();
        const std::size_t off = begin * g.cols();
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[off + i] += n.grad[i];
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    const Matrix& x = a->value;
    if (begin + count > x.cols()) throw std::out_of_range("slice_cols: range exceeds " + x.shape_str());
    Matrix out(x.rows(), count);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, begin + c);
    return make(std::move(out), {a}, [a, begin, count](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < count; ++c) g(r, begin + c) += n.grad(r, c);
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a->value.values()) s += v;
    return make(Matrix(1, 1, s), {a}, [a](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

Var mean(const Var& a) {
    if (a->value.empty()) throw std::invalid_argument("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

Var pick(const Var& a, std::span<const std::size_t> index) {
    const Matrix& x = a->value;
    if (index.size() != x.rows()) throw std::invalid_argument("pick: one index per row required");
    Matrix out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (index[r] >= x.cols()) throw std::out_of_range("pick: index out of range");
        out(r, 0) = x(r, index[r]);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make(std::move(out), {a}, [a, idx = std::move(idx)](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) g(r, idx[r]) += n.grad(r, 0);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Matrix& in = x->value;
    const std::size_t rows = in.rows(), cols = in.cols();
    if (gamma->value.size() != cols || beta->value.size() != cols) {
        throw std::invalid_argument("layer_norm: affine size mismatch");
    }
    Matrix out(rows, cols);
    auto xhat = std::make_shared<Matrix>(rows, cols);
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += in(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in(r, c) - mu) * (in(r, c) - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (in(r, c) - mu) * is;
            (*xhat)(r, c) = h;
            out(r, c) = gamma->value[c] * h + beta->value[c];
        }
    }
    return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Node& n) {
        const std::size_t rows = n.grad.rows(), cols = n.grad.cols();
        if (gamma->requires_grad || beta->requires_grad) {
            Matrix& gg = gamma->grad_buffer();
            Matrix& gb = beta->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    gg[c] += n.grad(r, c) * (*xhat)(r, c);
                    gb[c] += n.grad(r, c);
                }
        }
        if (x->requires_grad) {
            Matrix& gx = x->grad_buffer();
            const double inv_n = 1.0 / static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = n.grad(r, c) * gamma->value[c];
                    m1 += dh;
                    m2 += dh * (*xhat)(r, c);
                }
                m1 *= inv_n;
                m2 *= inv_n;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = n.grad(r, c) * gamma->value[c];
                    gx(r, c) += (*inv_std)[r] * (dh - m1 - (*xhat)(r, c) * m2);
                }
            }
        }
    });
}

Var log_softmax_rows(const Var& a) {
    const Matrix& x = a->value;
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) s += std::exp(x(r, c) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - lse;
    }
    return make(std::move(out), {a}, [a](Node& n) {
        Matrix& g = a->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < g.cols(); ++c) gs += n.grad(r, c);
            for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(r, c) - std::exp(n.value(r, c)) * gs;
        }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, const AttentionMask& mask) {
    const std::size_t n = q->value.rows(), m = k->value.rows(), d = q->value.cols();
    if (k->value.cols() != d || v->value.cols() != d || v->value.rows() != m) {
        throw std::invalid_argument("attention: q/k/v shape mismatch");
    }
    if (heads == 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
    if (!mask.key_valid.empty() && mask.key_valid.size() != m) {
        throw std::invalid_argument("attention: key mask length mismatch");
    }
    if (mask.causal && n > m) throw std::invalid_argument("attention: causal mask needs n <= m");
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs[h] is n×m; masked entries are exactly zero.
    auto probs = std::make_shared<std::vector<Matrix>>(heads, Matrix(n, m));
    Matrix out(n, d);
    const Matrix &Q = q->value, &K = k->value, &V = v->value;
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix& P = (*probs)[h];
        const std::size_t o = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < m; ++j) {
                const bool ok = (mask.key_valid.empty() || mask.key_valid[j]) && (!mask.causal || j <= i);
                if (!ok) continue;
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += Q(i, o + t) * K(j, o + t);
                s *= sc;
                P(i, j) = s;
                mx = std::max(mx, s);
            }
            if (mx == -std::numeric_limits<double>::infinity()) continue;
            double z = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const bool ok = (mask.key_valid.empty() || mask.key_valid[j]) && (!mask.causal || j <= i);
                P(i, j) = ok ? std::exp(P(i, j) - mx) : 0.0;
                z += P(i, j);
            }
            for (std::size_t j = 0; j < m; ++j) {
                P(i, j) /= z;
                const double p = P(i, j);
                if (p == 0.0) continue;
                for (std::size_t t = 0; t < dh; ++t) out(i, o + t) += p * V(j, o + t);
            }
        }
    }
    return make(std::move(out), {q, k, v}, [q, k, v, probs, heads, dh, sc](Node& node) {
        const Matrix& G = node.grad;
        const Matrix &Q = q->value, &K = k->value, &V = v->value;
        const std::size_t n = Q.rows(), m = K.rows();
        Matrix* gq = q->requires_grad ? &q->grad_buffer() : nullptr;
        Matrix* gk = k->requires_grad ? &k->grad_buffer() : nullptr;
        Matrix* gv = v->requires_grad ? &v->grad_buffer() : nullptr;
        std::vector<double> dp(m);
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& P = (*probs)[h];
            const std::size_t o = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
                double dot_pp = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    const double p = P(i, j);
                    if (p == 0.0) {
                        dp[j] = 0.0;
                        continue;
                    }
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += G(i, o + t) * V(j, o + t);
                    dp[j] = s;
                    dot_pp += s * p;
                    if (gv) {
                        for (std::size_t t = 0; t < dh; ++t) (*gv)(j, o + t) += p * G(i, o + t);
                    }
                }
                for (std::size_t j = 0; j < m; ++j) {
                    const double p = P(i, j);
                    if (p == 0.0) continue;
                    const double ds = p * (dp[j] - dot_pp) * sc;
                    if (gq) {
                        for (std::size_t t = 0; t < dh; ++t) (*gq)(i, o + t) += ds * K(j, o + t);
                    }
                    if (gk) {
                        for (std::size_t t = 0; t < dh; ++t) (*gk)(j, o + t) += ds * Q(i, o + t);
                    }
                }
            }
        }
    });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
    const Matrix& x = logits->value;
    if (targets.size() != x.rows()) throw std::invalid_argument("cross_entropy: one target per row required");
    if (x.rows() == 0) throw std::invalid_argument("cross_entropy: empty batch");
    auto sm = std::make_shared<Matrix>(x.rows(), x.cols());
    double total = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (targets[r] >= x.cols()) throw std::out_of_range("cross_entropy: target out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            (*sm)(r, c) = std::exp(x(r, c) - mx);
            s += (*sm)(r, c);
        }
        for (std::size_t c = 0; c < x.cols(); ++c) (*sm)(r, c) /= s;
        total -= x(r, targets[r]) - mx - std::log(s);
    }
    const double inv = 1.0 / static_cast<double>(x.rows());
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return make(Matrix(1, 1, total * inv), {logits}, [logits, sm, tg = std::move(tg), inv](Node& n) {
        Matrix& g = logits->grad_buffer();
        const double s = n.grad[0] * inv;
        for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += s * (*sm)(r, c);
            g(r, tg[r]) -= s;
        }
    });
}

}  // namespace genplugin::ag
