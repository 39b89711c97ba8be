#include "genplugin/ssg_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "genplugin/log.hpp"

namespace genplugin::ssg {

SharedDecoder::SharedDecoder(nn::ParameterStore& store, const std::string& name, const DecoderConfig& cfg,
                             const std::vector<std::size_t>& level_sizes, Rng& rng)
    : cfg_(cfg), level_sizes_(level_sizes) {
    if (level_sizes_.empty()) throw std::invalid_argument("decoder needs at least one ID level");
    offsets_.assign(level_sizes_.size(), 0);
    for (std::size_t l = 1; l < level_sizes_.size(); ++l) offsets_[l] = offsets_[l - 1] + level_sizes_[l - 1];
    const std::size_t vocab = offsets_.back() + level_sizes_.back();
    token_table_ = store.create(name + ".tokens", nn::normal_matrix(vocab, cfg.token_dim, 1.0, rng));
    bos_ = store.create(name + ".bos", nn::normal_matrix(1, cfg.token_dim, 1.0, rng));
    positions_ = store.create(name + ".positions", nn::normal_matrix(level_sizes_.size(), cfg.dims.d_model, 0.02, rng));
    retrieval_segment_ = store.create(name + ".retrieval_segment", nn::normal_matrix(1, cfg.dims.d_model, 0.02, rng));
    input_proj_ = nn::Linear(store, name + ".input_proj", cfg.token_dim, cfg.dims.d_model, rng);
    decoder_ = nn::TransformerDecoder(store, name, cfg.dims, rng);
    for (std::size_t l = 0; l < level_sizes_.size(); ++l) {
        heads_.emplace_back(store, name + ".head" + std::to_string(l), cfg.dims.d_model, level_sizes_[l], rng);
    }
}

Var SharedDecoder::token_embedding(std::size_t level, std::size_t token) const {
    if (level >= level_sizes_.size() || token >= level_sizes_[level]) {
        throw std::out_of_range("decoder: token " + std::to_string(token) + " invalid at level " +
                                std::to_string(level));
    }
    const std::size_t idx = offsets_[level] + token;
    return ag::gather_rows(token_table_, std::span<const std::size_t>(&idx, 1));
}

Var SharedDecoder::prefix_inputs(std::span<const std::size_t> prefix) const {
    if (prefix.size() >= level_sizes_.size()) throw std::invalid_argument("decoder: prefix must be shorter than the ID");
    if (prefix.empty()) return bos_;
    std::vector<std::size_t> idx;
    for (std::size_t l = 0; l < prefix.size(); ++l) {
        if (prefix[l] >= level_sizes_[l]) throw std::out_of_range("decoder: prefix token out of range");
        idx.push_back(offsets_[l] + prefix[l]);
    }
    const Var parts[2] = {bos_, ag::gather_rows(token_table_, idx)};
    return ag::concat_rows(parts);
}

Var SharedDecoder::teacher_inputs(std::span<const std::size_t> target) const {
    if (target.size() != level_sizes_.size()) {
        throw std::invalid_argument("decoder: target has " + std::to_string(target.size()) + " tokens, expected " +
                                    std::to_string(level_sizes_.size()));
    }
    return prefix_inputs(target.first(target.size() - 1));
}

Var SharedDecoder::fused_embedding(std::size_t level, const RefinedDistribution& refined) const {
    if (refined.tokens.empty()) throw std::invalid_argument("fused_embedding: empty distribution");
    std::vector<std::size_t> idx;
    for (std::size_t t : refined.tokens) {
        if (t >= level_sizes_[level]) throw std::out_of_range("fused_embedding: token out of range");
        idx.push_back(offsets_[level] + t);
    }
    Matrix w(1, refined.weights.size(), refined.weights);
    return ag::matmul(ag::constant(std::move(w)), ag::gather_rows(token_table_, idx));
}

nn::ProjectedMemory SharedDecoder::prepare(const Var& memory, std::vector<std::uint8_t> key_valid) const {
    return decoder_.project_memory(memory, std::move(key_valid));
}

Var SharedDecoder::augment_memory(const Var& sequence_memory, const Var& retrieved) const {
    if (!retrieved || retrieved->value.rows() == 0) return sequence_memory;
    const Var parts[2] = {sequence_memory, ag::add_row(retrieved, retrieval_segment_)};
    return ag::concat_rows(parts);
}

std::vector<Var> SharedDecoder::logits(const Var& input_rows, const nn::ProjectedMemory& memory) const {
    const std::size_t n = input_rows->value.rows();
    if (n == 0 || n > level_sizes_.size()) throw std::invalid_argument("decoder: bad number of input rows");
    Var x = ag::add(input_proj_(input_rows), ag::slice_rows(positions_, 0, n));
    const Var h = decoder_(x, memory);
    std::vector<Var> out;
    out.reserve(n);
    for (std::size_t l = 0; l < n; ++l) out.push_back(heads_[l](n == 1 ? h : ag::slice_rows(h, l, 1)));
    return out;
}

std::vector<Var> SharedDecoder::decode_teacher_forced(const nn::ProjectedMemory& memory,
                                                      std::span<const std::size_t> target) const {
    return logits(teacher_inputs(target), memory);
}

RefinedDistribution refine_top_q(std::span<const double> logits, std::size_t q) {
    if (q == 0) throw std::invalid_argument("fusion width q must be positive");
    if (q > logits.size()) {
        throw std::invalid_argument("fusion width q=" + std::to_string(q) + " exceeds vocabulary size " +
                                    std::to_string(logits.size()));
    }
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(q), order.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    RefinedDistribution r;
    r.tokens.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(q));
    const double mx = logits[r.tokens.front()];
    double z = 0.0;
    for (std::size_t t : r.tokens) {
        r.weights.push_back(std::exp(logits[t] - mx));
        z += r.weights.back();
    }
    for (auto& w : r.weights) w /= z;
    return r;
}

std::vector<RefinedDistribution> language_view_refine(const std::vector<Var>& language_logits, std::size_t q) {
    std::vector<RefinedDistribution> out;
    for (std::size_t l = 0; l + 1 < language_logits.size(); ++l) {
        const auto logits = language_logits[l]->value.span();
        out.push_back(refine_top_q(logits, std::min(q, logits.size())));
    }
    return out;
}

SubstitutionPlan draw_plan(double p1, double p2, std::size_t levels, std::size_t q, Rng& rng) {
    if (p1 < 0.0 || p1 > 1.0 || p2 < 0.0 || p2 > 1.0) throw std::invalid_argument("SSG probabilities must lie in [0,1]");
    SubstitutionPlan plan;
    plan.fusion_width = q;
    plan.substitute.assign(levels, false);
    plan.substitute_item = !rng.bernoulli(p1);
    if (plan.substitute_item) {
        for (std::size_t l = 0; l < levels; ++l) plan.substitute[l] = !rng.bernoulli(p2);
    }
    return plan;
}

std::size_t substituted_inputs(const SubstitutionPlan& plan, std::size_t id_length) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < id_length && l < plan.substitute.size(); ++l) n += plan.substitute[l] ? 1 : 0;
    return n;
}

Var apply_substitution(const SharedDecoder& decoder, const SubstitutionPlan& plan,
                       std::span<const std::size_t> target, const std::vector<RefinedDistribution>& refined) {
    const std::size_t L = decoder.id_length();
    if (target.size() != L) throw std::invalid_argument("apply_substitution: target length mismatch");
    if (!plan.substitute_item || substituted_inputs(plan, L) == 0) return decoder.teacher_inputs(target);
    if (refined.size() + 1 < L) throw std::invalid_argument("apply_substitution: missing refined distributions");
    std::vector<Var> rows{decoder.prefix_inputs({})};
    for (std::size_t l = 0; l + 1 < L; ++l) {
        rows.push_back(plan.substitute[l] ? decoder.fused_embedding(l, refined[l])
                                          : decoder.token_embedding(l, target[l]));
    }
    return ag::concat_rows(rows);
}

TokenDistribution temperature_scale(std::span<const double> logits, double phi, std::size_t level) {
    if (!(phi > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (logits.empty()) throw std::invalid_argument("temperature_scale: empty logits");
    TokenDistribution d;
    d.level = level;
    d.temperature = phi;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double x : logits) {
        d.probs.push_back(std::exp((x - mx) / phi));
        z += d.probs.back();
    }
    for (auto& p : d.probs) p /= z;
    return d;
}

namespace {

double kl_floored(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        s += p[i] * (std::log(std::max(p[i], kKlFloor)) - std::log(std::max(q[i], kKlFloor)));
    }
    return s;
}

}  // namespace

double kl_mutual(const std::vector<std::vector<TokenDistribution>>& language,
                 const std::vector<std::vector<TokenDistribution>>& id) {
    if (language.size() != id.size()) throw std::invalid_argument("kl_mutual: item count mismatch");
    if (language.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < language.size(); ++i) {
        if (language[i].size() != id[i].size()) throw std::invalid_argument("kl_mutual: level count mismatch");
        for (std::size_t l = 0; l < language[i].size(); ++l) {
            const auto& p = language[i][l].probs;
            const auto& q = id[i][l].probs;
            if (p.size() != q.size()) throw std::invalid_argument("kl_mutual: vocabulary mismatch");
            total += kl_floored(p, q) + kl_floored(q, p);
        }
    }
    return total / static_cast<double>(language.size());
}

Var kl_mutual_loss(std::span<const Var> language_logits, std::span<const Var> id_logits, double phi) {
    if (!(phi > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (language_logits.size() != id_logits.size()) throw std::invalid_argument("kl_mutual_loss: level mismatch");
    Var total;
    for (std::size_t l = 0; l < language_logits.size(); ++l) {
        const Var lp = ag::log_softmax_rows(ag::scale(language_logits[l], 1.0 / phi));
        const Var lq = ag::log_softmax_rows(ag::scale(id_logits[l], 1.0 / phi));
        // KL(P‖Q) + KL(Q‖P) = Σ (P − Q)(log P − log Q)
        const Var term = ag::sum(ag::mul(ag::sub(ag::exp(lp), ag::exp(lq)), ag::sub(lp, lq)));
        total = total ? ag::add(total, term) : term;
    }
    return total ? total : ag::constant(Matrix(1, 1, 0.0));
}

Var generation_loss(std::span<const Var> level_logits, std::span<const std::size_t> target) {
    if (level_logits.size() != target.size()) throw std::invalid_argument("generation_loss: level mismatch");
    Var total;
    for (std::size_t l = 0; l < target.size(); ++l) {
        const Var ce = ag::cross_entropy(level_logits[l], std::span<const std::size_t>(&target[l], 1));
        total = total ? ag::add(total, ce) : ce;
    }
    return ag::scale(total, 1.0 / static_cast<double>(target.size()));
}

namespace {

std::vector<double> log_probs(const Var& logits_row) {
    const auto x = logits_row->value.span();
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
    return out;
}

bool better(const Generated& a, const Generated& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
}

}  // namespace

std::vector<Generated> generate(const SharedDecoder& decoder, const nn::ProjectedMemory& memory,
                                const semid::IdTrie& trie, std::size_t beam) {
    if (beam == 0) throw std::invalid_argument("beam width must be positive");
    nn::NoGrad guard;
    if (beam > trie.leaf_count()) {
        warn("beam width exceeds the number of valid IDs; returning all " + std::to_string(trie.leaf_count()));
    }
    const std::size_t L = decoder.id_length();
    std::vector<Generated> beams{Generated{}};
    for (std::size_t l = 0; l < L; ++l) {
        std::vector<Generated> next;
        for (const auto& b : beams) {
            const auto cont = trie.continuations(b.tokens);
            if (cont.empty()) continue;
            const auto lp = log_probs(decoder.logits(decoder.prefix_inputs(b.tokens), memory).back());
            for (std::size_t t : cont) {
                Generated g = b;
                g.tokens.push_back(t);
                g.log_prob += lp[t];
                next.push_back(std::move(g));
            }
        }
        const std::size_t keep = std::min(beam, next.size());
        std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
        next.resize(keep);
        beams = std::move(next);
    }
    for (auto& b : beams) b.item = *trie.item_of(b.tokens);
    return beams;
}

std::vector<Generated> score_all(const SharedDecoder& decoder, const nn::ProjectedMemory& memory,
                                 const semid::IdTrie& trie) {
    nn::NoGrad guard;
    std::vector<Generated> out;
    for (const auto& t : trie.all()) {
        const auto logits = decoder.decode_teacher_forced(memory, t);
        Generated g;
        g.tokens = t;
        g.item = *trie.item_of(t);
        for (std::size_t l = 0; l < t.size(); ++l) g.log_prob += log_probs(logits[l])[t[l]];
        out.push_back(std::move(g));
    }
    std::sort(out.begin(), out.end(), better);
    return out;
}

semid::TokenTuple greedy_decode(const SharedDecoder& decoder, const nn::ProjectedMemory& memory) {
    nn::NoGrad guard;
    semid::TokenTuple prefix;
    for (std::size_t l = 0; l < decoder.id_length(); ++l) {
        const auto out = decoder.logits(decoder.prefix_inputs(prefix), memory);
        const auto x = out.back()->value.span();
        prefix.push_back(static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin()));
    }
    return prefix;
}

std::vector<Var> free_running_logits(const SharedDecoder& decoder, const nn::ProjectedMemory& memory) {
    nn::NoGrad guard;
    auto path = greedy_decode(decoder, memory);
    path.pop_back();
    return decoder.logits(decoder.prefix_inputs(path), memory);
}

}  // namespace genplugin::ssg
