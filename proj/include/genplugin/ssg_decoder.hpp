#pragma once

// Shared ID-token decoder, semantic-substitution guidance (SSG), temperature-
// scaled mutual KL, and trie-constrained beam generation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "genplugin/nn.hpp"
#include "genplugin/rng.hpp"
#include "genplugin/semid.hpp"

namespace genplugin::ssg {

using ag::Var;

struct DecoderConfig {
    nn::TransformerDims dims;
    std::size_t token_dim = 32;
};

/// Probability vector over one level's vocabulary.
struct TokenDistribution {
    std::size_t level = 0;
    std::vector<double> probs;
    double temperature = 1.0;
};

/// q-sparse distribution from softmax over the top-q logits.
struct RefinedDistribution {
    std::vector<std::size_t> tokens;  // local token ids, descending logit
    std::vector<double> weights;      // sums to 1
};

struct SubstitutionPlan {
    bool substitute_item = false;     // drawn with probability 1 - p1
    std::vector<bool> substitute;     // per ID level; only set when substitute_item
    std::size_t fusion_width = 5;     // q
};

class SharedDecoder {
public:
    SharedDecoder() = default;
    SharedDecoder(nn::ParameterStore& store, const std::string& name, const DecoderConfig& cfg,
                  const std::vector<std::size_t>& level_sizes, Rng& rng);

    std::size_t id_length() const { return level_sizes_.size(); }
    const std::vector<std::size_t>& level_sizes() const { return level_sizes_; }
    std::size_t d_model() const { return cfg_.dims.d_model; }

    /// Rows (token_dim wide) fed to the decoder for a teacher-forced pass:
    /// BOS followed by the embeddings of tokens 0..L-2.
    Var teacher_inputs(std::span<const std::size_t> target) const;
    /// BOS plus the given prefix tokens (prefix shorter than L).
    Var prefix_inputs(std::span<const std::size_t> prefix) const;
    /// Embedding row of a local token at a level.
    Var token_embedding(std::size_t level, std::size_t token) const;
    /// Fusion Σ w_j · emb(token_j) of a refined distribution (weights are constants).
    Var fused_embedding(std::size_t level, const RefinedDistribution& refined) const;

    nn::ProjectedMemory prepare(const Var& memory, std::vector<std::uint8_t> key_valid = {}) const;
    /// Appends retrieved-user rows (tagged with the retrieval segment embedding)
    /// below the sequence memory.
    Var augment_memory(const Var& sequence_memory, const Var& retrieved) const;

    /// One logit row per decoded position (rows.size() ≤ L), each 1×V_level.
    std::vector<Var> logits(const Var& input_rows, const nn::ProjectedMemory& memory) const;
    /// Teacher-forced logits for all L levels.
    std::vector<Var> decode_teacher_forced(const nn::ProjectedMemory& memory, std::span<const std::size_t> target) const;

private:
    DecoderConfig cfg_;
    std::vector<std::size_t> level_sizes_, offsets_;
    Var token_table_;
    Var bos_;
    Var positions_;
    Var retrieval_segment_;
    nn::Linear input_proj_;
    nn::TransformerDecoder decoder_;
    std::vector<nn::Linear> heads_;
};

/// Softmax over the q largest logits; ties broken toward lower token id.
RefinedDistribution refine_top_q(std::span<const double> logits, std::size_t q);

/// Per-level refined distributions from language-view logits for levels 0..L-2
/// (the levels whose tokens are decoder inputs). q is capped at each level's size.
std::vector<RefinedDistribution> language_view_refine(const std::vector<Var>& language_logits, std::size_t q);

SubstitutionPlan draw_plan(double p1, double p2, std::size_t levels, std::size_t q, Rng& rng);

/// Decoder input rows for the ID-view pass: ground-truth embeddings at kept
/// positions, fused language-view predictions at substituted positions.
Var apply_substitution(const SharedDecoder& decoder, const SubstitutionPlan& plan,
                       std::span<const std::size_t> target, const std::vector<RefinedDistribution>& refined);

/// Multiplies out the substitution flags of a plan for input positions 1..L-1.
std::size_t substituted_inputs(const SubstitutionPlan& plan, std::size_t id_length);

TokenDistribution temperature_scale(std::span<const double> logits, double phi, std::size_t level = 0);

/// Σ_levels [KL(P‖Q) + KL(Q‖P)] with probabilities floored at 1e-12 before the
/// log, averaged over items. Outer index: item; inner: level.
double kl_mutual(const std::vector<std::vector<TokenDistribution>>& language,
                 const std::vector<std::vector<TokenDistribution>>& id);
inline constexpr double kKlFloor = 1e-12;

/// Differentiable symmetric KL between temperature-scaled logits of one item
/// (summed over levels).
Var kl_mutual_loss(std::span<const Var> language_logits, std::span<const Var> id_logits, double phi);

/// Mean token-level cross-entropy of per-level logits against the target tuple.
Var generation_loss(std::span<const Var> level_logits, std::span<const std::size_t> target);

struct Generated {
    semid::TokenTuple tokens;
    std::size_t item = 0;
    double log_prob = 0.0;
};

/// Beam search over levels restricted to trie-valid continuations. Returns up to
/// `beam` complete IDs sorted by total log-probability (ties: lexicographic).
std::vector<Generated> generate(const SharedDecoder& decoder, const nn::ProjectedMemory& memory,
                                const semid::IdTrie& trie, std::size_t beam);

/// Exhaustive scoring of every tuple in the trie (reference for generate()).
std::vector<Generated> score_all(const SharedDecoder& decoder, const nn::ProjectedMemory& memory,
                                 const semid::IdTrie& trie);

/// Greedy unconstrained argmax decoding (free-running).
semid::TokenTuple greedy_decode(const SharedDecoder& decoder, const nn::ProjectedMemory& memory);
/// Per-level logits along the greedy path: level l is conditioned on the
/// model's own argmax tokens for levels < l. No gradients.
std::vector<Var> free_running_logits(const SharedDecoder& decoder, const nn::ProjectedMemory& memory);

}  // namespace genplugin::ssg
