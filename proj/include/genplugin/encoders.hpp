#pragma once

// Language-view and ID-view sequence encoders, preference pooling, and the
// two contrastive cross-view alignment losses.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "genplugin/nn.hpp"
#include "genplugin/semid.hpp"

namespace genplugin::encoders {

using ag::Var;

struct EncoderConfig {
    nn::TransformerDims dims;
    std::size_t max_items = 20;     // m
    std::size_t token_dim = 32;     // ID token embedding width before projection to d_model
    bool positions = true;          // learned absolute position embeddings
};

/// Token-level outputs of both views for one user sequence.
struct ViewEncoding {
    Var language;  // n × d (H_u), absent in single-view mode
    Var id;        // (n·L) × d (C_u)
    std::size_t n_items = 0;
    std::size_t id_length = 0;
};

/// Encodes a sequence of projected item embeddings (one row per item).
class LanguageEncoder {
public:
    LanguageEncoder() = default;
    LanguageEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& cfg, Rng& rng);

    /// `key_valid` marks real positions (empty = all real). Rows beyond m are rejected.
    Var operator()(const Var& projected, const std::vector<std::uint8_t>& key_valid = {}) const;

private:
    EncoderConfig cfg_;
    Var positions_;
    nn::TransformerEncoder encoder_;
};

/// Encodes the flattened ID-token sequence t_{1}^{(1)} .. t_{n}^{(L)}.
class IdEncoder {
public:
    IdEncoder() = default;
    IdEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& cfg,
              const semid::SemanticIds& ids, Rng& rng);

    /// Global token index (level offset + local token) of every token of every item.
    std::vector<std::size_t> flatten(std::span<const std::size_t> items) const;
    /// Embedded, projected input rows before position encoding.
    Var embed(std::span<const std::size_t> flat_tokens) const;
    Var operator()(std::span<const std::size_t> items, const std::vector<std::uint8_t>& item_valid = {}) const;

    std::size_t id_length() const { return id_length_; }

private:
    EncoderConfig cfg_;
    std::vector<semid::TokenTuple> ids_;
    std::vector<std::size_t> offsets_;
    std::size_t id_length_ = 0;
    Var token_table_;
    nn::Linear token_proj_;
    Var positions_;
    nn::TransformerEncoder encoder_;
};

/// Mean over rows whose `valid` flag is set (all rows when `valid` is empty).
Var mean_pool(const Var& rows, const std::vector<std::uint8_t>& valid = {});

/// g_i: sum of each consecutive group of `id_length` rows. (n·L)×d → n×d.
Var item_id_representations(const Var& id_rows, std::size_t id_length);

/// Symmetric InfoNCE with inner-product similarity: for every anchor row i,
/// -log softmax_j(<a_i, b_j>/τ)[i] plus the same with the roles swapped,
/// averaged over rows. Returns 0 (and warns) for fewer than two rows.
Var symmetric_info_nce(const Var& a, const Var& b, double tau);

struct ItemOccurrence {
    Var language;  // 1×d  h_i
    Var id;        // 1×d  g_i
    std::size_t item = 0;
};

/// Collects (h_i, g_i) for every distinct item in the batch; first occurrence
/// (batch order, then position) represents the item.
std::vector<ItemOccurrence> collect_item_pairs(std::span<const ViewEncoding> batch,
                                               std::span<const std::vector<std::size_t>> sequences);

Var loss_item_alignment(std::span<const ItemOccurrence> pairs, double tau);
/// p, q: one row per user.
Var loss_user_alignment(const Var& p, const Var& q, double tau);

}  // namespace genplugin::encoders
