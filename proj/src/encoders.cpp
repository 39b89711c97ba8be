#include "genplugin/encoders.hpp"

#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "genplugin/log.hpp"

namespace genplugin::encoders {
namespace {

Var add_positions(const Var& x, const Var& positions, bool enabled) {
    if (!enabled) return x;
    return ag::add(x, ag::slice_rows(positions, 0, x->value.rows()));
}

}  // namespace

LanguageEncoder::LanguageEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& cfg,
                                 Rng& rng)
    : cfg_(cfg),
      positions_(store.create(name + ".positions", nn::normal_matrix(cfg.max_items, cfg.dims.d_model, 0.02, rng))),
      encoder_(store, name, cfg.dims, rng) {}

Var LanguageEncoder::operator()(const Var& projected, const std::vector<std::uint8_t>& key_valid) const {
    if (projected->value.rows() > cfg_.max_items) {
        throw std::invalid_argument("language encoder: sequence longer than " + std::to_string(cfg_.max_items));
    }
    if (projected->value.rows() == 0) throw std::invalid_argument("language encoder: empty sequence");
    return encoder_(add_positions(projected, positions_, cfg_.positions), key_valid);
}

IdEncoder::IdEncoder(nn::ParameterStore& store, const std::string& name, const EncoderConfig& cfg,
                     const semid::SemanticIds& ids, Rng& rng)
    : cfg_(cfg),
      ids_(ids.ids),
      offsets_(ids.level_offsets()),
      id_length_(ids.id_length()),
      token_table_(store.create(name + ".tokens", nn::normal_matrix(ids.total_vocab(), cfg.token_dim, 1.0, rng))),
      token_proj_(store, name + ".token_proj", cfg.token_dim, cfg.dims.d_model, rng),
      positions_(store.create(name + ".positions",
                              nn::normal_matrix(cfg.max_items * ids.id_length(), cfg.dims.d_model, 0.02, rng))),
      encoder_(store, name, cfg.dims, rng) {}

std::vector<std::size_t> IdEncoder::flatten(std::span<const std::size_t> items) const {
    std::vector<std::size_t> flat;
    flat.reserve(items.size() * id_length_);
    for (std::size_t item : items) {
        if (item >= ids_.size()) throw std::out_of_range("id encoder: unknown item " + std::to_string(item));
        for (std::size_t l = 0; l < id_length_; ++l) flat.push_back(offsets_[l] + ids_[item][l]);
    }
    return flat;
}

Var IdEncoder::embed(std::span<const std::size_t> flat_tokens) const {
    return token_proj_(ag::gather_rows(token_table_, flat_tokens));
}

Var IdEncoder::operator()(std::span<const std::size_t> items, const std::vector<std::uint8_t>& item_valid) const {
    if (items.size() > cfg_.max_items) {
        throw std::invalid_argument("id encoder: sequence longer than " + std::to_string(cfg_.max_items));
    }
    if (items.empty()) throw std::invalid_argument("id encoder: empty sequence");
    std::vector<std::uint8_t> token_valid;
    if (!item_valid.empty()) {
        if (item_valid.size() != items.size()) throw std::invalid_argument("id encoder: mask length mismatch");
        for (auto v : item_valid) token_valid.insert(token_valid.end(), id_length_, v);
    }
    const auto flat = flatten(items);
    return encoder_(add_positions(embed(flat), positions_, cfg_.positions), token_valid);
}

Var mean_pool(const Var& rows, const std::vector<std::uint8_t>& valid) {
    const std::size_t n = rows->value.rows();
    Matrix w(1, n);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (valid.empty() || valid[i]) {
            w[i] = 1.0;
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("mean_pool: no valid rows");
    for (std::size_t i = 0; i < n; ++i) w[i] /= static_cast<double>(count);
    return ag::matmul(ag::constant(std::move(w)), rows);
}

Var item_id_representations(const Var& id_rows, std::size_t id_length) {
    const std::size_t total = id_rows->value.rows();
    if (id_length == 0 || total % id_length != 0) {
        throw std::invalid_argument("item_id_representations: row count not a multiple of the ID length");
    }
    const std::size_t n = total / id_length;
    Matrix pool(n, total);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < id_length; ++r) pool(i, i * id_length + r) = 1.0;
    return ag::matmul(ag::constant(std::move(pool)), id_rows);
}

Var symmetric_info_nce(const Var& a, const Var& b, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("contrastive temperature must be positive");
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("symmetric_info_nce: shape mismatch");
    const std::size_t n = a->value.rows();
    if (n < 2) {
        warn("contrastive batch has no negatives; alignment loss is 0");
        return ag::constant(Matrix(1, 1, 0.0));
    }
    const Var s = ag::scale(ag::matmul(a, b, kernels::Trans::No, kernels::Trans::Yes), 1.0 / tau);
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), 0);
    const Var forward = ag::pick(ag::log_softmax_rows(s), diag);
    const Var reverse = ag::pick(ag::log_softmax_rows(ag::transpose(s)), diag);
    return ag::scale(ag::add(ag::sum(forward), ag::sum(reverse)), -1.0 / static_cast<double>(n));
}

std::vector<ItemOccurrence> collect_item_pairs(std::span<const ViewEncoding> batch,
                                               std::span<const std::vector<std::size_t>> sequences) {
    if (batch.size() != sequences.size()) throw std::invalid_argument("collect_item_pairs: batch size mismatch");
    std::vector<ItemOccurrence> out;
    std::unordered_set<std::size_t> seen;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& enc = batch[b];
        if (!enc.language) throw std::invalid_argument("collect_item_pairs: language view missing");
        const Var g = item_id_representations(enc.id, enc.id_length);
        for (std::size_t j = 0; j < sequences[b].size(); ++j) {
            const std::size_t item = sequences[b][j];
            if (!seen.insert(item).second) continue;
            out.push_back({ag::slice_rows(enc.language, j, 1), ag::slice_rows(g, j, 1), item});
        }
    }
    return out;
}

Var loss_item_alignment(std::span<const ItemOccurrence> pairs, double tau) {
    if (pairs.size() < 2) {
        warn("item alignment batch has a single distinct item; loss is 0");
        return ag::constant(Matrix(1, 1, 0.0));
    }
    std::vector<Var> h, g;
    for (const auto& p : pairs) {
        h.push_back(p.language);
        g.push_back(p.id);
    }
    return symmetric_info_nce(ag::concat_rows(h), ag::concat_rows(g), tau);
}

Var loss_user_alignment(const Var& p, const Var& q, double tau) { return symmetric_info_nce(p, q, tau); }

}  // namespace genplugin::encoders
