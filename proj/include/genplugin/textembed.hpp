#pragma once

// Frozen item-text embeddings and the trainable two-layer projection into the
// model space.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "genplugin/corpus.hpp"
#include "genplugin/matrix.hpp"
#include "genplugin/nn.hpp"

namespace genplugin::textembed {

/// Lowercased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);

enum class ExtractorKind { DeterministicHash, FileLoaded };

struct ExtractorConfig {
    ExtractorKind kind = ExtractorKind::DeterministicHash;
    std::size_t dim = 64;                 // D_ext for the hash extractor
    std::uint64_t seed = 0;
    std::filesystem::path vectors_file;  // JSON-lines {"item": id, "vector": [...]} for FileLoaded
};

std::string extractor_name(const ExtractorConfig& cfg);

/// Seeded random projection of a token-count vector: every token owns a fixed
/// Gaussian direction; the embedding is the count-weighted sum divided by the
/// L2 norm of the counts. Values are rounded to float32 (the cache precision).
std::vector<double> hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed);

/// One row per item (row order = item index). Owns no trainable parameters.
Matrix extract(const std::vector<corpus::ItemMeta>& items, const ExtractorConfig& cfg);

/// Embedding cache: `<stem>.json` header {extractor, D_ext, n_items, corpus_hash}
/// plus `<stem>.f32` row-major float32 matrix.
void write_cache(const std::filesystem::path& stem, const Matrix& embeddings, const std::string& extractor,
                 std::uint64_t corpus_hash);
/// Returns false when the cache is absent or keyed differently.
bool read_cache(const std::filesystem::path& stem, const std::string& extractor, std::uint64_t corpus_hash,
                Matrix& out);

/// extract() behind the on-disk cache in `cache_dir`.
Matrix extract_cached(const std::vector<corpus::ItemMeta>& items, const ExtractorConfig& cfg,
                      const std::filesystem::path& cache_dir, std::uint64_t corpus_hash);

enum class Activation { Gelu, Identity };

/// ê = W2·σ(W1·e + b1) + b2, applied row-wise.
class Projector {
public:
    Projector() = default;
    Projector(nn::ParameterStore& store, const std::string& name, std::size_t in_dim, std::size_t out_dim,
              std::size_t hidden, Rng& rng, Activation act = Activation::Gelu);

    ag::Var operator()(const ag::Var& embeddings) const;
    std::size_t in_dim() const { return in_dim_; }
    std::size_t out_dim() const { return out_dim_; }

    nn::Linear first, second;

private:
    std::size_t in_dim_ = 0, out_dim_ = 0;
    Activation act_ = Activation::Gelu;
};

}  // namespace genplugin::textembed
