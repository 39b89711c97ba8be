#pragma once

// Semantic IDs: residual k-means codebooks over item embeddings, collision
// disambiguation, and the prefix trie used for constrained decoding.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "genplugin/matrix.hpp"
#include "json.hpp"

namespace genplugin::semid {

using TokenTuple = std::vector<std::size_t>;

struct Codebooks {
    std::vector<Matrix> levels;           // level r: V_r × d centroids
    std::vector<double> level_error;      // mean squared residual norm after level r
};

struct KMeansOptions {
    std::size_t max_iters = 100;
    std::size_t restarts = 4;
};

/// Lloyd's k-means with k-means++ seeding, best of `restarts`. Empty clusters
/// are re-seeded with the point farthest from its centroid.
Matrix kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {},
              double* inertia = nullptr);

/// Level r is fit on residuals after subtracting the assigned centroids of
/// levels 1..r-1.
Codebooks fit_codebooks(const Matrix& embeddings, std::size_t levels, std::size_t vocab_per_level,
                        std::uint64_t seed, const KMeansOptions& opts = {});

/// Prefix trie over token tuples; leaves carry item indices.
class IdTrie {
public:
    void insert(const TokenTuple& tokens, std::size_t item);
    bool contains(const TokenTuple& tokens) const;
    std::optional<std::size_t> item_of(const TokenTuple& tokens) const;
    /// Valid next tokens after `prefix`, ascending. Empty if the prefix is unknown or complete.
    std::vector<std::size_t> continuations(const TokenTuple& prefix) const;
    std::size_t leaf_count() const { return leaves_; }
    /// Every stored tuple in lexicographic order.
    std::vector<TokenTuple> all() const;

private:
    struct Node {
        std::map<std::size_t, std::unique_ptr<Node>> children;
        std::optional<std::size_t> item;
    };
    const Node* find(const TokenTuple& prefix) const;

    Node root_;
    std::size_t leaves_ = 0;
};

struct SemanticIds {
    std::vector<TokenTuple> ids;            // per item, length = id_length()
    std::vector<std::size_t> level_sizes;   // vocabulary size per token position
    IdTrie trie;

    std::size_t id_length() const { return level_sizes.size(); }
    std::size_t n_items() const { return ids.size(); }
    /// Offset of each level inside a concatenated token vocabulary.
    std::vector<std::size_t> level_offsets() const;
    std::size_t total_vocab() const;
    bool has_disambiguation = false;
};

/// Nearest-centroid assignment on residuals. When any two items share all k
/// tokens, every item gets an extra counter token (0, 1, ... within each
/// collision group, ordered by item index).
SemanticIds assign_ids(const Codebooks& codebooks, const Matrix& embeddings);

/// Quantised reconstruction error (mean squared norm) of `embeddings` after each level.
std::vector<double> residual_errors(const Codebooks& codebooks, const Matrix& embeddings);

nlohmann::json id_manifest(const SemanticIds& ids, const std::vector<std::string>& item_ids);
SemanticIds ids_from_manifest(const nlohmann::json& manifest, const std::vector<std::string>& item_ids);

/// Binary matrix file: uint64 rows, uint64 cols, then row-major float64.
void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path);

}  // namespace genplugin::semid
