#pragma once

// Dual-path similar-user retrieval (BM25 over pseudo-documents, cosine over
// collaborative profiles), ID-semantics re-ranking and the preference cache.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "genplugin/corpus.hpp"
#include "genplugin/matrix.hpp"
#include "json.hpp"

namespace genplugin::retrieval {

struct ScoredUser {
    std::size_t user = 0;
    double score = 0.0;
};

/// Okapi BM25 over user pseudo-documents with IDF log((N - df + 0.5)/(df + 0.5) + 1).
class Bm25Index {
public:
    Bm25Index() = default;
    Bm25Index(const std::vector<std::string>& documents, double k1 = 1.2, double b = 0.75);

    /// Score of document `doc` for the distinct terms of `query_terms`.
    double score(const std::vector<std::string>& query_terms, std::size_t doc) const;
    double idf(const std::string& term) const;
    /// Top-z documents for the target user's own document as query, excluding
    /// the target. Ties by ascending user index; zero-score documents are kept
    /// only when needed to fill z.
    std::vector<ScoredUser> search(std::size_t target, std::size_t z) const;

    std::size_t size() const { return doc_len_.size(); }
    double avg_doc_len() const { return avgdl_; }
    nlohmann::json to_json() const;
    static Bm25Index from_json(const nlohmann::json& j);

private:
    std::vector<std::string> unique_terms(std::size_t doc) const;

    double k1_ = 1.2, b_ = 0.75, avgdl_ = 0.0;
    std::vector<std::size_t> doc_len_;
    // term → postings (doc, term frequency), ascending doc
    std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> postings_;
    std::vector<std::vector<std::string>> doc_terms_;
};

/// Top-z rows of `profiles` by cosine similarity to row `target`, excluding
/// the target; ties by ascending user index.
std::vector<ScoredUser> collab_search(const Matrix& profiles, std::size_t target, std::size_t z);

struct RetrievalContext {
    std::size_t target = 0;
    std::vector<ScoredUser> content;
    std::vector<ScoredUser> collab;
    std::vector<ScoredUser> reranked;  // descending cosine on q
    std::vector<std::size_t> forced;   // in both lists
};

/// Cosine(q_target, q_candidate) over the union of both lists. Users in both
/// lists are always kept; remaining slots up to v go to the best scores. If
/// the intersection alone exceeds v the output grows beyond v.
std::vector<ScoredUser> rerank(const std::vector<ScoredUser>& content, const std::vector<ScoredUser>& collab,
                               const Matrix& cached_q, std::size_t target, std::size_t v,
                               std::vector<std::size_t>* forced_out = nullptr);

/// Pooled ID-view preference vectors (one row per user), stamped with the hash
/// of the encoder checkpoint that produced them.
struct PreferenceCache {
    std::uint64_t checkpoint_hash = 0;
    Matrix q;  // n_users × d

    /// Throws StaleCache when `expected_hash` differs from the stamp.
    const Matrix& checked(std::uint64_t expected_hash) const;
};

/// Header `<stem>.json` {checkpoint_hash, d, n_users} + `<stem>.f32` matrix.
void write_cache(const std::filesystem::path& stem, const PreferenceCache& cache);
PreferenceCache read_cache(const std::filesystem::path& stem, std::uint64_t expected_hash);

struct CollabConfig {
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t layers = 2;
    std::size_t ffn = 64;
    std::size_t max_len = 20;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 0.002;
    std::uint64_t seed = 0;
};

/// Trains a small causal self-attention next-item model on the train splits
/// and returns each user's final-position hidden state.
Matrix train_collab_encoder(const std::vector<std::vector<std::size_t>>& train_sequences, std::size_t n_items,
                            const CollabConfig& cfg);

/// Retrieval contexts for every user. `cached_q` rows index users.
std::vector<RetrievalContext> build_contexts(const Bm25Index& bm25, const Matrix& profiles, const Matrix& cached_q,
                                             std::size_t z, std::size_t v);

nlohmann::json contexts_to_json(const std::vector<RetrievalContext>& contexts);
std::vector<RetrievalContext> contexts_from_json(const nlohmann::json& j);

}  // namespace genplugin::retrieval
