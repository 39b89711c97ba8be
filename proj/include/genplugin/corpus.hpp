#pragma once

// Interaction-log ingestion, k-core filtering, leave-one-out splits, the
// head/tail popularity partition, pseudo-documents and the synthetic generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace genplugin::corpus {

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
};

struct ItemMeta {
    std::string item_id;
    std::string title;
    std::string description;
};

/// Users and items mapped to dense indices; sequences are chronological
/// (stable with respect to input order on timestamp ties).
struct Corpus {
    std::vector<std::string> user_ids;
    std::vector<ItemMeta> items;  // indexed by internal item index
    std::vector<std::vector<std::size_t>> sequences;

    std::size_t n_users() const { return user_ids.size(); }
    std::size_t n_items() const { return items.size(); }
    std::size_t n_interactions() const;
};

/// Builds a corpus from in-memory records. Items are indexed in order of first
/// appearance in `interactions`; every referenced item needs metadata.
Corpus build_corpus(const std::vector<Interaction>& interactions, const std::vector<ItemMeta>& meta);

/// JSON-lines loaders: {"user","item","ts"} and {"item","title","description"}.
std::vector<Interaction> read_interactions(const std::filesystem::path& path);
std::vector<ItemMeta> read_item_meta(const std::filesystem::path& path);
Corpus ingest(const std::filesystem::path& interaction_file, const std::filesystem::path& meta_file);

void write_interactions(const std::filesystem::path& path, const Corpus& corpus);
void write_item_meta(const std::filesystem::path& path, const Corpus& corpus);

struct FilterReport {
    std::size_t users_removed = 0;
    std::size_t items_removed = 0;
    std::size_t interactions_removed = 0;
    std::size_t passes = 0;
};

/// Iteratively drops users and items with fewer than `min_count` interactions
/// until a fixed point. Throws UserError("degenerate corpus") if nothing remains.
Corpus five_core_filter(const Corpus& corpus, FilterReport* report = nullptr, std::size_t min_count = 5);

enum class PopularityMode { TrainOnly, AllInteractions };
enum class HeadRounding { Round, Floor };

struct UserSplit {
    std::vector<std::size_t> train;
    std::size_t valid = 0;
    std::size_t test = 0;
};

struct SplitDataset {
    std::vector<UserSplit> users;
    std::vector<std::size_t> popularity;  // per item
    std::vector<std::size_t> head_items;  // ascending item index
    std::vector<std::size_t> tail_items;
    std::vector<bool> is_head;            // per item

    std::size_t n_items() const { return popularity.size(); }
};

/// Truncates each sequence to its most recent `max_len` items, then holds out
/// the last item for test and the second-to-last for validation.
SplitDataset split_leave_one_out(const Corpus& corpus, std::size_t max_len,
                                 PopularityMode mode = PopularityMode::TrainOnly,
                                 HeadRounding rounding = HeadRounding::Round);

struct Partition {
    std::vector<std::size_t> head_items;
    std::vector<std::size_t> tail_items;
    std::vector<std::size_t> head_users;  // users whose test target is a head item
    std::vector<std::size_t> tail_users;
};

std::size_t head_count(std::size_t n_items, HeadRounding rounding = HeadRounding::Round);

/// Top-20% items by `popularity`, ties broken by ascending item index.
Partition head_tail_partition(const std::vector<std::size_t>& popularity, const std::vector<UserSplit>& users,
                              HeadRounding rounding = HeadRounding::Round);
Partition head_tail_partition(const SplitDataset& split);

/// Space-joined "title description" of each train item, oldest first.
std::vector<std::string> build_pseudo_documents(const SplitDataset& split, const Corpus& corpus);

/// Item text used for embedding extraction.
std::string item_text(const ItemMeta& meta);

struct SynthParams {
    std::size_t n_users = 200;
    std::size_t n_items = 100;
    std::size_t n_clusters = 4;
    double skew = 1.0;
    std::uint64_t seed = 0;
    std::size_t min_len = 8;
    std::size_t max_len = 20;
    std::size_t subtheme_size = 5;
    double p_subtheme = 0.5;    // next item shares the previous item's sub-theme
    double p_cluster = 0.35;    // next item from the user's cluster
};

/// Deterministic clustered corpus with power-law item popularity. Users and
/// items are assigned to clusters round-robin; item texts draw on cluster and
/// sub-theme vocabularies so text, co-occurrence and IDs correlate.
Corpus synth_generate(const SynthParams& params);

nlohmann::json split_manifest(const SplitDataset& split, const Corpus& corpus);

/// Stable content hash over ids, texts and sequences.
std::uint64_t corpus_hash(const Corpus& corpus);

}  // namespace genplugin::corpus
