#include "genplugin/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "genplugin/errors.hpp"
#include "genplugin/rng.hpp"

namespace genplugin::corpus {
namespace {

using nlohmann::json;

std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UserError("cannot open " + path.string());
    return in;
}

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
    auto in = open_input(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string(), lineno, std::string("invalid JSON: ") + e.what());
        }
        if (!rec.is_object()) throw ParseError(path.string(), lineno, "record is not an object");
        fn(rec, lineno);
    }
}

std::string require_string(const json& rec, const char* key, const std::string& file, std::size_t line) {
    auto it = rec.find(key);
    if (it == rec.end() || !it->is_string()) {
        throw ParseError(file, line, std::string("missing or non-string field '") + key + "'");
    }
    return it->get<std::string>();
}

}  // namespace

std::size_t Corpus::n_interactions() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
}

std::string item_text(const ItemMeta& meta) {
    if (meta.description.empty()) return meta.title;
    return meta.title + " " + meta.description;
}

Corpus build_corpus(const std::vector<Interaction>& interactions, const std::vector<ItemMeta>& meta) {
    std::unordered_map<std::string, std::size_t> meta_index;
    for (std::size_t i = 0; i < meta.size(); ++i) {
        if (!meta_index.emplace(meta[i].item_id, i).second) {
            throw UserError("duplicate item metadata for '" + meta[i].item_id + "'");
        }
        if (meta[i].title.empty()) throw UserError("item '" + meta[i].item_id + "' has an empty title");
    }

    Corpus c;
    std::unordered_map<std::string, std::size_t> user_index, item_index;
    std::vector<std::vector<std::pair<std::int64_t, std::size_t>>> timed;
    std::set<std::string> missing;
    for (const auto& rec : interactions) {
        auto [uit, unew] = user_index.emplace(rec.user_id, c.user_ids.size());
        if (unew) {
            c.user_ids.push_back(rec.user_id);
            timed.emplace_back();
        }
        auto mit = meta_index.find(rec.item_id);
        if (mit == meta_index.end()) {
            missing.insert(rec.item_id);
            continue;
        }
        auto [iit, inew] = item_index.emplace(rec.item_id, c.items.size());
        if (inew) c.items.push_back(meta[mit->second]);
        timed[uit->second].emplace_back(rec.timestamp, iit->second);
    }
    if (!missing.empty()) {
        std::string msg = "items without metadata:";
        for (const auto& m : missing) msg += " " + m;
        throw UserError(msg);
    }
    c.sequences.resize(c.user_ids.size());
    for (std::size_t u = 0; u < timed.size(); ++u) {
        std::stable_sort(timed[u].begin(), timed[u].end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& [ts, item] : timed[u]) c.sequences[u].push_back(item);
    }
    return c;
}

std::vector<Interaction> read_interactions(const std::filesystem::path& path) {
    std::vector<Interaction> out;
    const std::string file = path.string();
    for_each_json_line(path, [&](const json& rec, std::size_t line) {
        Interaction it;
        it.user_id = require_string(rec, "user", file, line);
        it.item_id = require_string(rec, "item", file, line);
        auto ts = rec.find("ts");
        if (ts == rec.end() || !ts->is_number_integer()) {
            throw ParseError(file, line, "missing or non-integer field 'ts'");
        }
        it.timestamp = ts->get<std::int64_t>();
        out.push_back(std::move(it));
    });
    return out;
}

std::vector<ItemMeta> read_item_meta(const std::filesystem::path& path) {
    std::vector<ItemMeta> out;
    const std::string file = path.string();
    for_each_json_line(path, [&](const json& rec, std::size_t line) {
        ItemMeta m;
        m.item_id = require_string(rec, "item", file, line);
        m.title = require_string(rec, "title", file, line);
        auto d = rec.find("description");
        if (d != rec.end()) {
            if (!d->is_string()) throw ParseError(file, line, "non-string field 'description'");
            m.description = d->get<std::string>();
        }
        out.push_back(std::move(m));
    });
    return out;
}

Corpus ingest(const std::filesystem::path& interaction_file, const std::filesystem::path& meta_file) {
    return build_corpus(read_interactions(interaction_file), read_item_meta(meta_file));
}

void write_interactions(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw UserError("cannot write " + path.string());
    for (std::size_t u = 0; u < corpus.n_users(); ++u) {
        for (std::size_t t = 0; t < corpus.sequences[u].size(); ++t) {
            json rec{{"user", corpus.user_ids[u]},
                     {"item", corpus.items[corpus.sequences[u][t]].item_id},
                     {"ts", static_cast<std::int64_t>(t)}};
            out << rec.dump() << '\n';
        }
    }
}

void write_item_meta(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw UserError("cannot write " + path.string());
    for (const auto& m : corpus.items) {
        json rec{{"item", m.item_id}, {"title", m.title}, {"description", m.description}};
        out << rec.dump() << '\n';
    }
}

Corpus five_core_filter(const Corpus& corpus, FilterReport* report, std::size_t min_count) {
    std::vector<bool> user_alive(corpus.n_users(), true), item_alive(corpus.n_items(), true);
    FilterReport rep;
    while (true) {
        ++rep.passes;
        std::vector<std::size_t> ucount(corpus.n_users(), 0), icount(corpus.n_items(), 0);
        for (std::size_t u = 0; u < corpus.n_users(); ++u) {
            if (!user_alive[u]) continue;
            for (std::size_t i : corpus.sequences[u]) {
                if (!item_alive[i]) continue;
                ++ucount[u];
                ++icount[i];
            }
        }
        bool changed = false;
        for (std::size_t u = 0; u < corpus.n_users(); ++u) {
            if (user_alive[u] && ucount[u] < min_count) {
                user_alive[u] = false;
                changed = true;
            }
        }
        for (std::size_t i = 0; i < corpus.n_items(); ++i) {
            if (item_alive[i] && icount[i] < min_count) {
                item_alive[i] = false;
                changed = true;
            }
        }
        if (!changed) break;
    }

    Corpus out;
    std::vector<std::size_t> remap(corpus.n_items(), SIZE_MAX);
    for (std::size_t i = 0; i < corpus.n_items(); ++i) {
        if (!item_alive[i]) {
            ++rep.items_removed;
            continue;
        }
        remap[i] = out.items.size();
        out.items.push_back(corpus.items[i]);
    }
    for (std::size_t u = 0; u < corpus.n_users(); ++u) {
        if (!user_alive[u]) {
            ++rep.users_removed;
            rep.interactions_removed += corpus.sequences[u].size();
            continue;
        }
        std::vector<std::size_t> seq;
        for (std::size_t i : corpus.sequences[u]) {
            if (item_alive[i]) {
                seq.push_back(remap[i]);
            } else {
                ++rep.interactions_removed;
            }
        }
        out.user_ids.push_back(corpus.user_ids[u]);
        out.sequences.push_back(std::move(seq));
    }
    if (out.n_users() == 0 || out.n_items() == 0) throw UserError("degenerate corpus");
    if (report) *report = rep;
    return out;
}

std::size_t head_count(std::size_t n_items, HeadRounding rounding) {
    const double x = 0.2 * static_cast<double>(n_items);
    return static_cast<std::size_t>(rounding == HeadRounding::Round ? std::round(x) : std::floor(x + 1e-9));
}

Partition head_tail_partition(const std::vector<std::size_t>& popularity, const std::vector<UserSplit>& users,
                              HeadRounding rounding) {
    std::vector<std::size_t> order(popularity.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return popularity[a] > popularity[b]; });
    const std::size_t nh = head_count(popularity.size(), rounding);
    std::vector<bool> head(popularity.size(), false);
    for (std::size_t r = 0; r < nh; ++r) head[order[r]] = true;

    Partition p;
    for (std::size_t i = 0; i < popularity.size(); ++i) (head[i] ? p.head_items : p.tail_items).push_back(i);
    for (std::size_t u = 0; u < users.size(); ++u) (head[users[u].test] ? p.head_users : p.tail_users).push_back(u);
    return p;
}

Partition head_tail_partition(const SplitDataset& split) {
    Partition p;
    p.head_items = split.head_items;
    p.tail_items = split.tail_items;
    for (std::size_t u = 0; u < split.users.size(); ++u) {
        (split.is_head[split.users[u].test] ? p.head_users : p.tail_users).push_back(u);
    }
    return p;
}

SplitDataset split_leave_one_out(const Corpus& corpus, std::size_t max_len, PopularityMode mode,
                                 HeadRounding rounding) {
    if (max_len < 3) throw UserError("max sequence length must be at least 3");
    SplitDataset s;
    s.popularity.assign(corpus.n_items(), 0);
    for (std::size_t u = 0; u < corpus.n_users(); ++u) {
        const auto& full = corpus.sequences[u];
        if (full.size() < 3) {
            throw UserError("user '" + corpus.user_ids[u] + "' has fewer than 3 interactions");
        }
        const std::size_t start = full.size() > max_len ? full.size() - max_len : 0;
        std::vector<std::size_t> seq(full.begin() + static_cast<std::ptrdiff_t>(start), full.end());
        UserSplit us;
        us.test = seq.back();
        us.valid = seq[seq.size() - 2];
        us.train.assign(seq.begin(), seq.end() - 2);
        if (mode == PopularityMode::TrainOnly) {
            for (std::size_t i : us.train) ++s.popularity[i];
        } else {
            for (std::size_t i : full) ++s.popularity[i];
        }
        s.users.push_back(std::move(us));
    }
    const Partition p = head_tail_partition(s.popularity, s.users, rounding);
    s.head_items = p.head_items;
    s.tail_items = p.tail_items;
    s.is_head.assign(corpus.n_items(), false);
    for (std::size_t i : s.head_items) s.is_head[i] = true;
    return s;
}

std::vector<std::string> build_pseudo_documents(const SplitDataset& split, const Corpus& corpus) {
    std::vector<std::string> docs;
    docs.reserve(split.users.size());
    for (const auto& us : split.users) {
        std::string doc;
        for (std::size_t i : us.train) {
            if (!doc.empty()) doc += ' ';
            doc += item_text(corpus.items[i]);
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

namespace {

std::string make_word(Rng& rng) {
    static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                              "s", "t", "v", "z", "br", "st", "tr", "gl", "pl", "sh"};
    static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
    const std::size_t syllables = 2 + rng.index(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
        w += kOnsets[rng.index(std::size(kOnsets))];
        w += kVowels[rng.index(std::size(kVowels))];
    }
    return w;
}

std::vector<std::string> make_vocab(Rng& rng, std::size_t n, std::unordered_set<std::string>& used) {
    std::vector<std::string> v;
    while (v.size() < n) {
        std::string w = make_word(rng);
        if (used.insert(w).second) v.push_back(std::move(w));
    }
    return v;
}

std::size_t sample_weighted(Rng& rng, const std::vector<std::size_t>& pool, const std::vector<double>& weight) {
    double total = 0.0;
    for (std::size_t i : pool) total += weight[i];
    double r = rng.uniform() * total;
    for (std::size_t i : pool) {
        r -= weight[i];
        if (r < 0.0) return i;
    }
    return pool.back();
}

}  // namespace

Corpus synth_generate(const SynthParams& p) {
    if (p.n_clusters < 1 || p.n_users < p.n_clusters || p.n_items < p.n_clusters) {
        throw UserError("synth_generate: need n_users, n_items >= n_clusters >= 1");
    }
    if (p.skew < 0.0) throw UserError("synth_generate: skew must be >= 0");
    if (p.min_len < 3 || p.max_len < p.min_len) throw UserError("synth_generate: invalid sequence length range");
    if (p.subtheme_size < 1) throw UserError("synth_generate: subtheme_size must be >= 1");
    if (p.p_subtheme < 0.0 || p.p_cluster < 0.0 || p.p_subtheme + p.p_cluster > 1.0) {
        throw UserError("synth_generate: transition probabilities must lie in [0,1] and sum to <= 1");
    }

    Rng text_rng(p.seed, "synth-text");
    Rng pop_rng(p.seed, "synth-popularity");
    Rng seq_rng(p.seed, "synth-sequences");

    const std::size_t C = p.n_clusters;
    std::vector<std::vector<std::size_t>> cluster_items(C);
    for (std::size_t i = 0; i < p.n_items; ++i) cluster_items[i % C].push_back(i);

    std::vector<std::size_t> subtheme(p.n_items);
    std::vector<std::vector<std::size_t>> subtheme_items;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t j = 0; j < cluster_items[c].size(); ++j) {
            if (j % p.subtheme_size == 0) subtheme_items.emplace_back();
            subtheme[cluster_items[c][j]] = subtheme_items.size() - 1;
            subtheme_items.back().push_back(cluster_items[c][j]);
        }
    }

    std::unordered_set<std::string> used;
    std::vector<std::vector<std::string>> theme(C);
    for (auto& t : theme) t = make_vocab(text_rng, 8, used);
    std::vector<std::vector<std::string>> sub_vocab(subtheme_items.size());
    for (auto& s : sub_vocab) s = make_vocab(text_rng, 6, used);

    Corpus c;
    c.items.resize(p.n_items);
    for (std::size_t i = 0; i < p.n_items; ++i) {
        const auto& th = theme[i % C];
        const auto& sv = sub_vocab[subtheme[i]];
        const auto own = make_vocab(text_rng, 2, used);
        auto& m = c.items[i];
        char id[32];
        std::snprintf(id, sizeof id, "i%05zu", i);
        m.item_id = id;
        m.title = th[text_rng.index(th.size())] + " " + sv[text_rng.index(sv.size())] + " " + own[0];
        std::string d;
        for (int w = 0; w < 4; ++w) d += th[text_rng.index(th.size())] + " ";
        for (int w = 0; w < 3; ++w) d += sv[text_rng.index(sv.size())] + " ";
        d += own[1];
        m.description = d;
    }

    std::vector<std::size_t> rank(p.n_items);
    std::iota(rank.begin(), rank.end(), 0);
    std::shuffle(rank.begin(), rank.end(), pop_rng.engine());
    std::vector<double> weight(p.n_items);
    for (std::size_t i = 0; i < p.n_items; ++i) weight[i] = std::pow(static_cast<double>(rank[i] + 1), -p.skew);

    std::vector<std::size_t> all(p.n_items);
    std::iota(all.begin(), all.end(), 0);

    for (std::size_t u = 0; u < p.n_users; ++u) {
        char id[32];
        std::snprintf(id, sizeof id, "u%05zu", u);
        c.user_ids.emplace_back(id);
        const std::size_t cl = u % C;
        const std::size_t len = p.min_len + seq_rng.index(p.max_len - p.min_len + 1);
        std::vector<std::size_t> seq;
        seq.push_back(sample_weighted(seq_rng, cluster_items[cl], weight));
        while (seq.size() < len) {
            const double r = seq_rng.uniform();
            const std::vector<std::size_t>* pool = &all;
            if (r < p.p_subtheme) {
                pool = &subtheme_items[subtheme[seq.back()]];
            } else if (r < p.p_subtheme + p.p_cluster) {
                pool = &cluster_items[cl];
            }
            seq.push_back(sample_weighted(seq_rng, *pool, weight));
        }
        c.sequences.push_back(std::move(seq));
    }
    return c;
}

nlohmann::json split_manifest(const SplitDataset& split, const Corpus& corpus) {
    json users = json::array();
    for (std::size_t u = 0; u < split.users.size(); ++u) {
        const auto& us = split.users[u];
        json train = json::array();
        for (std::size_t i : us.train) train.push_back(corpus.items[i].item_id);
        users.push_back({{"user", corpus.user_ids[u]},
                         {"train", train},
                         {"valid", json::array({corpus.items[us.valid].item_id})},
                         {"test", json::array({corpus.items[us.test].item_id})}});
    }
    json head = json::array(), tail = json::array();
    for (std::size_t i : split.head_items) head.push_back(corpus.items[i].item_id);
    for (std::size_t i : split.tail_items) tail.push_back(corpus.items[i].item_id);
    return {{"users", users}, {"head_items", head}, {"tail_items", tail}};
}

std::uint64_t corpus_hash(const Corpus& corpus) {
    std::uint64_t h = fnv1a("corpus");
    for (const auto& u : corpus.user_ids) h = fnv1a(u, fnv1a("\x1f", h));
    for (const auto& m : corpus.items) {
        h = fnv1a(m.item_id, fnv1a("\x1e", h));
        h = fnv1a(m.title, fnv1a("\x1f", h));
        h = fnv1a(m.description, fnv1a("\x1f", h));
    }
    for (const auto& s : corpus.sequences) {
        h = fnv1a("\x1d", h);
        for (std::size_t i : s) {
            const std::uint64_t v = i;
            h = fnv1a_bytes(&v, sizeof v, h);
        }
    }
    return h;
}

}  // namespace genplugin::corpus
