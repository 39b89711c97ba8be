#include "genplugin/semid.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "genplugin/errors.hpp"
#include "genplugin/kernels.hpp"
#include "genplugin/rng.hpp"

namespace genplugin::semid {
namespace {

Matrix seed_plus_plus(const Matrix& x, std::size_t k, Rng& rng) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix c(k, d);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.index(n);
    for (std::size_t j = 0; j < k; ++j) {
        std::copy_n(x.data() + pick * d, d, c.data() + j * d);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double diff = x(i, t) - c(j, t);
                s += diff * diff;
            }
            best[i] = std::min(best[i], s);
            total += best[i];
        }
        if (total <= 0.0) {
            pick = rng.index(n);
            continue;
        }
        double r = rng.uniform() * total;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            r -= best[i];
            if (r < 0.0) {
                pick = i;
                break;
            }
        }
    }
    return c;
}

// Moves centroids of empty clusters onto the points farthest from their
// current centroid. Returns true if anything changed.
bool reseed_empty(const Matrix& x, Matrix& c, std::vector<std::size_t>& assign, std::vector<double>& dist) {
    const std::size_t k = c.rows(), d = x.cols();
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t a : assign) ++sizes[a];
    bool changed = false;
    for (std::size_t j = 0; j < k; ++j) {
        if (sizes[j] != 0) continue;
        std::size_t far = x.rows();
        double fd = -1.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            if (sizes[assign[i]] > 1 && dist[i] > fd) {
                fd = dist[i];
                far = i;
            }
        }
        if (far == x.rows()) break;  // fewer points than clusters
        --sizes[assign[far]];
        assign[far] = j;
        sizes[j] = 1;
        dist[far] = 0.0;
        std::copy_n(x.data() + far * d, d, c.data() + j * d);
        changed = true;
    }
    return changed;
}

void update_means(const Matrix& x, Matrix& c, const std::vector<std::size_t>& assign) {
    const std::size_t k = c.rows(), d = x.cols();
    Matrix sum(k, d);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        ++cnt[assign[i]];
        for (std::size_t t = 0; t < d; ++t) sum(assign[i], t) += x(i, t);
    }
    for (std::size_t j = 0; j < k; ++j) {
        if (cnt[j] == 0) continue;
        for (std::size_t t = 0; t < d; ++t) c(j, t) = sum(j, t) / static_cast<double>(cnt[j]);
    }
}

Matrix residual_after(const Matrix& x, const Matrix& centroids, std::vector<std::size_t>* out_assign = nullptr) {
    std::vector<std::size_t> assign;
    std::vector<double> dist;
    kernels::nearest_centroid(x, centroids, assign, dist);
    Matrix r = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t t = 0; t < x.cols(); ++t) r(i, t) -= centroids(assign[i], t);
    if (out_assign) *out_assign = std::move(assign);
    return r;
}

double mean_sq_norm(const Matrix& r) {
    if (r.rows() == 0) return 0.0;
    double s = 0.0;
    for (double v : r.values()) s += v * v;
    return s / static_cast<double>(r.rows());
}

}  // namespace

Matrix kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts, double* inertia) {
    if (k == 0) throw std::invalid_argument("kmeans: k must be positive");
    if (k > points.rows()) {
        throw UserError("kmeans: vocabulary " + std::to_string(k) + " exceeds " + std::to_string(points.rows()) +
                        " items");
    }
    Matrix best_c;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t rs = 0; rs < std::max<std::size_t>(1, opts.restarts); ++rs) {
        Rng rng(seed + rs, "kmeans");
        Matrix c = seed_plus_plus(points, k, rng);
        std::vector<std::size_t> assign, prev;
        std::vector<double> dist;
        for (std::size_t it = 0; it < opts.max_iters; ++it) {
            kernels::nearest_centroid(points, c, assign, dist);
            const bool reseeded = reseed_empty(points, c, assign, dist);
            if (!reseeded && assign == prev) break;
            update_means(points, c, assign);
            prev = assign;
        }
        kernels::nearest_centroid(points, c, assign, dist);
        if (reseed_empty(points, c, assign, dist)) update_means(points, c, assign);
        kernels::nearest_centroid(points, c, assign, dist);
        const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
        if (total < best) {
            best = total;
            best_c = std::move(c);
        }
    }
    if (inertia) *inertia = best;
    return best_c;
}

Codebooks fit_codebooks(const Matrix& embeddings, std::size_t levels, std::size_t vocab, std::uint64_t seed,
                        const KMeansOptions& opts) {
    if (levels == 0) throw UserError("semantic IDs need at least one level");
    if (vocab > embeddings.rows()) {
        throw UserError("codebook size " + std::to_string(vocab) + " exceeds item count " +
                        std::to_string(embeddings.rows()));
    }
    Codebooks cb;
    Matrix residual = embeddings;
    for (std::size_t r = 0; r < levels; ++r) {
        Matrix c = kmeans(residual, vocab, seed ^ splitmix64(r + 1), opts);
        residual = residual_after(residual, c);
        cb.level_error.push_back(mean_sq_norm(residual));
        cb.levels.push_back(std::move(c));
    }
    return cb;
}

std::vector<double> residual_errors(const Codebooks& codebooks, const Matrix& embeddings) {
    std::vector<double> out;
    Matrix residual = embeddings;
    for (const auto& c : codebooks.levels) {
        residual = residual_after(residual, c);
        out.push_back(mean_sq_norm(residual));
    }
    return out;
}

std::vector<std::size_t> SemanticIds::level_offsets() const {
    std::vector<std::size_t> off(level_sizes.size(), 0);
    for (std::size_t l = 1; l < level_sizes.size(); ++l) off[l] = off[l - 1] + level_sizes[l - 1];
    return off;
}

std::size_t SemanticIds::total_vocab() const {
    return std::accumulate(level_sizes.begin(), level_sizes.end(), std::size_t{0});
}

SemanticIds assign_ids(const Codebooks& codebooks, const Matrix& embeddings) {
    const std::size_t n = embeddings.rows();
    SemanticIds out;
    out.ids.assign(n, {});
    Matrix residual = embeddings;
    for (const auto& c : codebooks.levels) {
        std::vector<std::size_t> assign;
        residual = residual_after(residual, c, &assign);
        for (std::size_t i = 0; i < n; ++i) out.ids[i].push_back(assign[i]);
        out.level_sizes.push_back(c.rows());
    }

    std::map<TokenTuple, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[out.ids[i]].push_back(i);
    std::size_t max_group = 1;
    for (const auto& [t, members] : groups) max_group = std::max(max_group, members.size());
    if (max_group > 1) {
        out.has_disambiguation = true;
        for (const auto& [t, members] : groups)
            for (std::size_t j = 0; j < members.size(); ++j) out.ids[members[j]].push_back(j);
        out.level_sizes.push_back(max_group);
    }
    for (std::size_t i = 0; i < n; ++i) out.trie.insert(out.ids[i], i);
    return out;
}

void IdTrie::insert(const TokenTuple& tokens, std::size_t item) {
    Node* node = &root_;
    for (std::size_t t : tokens) {
        auto& child = node->children[t];
        if (!child) child = std::make_unique<Node>();
        node = child.get();
    }
    if (node->item) throw std::invalid_argument("IdTrie: duplicate token tuple");
    node->item = item;
    ++leaves_;
}

const IdTrie::Node* IdTrie::find(const TokenTuple& prefix) const {
    const Node* node = &root_;
    for (std::size_t t : prefix) {
        auto it = node->children.find(t);
        if (it == node->children.end()) return nullptr;
        node = it->second.get();
    }
    return node;
}

bool IdTrie::contains(const TokenTuple& tokens) const { return item_of(tokens).has_value(); }

std::optional<std::size_t> IdTrie::item_of(const TokenTuple& tokens) const {
    const Node* n = find(tokens);
    if (!n) return std::nullopt;
    return n->item;
}

std::vector<std::size_t> IdTrie::continuations(const TokenTuple& prefix) const {
    std::vector<std::size_t> out;
    const Node* n = find(prefix);
    if (!n) return out;
    for (const auto& [t, child] : n->children) out.push_back(t);
    return out;
}

std::vector<TokenTuple> IdTrie::all() const {
    std::vector<TokenTuple> out;
    TokenTuple cur;
    auto walk = [&](auto&& self, const Node& n) -> void {
        if (n.item) out.push_back(cur);
        for (const auto& [t, child] : n.children) {
            cur.push_back(t);
            self(self, *child);
            cur.pop_back();
        }
    };
    walk(walk, root_);
    return out;
}

nlohmann::json id_manifest(const SemanticIds& ids, const std::vector<std::string>& item_ids) {
    nlohmann::json items = nlohmann::json::object();
    for (std::size_t i = 0; i < ids.n_items(); ++i) items[item_ids[i]] = ids.ids[i];
    return {{"level_sizes", ids.level_sizes}, {"disambiguation", ids.has_disambiguation}, {"items", items}};
}

SemanticIds ids_from_manifest(const nlohmann::json& manifest, const std::vector<std::string>& item_ids) {
    SemanticIds out;
    out.level_sizes = manifest.at("level_sizes").get<std::vector<std::size_t>>();
    out.has_disambiguation = manifest.value("disambiguation", false);
    const auto& items = manifest.at("items");
    for (std::size_t i = 0; i < item_ids.size(); ++i) {
        if (!items.contains(item_ids[i])) throw MissingArtifact("id manifest lacks item " + item_ids[i]);
        out.ids.push_back(items.at(item_ids[i]).get<TokenTuple>());
        out.trie.insert(out.ids.back(), i);
    }
    return out;
}

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UserError("cannot write " + path.string());
    const std::uint64_t shape[2] = {m.rows(), m.cols()};
    out.write(reinterpret_cast<const char*>(shape), sizeof shape);
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix read_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open " + path.string());
    std::uint64_t shape[2];
    in.read(reinterpret_cast<char*>(shape), sizeof shape);
    Matrix m(shape[0], shape[1]);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw UserError("truncated matrix file " + path.string());
    return m;
}

}  // namespace genplugin::semid
