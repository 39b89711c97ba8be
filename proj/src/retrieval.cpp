#include "genplugin/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include "genplugin/errors.hpp"
#include "genplugin/kernels.hpp"
#include "genplugin/log.hpp"
#include "genplugin/nn.hpp"
#include "genplugin/optim.hpp"
#include "genplugin/textembed.hpp"

namespace genplugin::retrieval {
namespace {

void sort_scored(std::vector<ScoredUser>& v) {
    std::sort(v.begin(), v.end(), [](const ScoredUser& a, const ScoredUser& b) {
        return a.score > b.score || (a.score == b.score && a.user < b.user);
    });
}

}  // namespace

Bm25Index::Bm25Index(const std::vector<std::string>& documents, double k1, double b) : k1_(k1), b_(b) {
    std::size_t total = 0;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        const auto terms = textembed::tokenize(documents[d]);
        doc_len_.push_back(terms.size());
        total += terms.size();
        std::map<std::string, std::size_t> tf;
        for (const auto& t : terms) ++tf[t];
        std::vector<std::string> uniq;
        for (const auto& [t, f] : tf) {
            postings_[t].emplace_back(d, f);
            uniq.push_back(t);
        }
        doc_terms_.push_back(std::move(uniq));
    }
    avgdl_ = documents.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(documents.size());
}

double Bm25Index::idf(const std::string& term) const {
    auto it = postings_.find(term);
    const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(doc_len_.size());
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

double Bm25Index::score(const std::vector<std::string>& query_terms, std::size_t doc) const {
    std::set<std::string> uniq(query_terms.begin(), query_terms.end());
    const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(doc_len_.at(doc)) / std::max(avgdl_, 1e-12));
    double s = 0.0;
    for (const auto& t : uniq) {
        auto it = postings_.find(t);
        if (it == postings_.end()) continue;
        auto p = std::lower_bound(it->second.begin(), it->second.end(), std::make_pair(doc, std::size_t{0}));
        if (p == it->second.end() || p->first != doc) continue;
        const double f = static_cast<double>(p->second);
        s += idf(t) * f * (k1_ + 1.0) / (f + norm);
    }
    return s;
}

std::vector<std::string> Bm25Index::unique_terms(std::size_t doc) const { return doc_terms_.at(doc); }

std::vector<ScoredUser> Bm25Index::search(std::size_t target, std::size_t z) const {
    const auto query = unique_terms(target);
    if (query.empty()) {
        warn("empty pseudo-document for user " + std::to_string(target) + "; no content retrieval");
        return {};
    }
    std::vector<double> acc(doc_len_.size(), 0.0);
    for (const auto& t : query) {
        auto it = postings_.find(t);
        const double w = idf(t);
        for (const auto& [doc, tf] : it->second) {
            const double f = static_cast<double>(tf);
            const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(doc_len_[doc]) / std::max(avgdl_, 1e-12));
            acc[doc] += w * f * (k1_ + 1.0) / (f + norm);
        }
    }
    std::vector<ScoredUser> out;
    for (std::size_t d = 0; d < acc.size(); ++d)
        if (d != target) out.push_back({d, acc[d]});
    sort_scored(out);
    if (out.size() > z) out.resize(z);
    return out;
}

nlohmann::json Bm25Index::to_json() const {
    nlohmann::json post = nlohmann::json::object();
    for (const auto& [t, p] : postings_) post[t] = p;
    return {{"k1", k1_}, {"b", b_}, {"avgdl", avgdl_}, {"doc_len", doc_len_}, {"postings", post}};
}

Bm25Index Bm25Index::from_json(const nlohmann::json& j) {
    Bm25Index idx;
    idx.k1_ = j.at("k1").get<double>();
    idx.b_ = j.at("b").get<double>();
    idx.avgdl_ = j.at("avgdl").get<double>();
    idx.doc_len_ = j.at("doc_len").get<std::vector<std::size_t>>();
    idx.doc_terms_.assign(idx.doc_len_.size(), {});
    for (const auto& [t, p] : j.at("postings").items()) {
        idx.postings_[t] = p.get<std::vector<std::pair<std::size_t, std::size_t>>>();
        for (const auto& [doc, tf] : idx.postings_[t]) idx.doc_terms_.at(doc).push_back(t);
    }
    return idx;
}

std::vector<ScoredUser> collab_search(const Matrix& profiles, std::size_t target, std::size_t z) {
    if (target >= profiles.rows()) throw std::out_of_range("collab_search: unknown target");
    std::vector<double> sims;
    kernels::cosine_scores(profiles.row_span(target), profiles, sims);
    std::vector<ScoredUser> out;
    for (std::size_t u = 0; u < profiles.rows(); ++u)
        if (u != target) out.push_back({u, sims[u]});
    sort_scored(out);
    if (out.size() > z) out.resize(z);
    return out;
}

std::vector<ScoredUser> rerank(const std::vector<ScoredUser>& content, const std::vector<ScoredUser>& collab,
                               const Matrix& cached_q, std::size_t target, std::size_t v,
                               std::vector<std::size_t>* forced_out) {
    std::set<std::size_t> a, b;
    for (const auto& s : content) a.insert(s.user);
    for (const auto& s : collab) b.insert(s.user);
    std::set<std::size_t> all = a;
    all.insert(b.begin(), b.end());
    all.erase(target);

    const auto tq = cached_q.row_span(target);
    const double tn = kernels::norm(tq);
    std::vector<ScoredUser> scored, forced, rest;
    for (std::size_t u : all) {
        const auto uq = cached_q.row_span(u);
        const double un = kernels::norm(uq);
        const double cos = (tn == 0.0 || un == 0.0) ? 0.0 : kernels::dot(tq, uq) / (tn * un);
        (a.count(u) && b.count(u) ? forced : rest).push_back({u, cos});
    }
    if (forced_out) {
        forced_out->clear();
        for (const auto& f : forced) forced_out->push_back(f.user);
    }
    if (v > all.size()) warn("rerank: v exceeds the candidate union; returning all candidates");
    sort_scored(rest);
    scored = forced;
    for (const auto& r : rest) {
        if (scored.size() >= v) break;
        scored.push_back(r);
    }
    sort_scored(scored);
    return scored;
}

const Matrix& PreferenceCache::checked(std::uint64_t expected_hash) const {
    if (expected_hash != checkpoint_hash) {
        throw StaleCache("stale cache: built for checkpoint " + std::to_string(checkpoint_hash) + ", expected " +
                         std::to_string(expected_hash));
    }
    return q;
}

void write_cache(const std::filesystem::path& stem, const PreferenceCache& cache) {
    nlohmann::json header{{"checkpoint_hash", std::to_string(cache.checkpoint_hash)},
                          {"d", cache.q.cols()},
                          {"n_users", cache.q.rows()}};
    {
        std::ofstream h(stem.string() + ".json");
        if (!h) throw UserError("cannot write " + stem.string() + ".json");
        h << header.dump(2) << '\n';
    }
    std::ofstream b(stem.string() + ".f32", std::ios::binary);
    std::vector<float> buf(cache.q.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(cache.q[i]);
    b.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

PreferenceCache read_cache(const std::filesystem::path& stem, std::uint64_t expected_hash) {
    std::ifstream h(stem.string() + ".json");
    std::ifstream b(stem.string() + ".f32", std::ios::binary);
    if (!h || !b) throw MissingArtifact("preference cache not found at " + stem.string() + " (run build-retrieval)");
    const auto header = nlohmann::json::parse(h);
    PreferenceCache c;
    c.checkpoint_hash = std::stoull(header.at("checkpoint_hash").get<std::string>());
    if (c.checkpoint_hash != expected_hash) {
        throw StaleCache("stale cache: built for checkpoint " + std::to_string(c.checkpoint_hash) + ", expected " +
                         std::to_string(expected_hash));
    }
    const auto rows = header.at("n_users").get<std::size_t>();
    const auto cols = header.at("d").get<std::size_t>();
    std::vector<float> buf(rows * cols);
    b.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(b.gcount()) != buf.size() * sizeof(float)) throw UserError("truncated cache file");
    c.q = Matrix(rows, cols);
    for (std::size_t i = 0; i < buf.size(); ++i) c.q[i] = buf[i];
    return c;
}

Matrix train_collab_encoder(const std::vector<std::vector<std::size_t>>& train_sequences, std::size_t n_items,
                            const CollabConfig& cfg) {
    Rng init(cfg.seed, "collab-init");
    nn::ParameterStore store;
    const auto items = store.create("collab.items", nn::normal_matrix(n_items, cfg.d_model, 0.1, init));
    const auto pos = store.create("collab.positions", nn::normal_matrix(cfg.max_len, cfg.d_model, 0.02, init));
    nn::TransformerDims dims{cfg.d_model, cfg.heads, cfg.ffn, cfg.layers};
    const nn::TransformerEncoder enc(store, "collab.enc", dims, init);

    auto encode = [&](const std::vector<std::size_t>& seq) {
        const std::size_t start = seq.size() > cfg.max_len ? seq.size() - cfg.max_len : 0;
        std::vector<std::size_t> s(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end());
        const ag::Var x = ag::add(ag::gather_rows(items, s), ag::slice_rows(pos, 0, s.size()));
        return std::make_pair(enc(x, {}, true), s);
    };

    std::vector<std::size_t> order;
    for (std::size_t u = 0; u < train_sequences.size(); ++u)
        if (train_sequences[u].size() >= 2) order.push_back(u);
    const std::size_t steps_per_epoch = (order.size() + cfg.batch_size - 1) / std::max<std::size_t>(1, cfg.batch_size);
    const std::size_t total = steps_per_epoch * cfg.epochs;
    optim::AdamW opt(store.trainable(), {cfg.lr, 0.9, 0.999, 1e-8, 0.0});
    Rng shuffle(cfg.seed, "collab-shuffle");
    std::size_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs && !order.empty(); ++e) {
        std::shuffle(order.begin(), order.end(), shuffle.engine());
        for (std::size_t s0 = 0; s0 < order.size(); s0 += cfg.batch_size) {
            opt.zero_grad();
            ag::Var loss;
            std::size_t n = 0;
            for (std::size_t k = s0; k < std::min(order.size(), s0 + cfg.batch_size); ++k) {
                const auto& seq = train_sequences[order[k]];
                const std::vector<std::size_t> input(seq.begin(), seq.end() - 1);
                auto [h, s] = encode(input);
                const std::size_t off = (seq.size() - 1) - s.size();
                std::vector<std::size_t> targets(seq.begin() + 1 + static_cast<std::ptrdiff_t>(off), seq.end());
                const auto logits = ag::matmul(h, items, kernels::Trans::No, kernels::Trans::Yes);
                const auto ce = ag::scale(ag::cross_entropy(logits, targets), static_cast<double>(targets.size()));
                loss = loss ? ag::add(loss, ce) : ce;
                n += targets.size();
            }
            loss = ag::scale(loss, 1.0 / static_cast<double>(n));
            ag::backward(loss);
            opt.step(optim::cosine_lr(step++, total, 0.01, cfg.lr));
        }
    }

    nn::NoGrad guard;
    Matrix profiles(train_sequences.size(), cfg.d_model);
    for (std::size_t u = 0; u < train_sequences.size(); ++u) {
        if (train_sequences[u].empty()) continue;
        auto [h, s] = encode(train_sequences[u]);
        const auto last = h->value.row_span(h->value.rows() - 1);
        std::copy(last.begin(), last.end(), profiles.row_span(u).begin());
    }
    return profiles;
}

std::vector<RetrievalContext> build_contexts(const Bm25Index& bm25, const Matrix& profiles, const Matrix& cached_q,
                                             std::size_t z, std::size_t v) {
    const std::size_t n = profiles.rows();
    if (bm25.size() != n || cached_q.rows() != n) throw std::invalid_argument("build_contexts: user count mismatch");
    std::vector<RetrievalContext> out(n);
    const auto nn_ = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < nn_; ++i) {
        const auto u = static_cast<std::size_t>(i);
        auto& c = out[u];
        c.target = u;
        c.content = bm25.search(u, z);
        c.collab = collab_search(profiles, u, z);
        c.reranked = rerank(c.content, c.collab, cached_q, u, v, &c.forced);
    }
    return out;
}

nlohmann::json contexts_to_json(const std::vector<RetrievalContext>& contexts) {
    auto list = [](const std::vector<ScoredUser>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& s : v) a.push_back({s.user, s.score});
        return a;
    };
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : contexts) {
        out.push_back({{"target", c.target},
                       {"content", list(c.content)},
                       {"collab", list(c.collab)},
                       {"reranked", list(c.reranked)},
                       {"forced", c.forced}});
    }
    return out;
}

std::vector<RetrievalContext> contexts_from_json(const nlohmann::json& j) {
    auto list = [](const nlohmann::json& a) {
        std::vector<ScoredUser> v;
        for (const auto& e : a) v.push_back({e.at(0).get<std::size_t>(), e.at(1).get<double>()});
        return v;
    };
    std::vector<RetrievalContext> out;
    for (const auto& e : j) {
        RetrievalContext c;
        c.target = e.at("target").get<std::size_t>();
        c.content = list(e.at("content"));
        c.collab = list(e.at("collab"));
        c.reranked = list(e.at("reranked"));
        c.forced = e.at("forced").get<std::vector<std::size_t>>();
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace genplugin::retrieval
