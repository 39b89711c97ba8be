#include "genplugin/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace genplugin::evalkit {
namespace {

std::size_t rank_of(std::span<const std::size_t> ranked, std::size_t target, int k) {
    if (k <= 0) throw std::invalid_argument("metric cutoff k must be positive");
    const auto limit = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < limit; ++r)
        if (ranked[r] == target) return r + 1;
    return 0;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

GroupMetrics aggregate(std::span<const UserMetrics> users, const std::vector<std::size_t>& members) {
    GroupMetrics g;
    g.n = members.size();
    for (std::size_t u : members) {
        g.h5 += users[u].h5;
        g.h10 += users[u].h10;
        g.n5 += users[u].n5;
        g.n10 += users[u].n10;
    }
    if (g.n > 0) {
        const double inv = 1.0 / static_cast<double>(g.n);
        g.h5 *= inv;
        g.h10 *= inv;
        g.n5 *= inv;
        g.n10 *= inv;
    }
    return g;
}

nlohmann::json group_json(const std::optional<GroupMetrics>& g) {
    if (!g) return nullptr;
    return {{"n", g->n}, {"H@5", g->h5}, {"H@10", g->h10}, {"N@5", g->n5}, {"N@10", g->n10}};
}

}  // namespace

double hit_at_k(std::span<const std::size_t> ranked, std::size_t target, int k) {
    return rank_of(ranked, target, k) > 0 ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const std::size_t> ranked, std::size_t target, int k) {
    const std::size_t r = rank_of(ranked, target, k);
    return r == 0 ? 0.0 : 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

std::vector<UserMetrics> per_user_metrics(const std::vector<std::vector<std::size_t>>& rankings,
                                          std::span<const std::size_t> targets) {
    if (rankings.size() != targets.size()) throw std::invalid_argument("per_user_metrics: size mismatch");
    std::vector<UserMetrics> out(rankings.size());
    for (std::size_t u = 0; u < rankings.size(); ++u) {
        const auto& r = rankings[u];
        out[u] = {hit_at_k(r, targets[u], 5), hit_at_k(r, targets[u], 10), ndcg_at_k(r, targets[u], 5),
                  ndcg_at_k(r, targets[u], 10)};
    }
    return out;
}

MetricsReport group_report(std::span<const UserMetrics> users, std::span<const std::size_t> targets,
                           std::span<const std::size_t> popularity, const std::vector<bool>& is_head,
                           std::size_t n_bins) {
    if (users.size() != targets.size()) throw std::invalid_argument("group_report: size mismatch");
    if (n_bins == 0) throw std::invalid_argument("group_report: n_bins must be positive");
    MetricsReport rep;
    rep.n_users = users.size();
    std::vector<std::size_t> all(users.size()), head, tail;
    for (std::size_t u = 0; u < users.size(); ++u) {
        all[u] = u;
        (is_head.at(targets[u]) ? head : tail).push_back(u);
    }
    rep.overall = aggregate(users, all);
    if (!head.empty()) rep.head = aggregate(users, head);
    if (!tail.empty()) rep.tail = aggregate(users, tail);

    if (users.empty()) return rep;
    std::vector<double> x(users.size());
    for (std::size_t u = 0; u < users.size(); ++u) x[u] = std::log1p(static_cast<double>(popularity[targets[u]]));
    const double lo = *std::min_element(x.begin(), x.end());
    const double hi = *std::max_element(x.begin(), x.end());
    const double width = (hi - lo) / static_cast<double>(n_bins);
    std::vector<std::vector<std::size_t>> members(n_bins);
    for (std::size_t u = 0; u < users.size(); ++u) {
        std::size_t b = width > 0.0 ? static_cast<std::size_t>((x[u] - lo) / width) : 0;
        members[std::min(b, n_bins - 1)].push_back(u);
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
        PopularityBin bin;
        bin.lo = lo + width * static_cast<double>(b);
        bin.hi = b + 1 == n_bins ? hi : lo + width * static_cast<double>(b + 1);
        bin.n = members[b].size();
        if (bin.n > 0) bin.h10 = aggregate(users, members[b]).h10;
        rep.bins.push_back(bin);
    }
    return rep;
}

nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : r.bins) {
        bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"n", b.n}, {"H@10", b.h10 ? nlohmann::json(*b.h10) : nullptr}});
    }
    return {{"n_users", r.n_users},
            {"overall", group_json(r.overall)},
            {"head", group_json(r.head)},
            {"tail", group_json(r.tail)},
            {"popularity_bins", bins}};
}

std::string report_csv(const MetricsReport& r) {
    std::ostringstream out;
    out.precision(8);
    out << "group,n,H@5,H@10,N@5,N@10\n";
    auto row = [&](const std::string& name, const std::optional<GroupMetrics>& g) {
        if (!g) {
            out << name << ",0,,,,\n";
            return;
        }
        out << name << ',' << g->n << ',' << g->h5 << ',' << g->h10 << ',' << g->n5 << ',' << g->n10 << '\n';
    };
    row("overall", r.overall);
    row("head", r.head);
    row("tail", r.tail);
    for (std::size_t b = 0; b < r.bins.size(); ++b) {
        const auto& bin = r.bins[b];
        out << "bin" << b << "[" << bin.lo << ";" << bin.hi << "]," << bin.n << ",,";
        if (bin.h10) out << *bin.h10;
        out << ",,\n";
    }
    return out.str();
}

double ExposureProbe::mean_gap() const {
    if (gap.size() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t l = 1; l < gap.size(); ++l) s += gap[l];
    return s / static_cast<double>(gap.size() - 1);
}

ExposureProbe exposure_probe(const ssg::SharedDecoder& decoder, std::span<const nn::ProjectedMemory> memories,
                             std::span<const semid::TokenTuple> targets) {
    if (memories.size() != targets.size()) throw std::invalid_argument("exposure_probe: size mismatch");
    const std::size_t L = decoder.id_length();
    std::vector<std::vector<std::uint8_t>> tf(memories.size()), fr(memories.size());
    const auto n = static_cast<std::ptrdiff_t>(memories.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        nn::NoGrad ng;
        const auto& target = targets[u];
        const auto logits = decoder.decode_teacher_forced(memories[u], target);
        const auto greedy = ssg::greedy_decode(decoder, memories[u]);
        tf[u].resize(L);
        fr[u].resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            tf[u][l] = argmax(logits[l]->value.span()) == target[l];
            fr[u][l] = greedy[l] == target[l];
        }
    }
    ExposureProbe p;
    p.n_users = memories.size();
    p.teacher_forced.assign(L, 0.0);
    p.free_running.assign(L, 0.0);
    for (std::size_t u = 0; u < memories.size(); ++u) {
        for (std::size_t l = 0; l < L; ++l) {
            p.teacher_forced[l] += tf[u][l];
            p.free_running[l] += fr[u][l];
        }
    }
    for (std::size_t l = 0; l < L; ++l) {
        if (p.n_users > 0) {
            p.teacher_forced[l] /= static_cast<double>(p.n_users);
            p.free_running[l] /= static_cast<double>(p.n_users);
        }
        p.gap.push_back(p.teacher_forced[l] - p.free_running[l]);
    }
    return p;
}

nlohmann::json probe_json(const ExposureProbe& p) {
    return {{"n_users", p.n_users},
            {"teacher_forced", p.teacher_forced},
            {"free_running", p.free_running},
            {"gap", p.gap},
            {"mean_gap_levels_2_plus", p.mean_gap()}};
}

}  // namespace genplugin::evalkit
