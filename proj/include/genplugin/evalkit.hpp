#pragma once

// Ranking metrics, head/tail and popularity-bin reports, and the
// exposure-bias probe.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "genplugin/nn.hpp"
#include "genplugin/semid.hpp"
#include "genplugin/ssg_decoder.hpp"
#include "json.hpp"

namespace genplugin::evalkit {

/// 1 iff `target` is among the first k entries. Throws for k <= 0.
double hit_at_k(std::span<const std::size_t> ranked, std::size_t target, int k);
/// Binary-gain NDCG for a single relevant item: 1/log2(rank+1) within the top k.
double ndcg_at_k(std::span<const std::size_t> ranked, std::size_t target, int k);

struct UserMetrics {
    double h5 = 0.0, h10 = 0.0, n5 = 0.0, n10 = 0.0;
};

std::vector<UserMetrics> per_user_metrics(const std::vector<std::vector<std::size_t>>& rankings,
                                          std::span<const std::size_t> targets);

struct GroupMetrics {
    std::size_t n = 0;
    double h5 = 0.0, h10 = 0.0, n5 = 0.0, n10 = 0.0;
};

struct PopularityBin {
    double lo = 0.0, hi = 0.0;  // edges on log(1 + popularity)
    std::size_t n = 0;
    std::optional<double> h10;
};

struct MetricsReport {
    std::size_t n_users = 0;
    GroupMetrics overall;
    std::optional<GroupMetrics> head, tail;  // absent when the group is empty
    std::vector<PopularityBin> bins;
};

/// Users are grouped by the popularity of their test target. Bins are equal
/// width on log(1 + popularity) between the smallest and largest target value.
MetricsReport group_report(std::span<const UserMetrics> users, std::span<const std::size_t> targets,
                           std::span<const std::size_t> popularity, const std::vector<bool>& is_head,
                           std::size_t n_bins);

nlohmann::json report_json(const MetricsReport& report);
std::string report_csv(const MetricsReport& report);

struct ExposureProbe {
    std::vector<double> teacher_forced;  // per level accuracy
    std::vector<double> free_running;
    std::vector<double> gap;             // teacher_forced - free_running
    std::size_t n_users = 0;

    /// Mean gap over levels 2..L (index 1 onward).
    double mean_gap() const;
};

/// Per-level argmax accuracy with ground-truth prefixes versus the model's own
/// greedy prefixes (unconstrained).
ExposureProbe exposure_probe(const ssg::SharedDecoder& decoder, std::span<const nn::ProjectedMemory> memories,
                             std::span<const semid::TokenTuple> targets);

nlohmann::json probe_json(const ExposureProbe& probe);

}  // namespace genplugin::evalkit
