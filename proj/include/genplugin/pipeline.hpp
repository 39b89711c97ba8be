#pragma once

// Variant presets and the end-to-end ablation grid.

#include <optional>
#include <string>
#include <vector>

#include "genplugin/evalkit.hpp"
#include "genplugin/trainer.hpp"

namespace genplugin::pipeline {

enum class Variant { Backbone, Dsa, DsaSsg, Full };

inline constexpr Variant kAllVariants[] = {Variant::Backbone, Variant::Dsa, Variant::DsaSsg, Variant::Full};

std::string variant_name(Variant v);
/// Switches dual_view / ssg / retrieval (and zeroes λ3 without SSG).
ExperimentConfig variant_config(ExperimentConfig base, Variant v);

evalkit::MetricsReport evaluate(const trainer::GenPluginModel& model,
                                const std::vector<std::vector<std::size_t>>& rankings, std::size_t n_bins);
/// Probe over every user's test example with ID-view memory.
evalkit::ExposureProbe probe(const trainer::GenPluginModel& model, const ExperimentConfig& cfg);

struct VariantResult {
    Variant variant = Variant::Backbone;
    trainer::TrainResult pretrain;
    std::optional<trainer::TrainResult> finetune;
    evalkit::MetricsReport report;
    evalkit::ExposureProbe probe;
    std::vector<std::vector<std::size_t>> rankings;
};

/// All four rows. The full variant fine-tunes the DSA+SSG checkpoint.
std::vector<VariantResult> run_ablation(const trainer::Dataset& data, const ExperimentConfig& base);

/// Comparison table, one row per variant.
std::string ablation_table(const std::vector<VariantResult>& rows);
nlohmann::json ablation_json(const std::vector<VariantResult>& rows);

}  // namespace genplugin::pipeline
