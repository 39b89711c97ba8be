#include "genplugin/pipeline.hpp"

#include <cstdio>

namespace genplugin::pipeline {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Backbone: return "none";
        case Variant::Dsa: return "DSA";
        case Variant::DsaSsg: return "DSA+SSG";
        case Variant::Full: return "DSA+SSG+RAR";
    }
    return "?";
}

ExperimentConfig variant_config(ExperimentConfig cfg, Variant v) {
    cfg.dual_view = v != Variant::Backbone;
    cfg.ssg = v == Variant::DsaSsg || v == Variant::Full;
    cfg.retrieval = v == Variant::Full;
    if (!cfg.ssg) cfg.lambda3 = 0.0;
    if (!cfg.dual_view) cfg.finetune_ssg = false;
    return cfg;
}

evalkit::MetricsReport evaluate(const trainer::GenPluginModel& model,
                                const std::vector<std::vector<std::size_t>>& rankings, std::size_t n_bins) {
    const auto& split = model.data().split;
    std::vector<std::size_t> targets;
    for (const auto& u : split.users) targets.push_back(u.test);
    const auto users = evalkit::per_user_metrics(rankings, targets);
    return evalkit::group_report(users, targets, split.popularity, split.is_head, n_bins);
}

evalkit::ExposureProbe probe(const trainer::GenPluginModel& model, const ExperimentConfig& cfg) {
    const auto examples = trainer::test_examples(model.data().split, cfg.max_len);
    std::vector<nn::ProjectedMemory> memories;
    std::vector<semid::TokenTuple> targets;
    nn::NoGrad ng;
    for (const auto& ex : examples) {
        memories.push_back(trainer::decoder_memory(model, ex.input));
        targets.push_back(model.tokens(ex.target));
    }
    return evalkit::exposure_probe(model.decoder(), memories, targets);
}

std::vector<VariantResult> run_ablation(const trainer::Dataset& data, const ExperimentConfig& base) {
    std::vector<VariantResult> rows;
    for (Variant v : {Variant::Backbone, Variant::Dsa, Variant::DsaSsg}) {
        const auto cfg = variant_config(base, v);
        trainer::GenPluginModel model(cfg, data);
        VariantResult r;
        r.variant = v;
        r.pretrain = trainer::pretrain(model, cfg);
        r.probe = probe(model, cfg);
        r.rankings = trainer::infer(model, nullptr, cfg);
        r.report = evaluate(model, r.rankings, cfg.n_bins);
        rows.push_back(std::move(r));

        if (v == Variant::DsaSsg) {
            const auto full = variant_config(base, Variant::Full);
            const auto retrieval = trainer::build_retrieval(model, full);
            VariantResult f;
            f.variant = Variant::Full;
            f.pretrain = rows.back().pretrain;
            f.probe = rows.back().probe;
            f.finetune = trainer::finetune(model, retrieval, full);
            f.rankings = trainer::infer(model, &retrieval, full);
            f.report = evaluate(model, f.rankings, full.n_bins);
            rows.push_back(std::move(f));
        }
    }
    return rows;
}

std::string ablation_table(const std::vector<VariantResult>& rows) {
    std::string out = "variant       H@5     H@10    N@5     N@10    tail-H@10  head-H@10\n";
    char buf[160];
    for (const auto& r : rows) {
        const auto& o = r.report.overall;
        const double tail = r.report.tail ? r.report.tail->h10 : 0.0;
        const double head = r.report.head ? r.report.head->h10 : 0.0;
        std::snprintf(buf, sizeof buf, "%-12s  %.4f  %.4f  %.4f  %.4f  %.4f     %.4f\n",
                      variant_name(r.variant).c_str(), o.h5, o.h10, o.n5, o.n10, tail, head);
        out += buf;
    }
    return out;
}

nlohmann::json ablation_json(const std::vector<VariantResult>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"variant", variant_name(r.variant)},
                       {"report", evalkit::report_json(r.report)},
                       {"probe", evalkit::probe_json(r.probe)},
                       {"best_epoch", r.pretrain.best_epoch}});
    }
    return out;
}

}  // namespace genplugin::pipeline
