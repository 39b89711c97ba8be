#include "genplugin/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "genplugin/errors.hpp"
#include "genplugin/rng.hpp"

namespace genplugin {
namespace {

using Reader = std::function<void(ExperimentConfig&, const nlohmann::json&)>;
using Writer = std::function<void(const ExperimentConfig&, nlohmann::json&)>;

struct Field {
    Reader read;
    Writer write;
};

template <typename T>
Field field(const std::string& key, T ExperimentConfig::*member) {
    Reader r = [key, member](ExperimentConfig& c, const nlohmann::json& v) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
        } else {
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
                throw ConfigError("config key '" + key + "' must be a non-negative integer");
            }
        }
        c.*member = v.get<T>();
    };
    Writer w = [key, member](const ExperimentConfig& c, nlohmann::json& out) { out[key] = c.*member; };
    return {r, w};
}

const std::map<std::string, Field>& fields() {
    using C = ExperimentConfig;
    static const std::map<std::string, Field> f = {
        {"seed", field("seed", &C::seed)},
        {"lambda1", field("lambda1", &C::lambda1)},
        {"lambda2", field("lambda2", &C::lambda2)},
        {"lambda3", field("lambda3", &C::lambda3)},
        {"tau", field("tau", &C::tau)},
        {"phi", field("phi", &C::phi)},
        {"p1", field("p1", &C::p1)},
        {"p2", field("p2", &C::p2)},
        {"q", field("q", &C::q)},
        {"z", field("z", &C::z)},
        {"v", field("v", &C::v)},
        {"bm25_k1", field("bm25_k1", &C::bm25_k1)},
        {"bm25_b", field("bm25_b", &C::bm25_b)},
        {"collab_epochs", field("collab_epochs", &C::collab_epochs)},
        {"max_len", field("max_len", &C::max_len)},
        {"d_model", field("d_model", &C::d_model)},
        {"heads", field("heads", &C::heads)},
        {"ffn", field("ffn", &C::ffn)},
        {"layers", field("layers", &C::layers)},
        {"token_dim", field("token_dim", &C::token_dim)},
        {"proj_hidden", field("proj_hidden", &C::proj_hidden)},
        {"extractor", field("extractor", &C::extractor)},
        {"ext_dim", field("ext_dim", &C::ext_dim)},
        {"vectors_file", field("vectors_file", &C::vectors_file)},
        {"id_levels", field("id_levels", &C::id_levels)},
        {"id_vocab", field("id_vocab", &C::id_vocab)},
        {"kmeans_restarts", field("kmeans_restarts", &C::kmeans_restarts)},
        {"kmeans_iters", field("kmeans_iters", &C::kmeans_iters)},
        {"lr", field("lr", &C::lr)},
        {"weight_decay", field("weight_decay", &C::weight_decay)},
        {"warmup_ratio", field("warmup_ratio", &C::warmup_ratio)},
        {"schedule", field("schedule", &C::schedule)},
        {"batch_size", field("batch_size", &C::batch_size)},
        {"max_epochs", field("max_epochs", &C::max_epochs)},
        {"patience", field("patience", &C::patience)},
        {"cuts_per_user", field("cuts_per_user", &C::cuts_per_user)},
        {"finetune_lr", field("finetune_lr", &C::finetune_lr)},
        {"finetune_epochs", field("finetune_epochs", &C::finetune_epochs)},
        {"dual_view", field("dual_view", &C::dual_view)},
        {"ssg", field("ssg", &C::ssg)},
        {"retrieval", field("retrieval", &C::retrieval)},
        {"finetune_ssg", field("finetune_ssg", &C::finetune_ssg)},
        {"lan_prediction", field("lan_prediction", &C::lan_prediction)},
        {"beam", field("beam", &C::beam)},
        {"n_bins", field("n_bins", &C::n_bins)},
        {"popularity", field("popularity", &C::popularity)},
        {"head_rounding", field("head_rounding", &C::head_rounding)},
        {"interactions", field("interactions", &C::interactions)},
        {"items", field("items", &C::items)},
        {"five_core", field("five_core", &C::five_core)},
        {"synth_users", field("synth_users", &C::synth_users)},
        {"synth_items", field("synth_items", &C::synth_items)},
        {"synth_clusters", field("synth_clusters", &C::synth_clusters)},
        {"synth_skew", field("synth_skew", &C::synth_skew)},
    };
    return f;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
    require(tau > 0.0, "tau must be > 0");
    require(phi > 0.0, "phi must be > 0");
    require(p1 >= 0.0 && p1 <= 1.0, "p1 must lie in [0,1]");
    require(p2 >= 0.0 && p2 <= 1.0, "p2 must lie in [0,1]");
    require(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0, "loss weights must be non-negative");
    require(q >= 1, "q must be >= 1");
    require(q <= id_vocab, "q must not exceed id_vocab");
    require(!ssg || dual_view, "ssg needs dual_view");
    require(!finetune_ssg || dual_view, "finetune_ssg needs dual_view");
    require(patience >= 1, "patience must be >= 1");
    require(max_len >= 1, "max_len must be >= 1");
    require(d_model >= 1 && heads >= 1 && d_model % heads == 0, "d_model must be a positive multiple of heads");
    require(layers >= 1 && ffn >= 1 && token_dim >= 1 && proj_hidden >= 1, "architecture sizes must be positive");
    require(id_levels >= 1 && id_vocab >= 2, "id_levels >= 1 and id_vocab >= 2 required");
    require(kmeans_restarts >= 1, "kmeans_restarts must be >= 1");
    require(lr > 0.0 && finetune_lr > 0.0, "learning rates must be > 0");
    require(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, "warmup_ratio must lie in [0,1]");
    require(schedule == "cosine" || schedule == "constant", "schedule must be cosine or constant");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(cuts_per_user >= 1, "cuts_per_user must be >= 1");
    require(beam >= 10, "beam must be >= 10");
    require(n_bins >= 1, "n_bins must be >= 1");
    require(extractor == "hash" || extractor == "file", "extractor must be hash or file");
    require(extractor != "file" || !vectors_file.empty(), "extractor=file needs vectors_file");
    require(ext_dim >= 1, "ext_dim must be >= 1");
    require(popularity == "train" || popularity == "all", "popularity must be train or all");
    require(head_rounding == "round" || head_rounding == "floor", "head_rounding must be round or floor");
    require(lan_prediction == "teacher_forced" || lan_prediction == "free_running",
            "lan_prediction must be teacher_forced or free_running");
    require(synth_skew >= 0.0, "synth_skew must be >= 0");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ExperimentConfig cfg;
    const auto& f = fields();
    for (const auto& [key, value] : j.items()) {
        auto it = f.find(key);
        if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->second.read(cfg, value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [key, f] : fields()) f.write(cfg, out);
    return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg).dump()); }

std::string hex_hash(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace genplugin
