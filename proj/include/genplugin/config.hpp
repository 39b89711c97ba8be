#pragma once

// Flat experiment configuration with strict JSON parsing.

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

namespace genplugin {

struct ExperimentConfig {
    std::uint64_t seed = 0;

    // loss
    double lambda1 = 0.5;   // item alignment
    double lambda2 = 0.85;  // user alignment
    double lambda3 = 0.5;   // mutual KL
    double tau = 0.07;
    double phi = 2.0;

    // semantic substitution
    double p1 = 0.6;
    double p2 = 0.5;
    std::size_t q = 5;

    // retrieval
    std::size_t z = 10;
    std::size_t v = 5;
    double bm25_k1 = 1.2;
    double bm25_b = 0.75;
    std::size_t collab_epochs = 20;

    // sequences and architecture
    std::size_t max_len = 20;  // m
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t ffn = 64;
    std::size_t layers = 2;
    std::size_t token_dim = 32;
    std::size_t proj_hidden = 64;

    // text embeddings
    std::string extractor = "hash";  // hash | file
    std::size_t ext_dim = 64;
    std::string vectors_file;

    // semantic ids
    std::size_t id_levels = 3;
    std::size_t id_vocab = 8;
    std::size_t kmeans_restarts = 4;
    std::size_t kmeans_iters = 100;

    // optimisation
    double lr = 0.002;
    double weight_decay = 0.01;
    double warmup_ratio = 0.01;
    std::string schedule = "cosine";  // cosine | constant
    std::size_t batch_size = 32;
    std::size_t max_epochs = 200;
    std::size_t patience = 20;
    std::size_t cuts_per_user = 1;  // training prefixes sampled per user per epoch
    double finetune_lr = 0.001;
    std::size_t finetune_epochs = 30;

    // variant switches
    bool dual_view = true;
    bool ssg = true;
    bool retrieval = true;
    bool finetune_ssg = false;
    std::string lan_prediction = "teacher_forced";  // teacher_forced | free_running (SSG substitutes)

    // inference and evaluation
    std::size_t beam = 20;
    std::size_t n_bins = 5;
    std::string popularity = "train";   // train | all
    std::string head_rounding = "round";  // round | floor

    // data
    std::string interactions;
    std::string items;
    bool five_core = true;
    std::size_t synth_users = 200;
    std::size_t synth_items = 100;
    std::size_t synth_clusters = 4;
    double synth_skew = 1.0;

    /// Throws ConfigError on out-of-range values.
    void validate() const;
};

/// Unknown keys and type mismatches throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// FNV-1a over the canonical (sorted-key) dump.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hex_hash(std::uint64_t h);

}  // namespace genplugin
