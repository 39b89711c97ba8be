#pragma once

// Tiny corpora and model configs shared by the trainer tests and the acceptance suite.

#include "genplugin/trainer.hpp"

namespace toy {

using namespace genplugin;

inline ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.ffn = 8;
    c.layers = 1;
    c.token_dim = 4;
    c.proj_hidden = 8;
    c.ext_dim = 8;
    c.id_levels = 2;
    c.id_vocab = 2;
    c.q = 2;
    c.batch_size = 4;
    c.z = 1;
    c.v = 1;
    c.collab_epochs = 2;
    c.max_epochs = 2;
    c.finetune_epochs = 2;
    return c;
}

// Two users over three items.
inline corpus::Corpus two_user_corpus() {
    std::vector<corpus::ItemMeta> meta{{"a", "red shoe", "leather"}, {"b", "blue hat", "wool"},
                                       {"c", "green scarf", "silk soft"}};
    std::vector<corpus::Interaction> rows;
    const std::vector<std::vector<int>> seqs{{0, 1, 2, 0}, {1, 2, 0, 1}};
    for (std::size_t u = 0; u < seqs.size(); ++u)
        for (std::size_t t = 0; t < seqs[u].size(); ++t)
            rows.push_back({"u" + std::to_string(u), meta[static_cast<std::size_t>(seqs[u][t])].item_id,
                            static_cast<std::int64_t>(t)});
    return corpus::build_corpus(rows, meta);
}

inline std::vector<trainer::Example> two_user_batch() { return {{0, {0, 1}, 2}, {1, {1, 2}, 0}}; }

inline std::vector<ag::Var> trainable(const trainer::GenPluginModel& m) { return m.store().trainable(); }

// Small synthetic corpus after 5-core filtering.
inline corpus::Corpus small_synthetic(std::uint64_t seed, std::size_t users = 60, std::size_t items = 30) {
    corpus::SynthParams p;
    p.seed = seed;
    p.n_users = users;
    p.n_items = items;
    return corpus::five_core_filter(corpus::synth_generate(p));
}

inline ExperimentConfig small_config() {
    ExperimentConfig c;
    c.d_model = 16;
    c.heads = 2;
    c.ffn = 32;
    c.layers = 1;
    c.token_dim = 8;
    c.proj_hidden = 16;
    c.ext_dim = 32;
    c.id_levels = 2;
    c.id_vocab = 4;
    c.q = 3;
    c.batch_size = 16;
    c.collab_epochs = 2;
    c.max_epochs = 3;
    c.finetune_epochs = 2;
    c.beam = 10;
    return c;
}

}  // namespace toy
