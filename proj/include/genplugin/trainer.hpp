#pragma once

// Model assembly, the combined pre-training objective, the two training stages
// and retrieval-augmented inference.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "genplugin/config.hpp"
#include "genplugin/corpus.hpp"
#include "genplugin/encoders.hpp"
#include "genplugin/retrieval.hpp"
#include "genplugin/semid.hpp"
#include "genplugin/ssg_decoder.hpp"
#include "genplugin/textembed.hpp"

namespace genplugin::trainer {

using ag::Var;

/// Everything derived from the corpus before any model is trained.
struct Dataset {
    corpus::Corpus corpus;
    corpus::SplitDataset split;
    corpus::Partition partition;
    Matrix embeddings;  // frozen extractor output, one row per item
    semid::SemanticIds ids;
};

corpus::SplitDataset make_split(const corpus::Corpus& corpus, const ExperimentConfig& cfg);
semid::SemanticIds make_ids(const Matrix& embeddings, const ExperimentConfig& cfg,
                            semid::Codebooks* codebooks = nullptr);
textembed::ExtractorConfig extractor_config(const ExperimentConfig& cfg);
/// Split, embeddings and semantic IDs in one pass (no disk caching).
Dataset prepare_dataset(corpus::Corpus corpus, const ExperimentConfig& cfg);

/// Parameter name prefixes.
inline constexpr const char* kProjector = "proj.";
inline constexpr const char* kLanguageEncoder = "lan_enc.";
inline constexpr const char* kIdEncoder = "id_enc.";
inline constexpr const char* kDecoder = "dec.";

/// Projection net, both encoders and the shared decoder. Keeps a reference
/// to the dataset, which must outlive it.
class GenPluginModel {
public:
    GenPluginModel(const ExperimentConfig& cfg, const Dataset& data);

    nn::ParameterStore& store() { return store_; }
    const nn::ParameterStore& store() const { return store_; }
    const ssg::SharedDecoder& decoder() const { return decoder_; }
    const semid::SemanticIds& ids() const { return data_->ids; }
    const Dataset& data() const { return *data_; }
    const semid::TokenTuple& tokens(std::size_t item) const { return data_->ids.ids.at(item); }

    Var encode_language(std::span<const std::size_t> items) const;
    Var encode_id(std::span<const std::size_t> items) const;
    /// q_u: mean-pooled ID-view encoding.
    Var preference(std::span<const std::size_t> items) const;

    /// Checksum over projector and both encoders.
    std::uint64_t encoder_checksum() const;
    void set_encoders_trainable(bool trainable);

private:
    const Dataset* data_;
    nn::ParameterStore store_;
    textembed::Projector projector_;
    encoders::LanguageEncoder language_;
    encoders::IdEncoder id_;
    ssg::SharedDecoder decoder_;
};

struct CheckpointInfo {
    std::string stage;
    std::uint64_t config_hash = 0;
    std::uint64_t checksum = 0;
};

/// Binary archive: header (stage tag, config hash) then every named parameter.
void save_checkpoint(const std::filesystem::path& path, const GenPluginModel& model, const std::string& stage,
                     std::uint64_t config_hash);
/// Loads values into a model of matching architecture.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, GenPluginModel& model);

struct Example {
    std::size_t user = 0;
    std::vector<std::size_t> input;
    std::size_t target = 0;
};

/// `cuts` random (prefix → next item) examples per user drawn from the train split.
std::vector<Example> sample_examples(const corpus::SplitDataset& split, std::size_t cuts, std::size_t max_len,
                                     Rng& rng);
/// train → valid.
std::vector<Example> validation_examples(const corpus::SplitDataset& split, std::size_t max_len);
/// train + valid → test.
std::vector<Example> test_examples(const corpus::SplitDataset& split, std::size_t max_len);

/// Substitution decisions of one example, recorded so a pass can be replayed.
struct SsgDraw {
    ssg::SubstitutionPlan plan;
    std::vector<ssg::RefinedDistribution> refined;
};

struct LossTerms {
    Var lan, id, item, user, kl;
};

struct LossBreakdown {
    double lan = 0.0, id = 0.0, item = 0.0, user = 0.0, kl = 0.0, total = 0.0;
};

/// Components of the pre-training objective over a batch. With `draws`
/// non-empty the recorded substitutions are replayed instead of sampled.
LossTerms loss_terms(const GenPluginModel& model, std::span<const Example> batch, const ExperimentConfig& cfg,
                     Rng& substitution, std::vector<SsgDraw>* draws = nullptr);
/// L^lan + L^id + λ1·L_item + λ2·L_user + λ3·L_KL.
Var weighted_total(const LossTerms& terms, const ExperimentConfig& cfg);
/// Throws NonFiniteLoss naming the first non-finite term.
LossBreakdown breakdown(const LossTerms& terms, const ExperimentConfig& cfg);

/// Retrieval artifacts attached to a checkpoint.
struct RetrievalState {
    retrieval::Bm25Index bm25;
    Matrix profiles;
    retrieval::PreferenceCache cache;
    std::vector<retrieval::RetrievalContext> contexts;
};

RetrievalState build_retrieval(const GenPluginModel& model, const ExperimentConfig& cfg);
/// Preference vectors of every user's train split, rounded to float32.
Matrix preference_matrix(const GenPluginModel& model);

/// Retrieved users whose cached vectors join the memory: intersection users
/// first, then by re-rank score, at most v.
std::vector<std::size_t> memory_users(const retrieval::RetrievalContext& ctx, std::size_t v);

/// Decoder memory for one sequence, optionally augmented with retrieved rows.
nn::ProjectedMemory decoder_memory(const GenPluginModel& model, std::span<const std::size_t> items,
                                   const Matrix* cached_q = nullptr, std::span<const std::size_t> retrieved = {});

struct EpochLog {
    std::size_t epoch = 0;
    LossBreakdown train;
    double valid = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_valid = 0.0;
    bool early_stopped = false;
};

/// Epoch 0 is the untrained model. Early stopping on validation L^id; the best
/// parameters are restored before returning (or before a NonFiniteLoss escapes).
TrainResult pretrain(GenPluginModel& model, const ExperimentConfig& cfg);

/// Freezes the encoders and tunes the decoder on L^id with retrieval-augmented
/// memory. Throws StaleCache when the cache belongs to other encoder weights.
TrainResult finetune(GenPluginModel& model, const RetrievalState& retrieval, const ExperimentConfig& cfg);

/// Batch L^id of one fine-tuning step: memory holds the sequence encoding plus
/// the cached preference rows of up to cfg.v retrieved users.
Var finetune_loss(const GenPluginModel& model, std::span<const Example> batch, const RetrievalState& retrieval,
                  const ExperimentConfig& cfg, Rng& substitution);

/// Mean teacher-forced L^id over examples, no gradients.
double evaluate_id_loss(const GenPluginModel& model, std::span<const Example> examples,
                        const RetrievalState* retrieval, std::size_t v);

/// Ranked item lists (beam order) for every user's test example.
std::vector<std::vector<std::size_t>> infer(const GenPluginModel& model, const RetrievalState* retrieval,
                                            const ExperimentConfig& cfg);

std::string log_csv(const TrainResult& result);

}  // namespace genplugin::trainer
