#include "genplugin/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "genplugin/errors.hpp"
#include "genplugin/log.hpp"
#include "genplugin/optim.hpp"

namespace genplugin::trainer {
namespace {

Var zero() { return ag::constant(Matrix(1, 1, 0.0)); }

std::vector<std::size_t> tail(const std::vector<std::size_t>& seq, std::size_t end, std::size_t max_len) {
    const std::size_t begin = end > max_len ? end - max_len : 0;
    return {seq.begin() + static_cast<std::ptrdiff_t>(begin), seq.begin() + static_cast<std::ptrdiff_t>(end)};
}

Var mean_of(const std::vector<Var>& parts) {
    if (parts.empty()) return zero();
    Var acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = ag::add(acc, parts[i]);
    return ag::scale(acc, 1.0 / static_cast<double>(parts.size()));
}

std::vector<Matrix> snapshot(const nn::ParameterStore& store) {
    std::vector<Matrix> out;
    for (const auto& [name, p] : store.entries()) out.push_back(p->value);
    return out;
}

void restore(nn::ParameterStore& store, const std::vector<Matrix>& values) {
    std::size_t i = 0;
    for (const auto& [name, p] : store.entries()) p->value = values[i++];
}

encoders::EncoderConfig encoder_config(const ExperimentConfig& cfg) {
    encoders::EncoderConfig e;
    e.dims = {cfg.d_model, cfg.heads, cfg.ffn, cfg.layers};
    e.max_items = cfg.max_len;
    e.token_dim = cfg.token_dim;
    return e;
}

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw UserError("truncated checkpoint");
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
    const auto n = get<std::uint64_t>(in);
    if (n > (1u << 20)) throw UserError("corrupt checkpoint");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw UserError("truncated checkpoint");
    return s;
}

constexpr char kMagic[8] = {'G', 'P', 'C', 'K', 'P', 'T', '0', '1'};

double lr_at(const ExperimentConfig& cfg, double base, std::size_t step, std::size_t total) {
    if (cfg.schedule == "constant") return base;
    return optim::cosine_lr(step, total, cfg.warmup_ratio, base);
}

template <typename StepFn>
TrainResult run_epochs(GenPluginModel& model, const ExperimentConfig& cfg, std::size_t max_epochs, double base_lr,
                       const std::vector<Var>& params, const RetrievalState* retrieval, const char* stream,
                       StepFn&& step_loss) {
    const auto& split = model.data().split;
    Rng data(cfg.seed, stream);
    const auto valid = validation_examples(split, cfg.max_len);
    std::size_t per_epoch = 0;
    for (const auto& u : split.users) per_epoch += u.train.size() >= 2 ? cfg.cuts_per_user : 0;
    const std::size_t steps = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps * max_epochs;

    optim::AdamW opt(params, {base_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    TrainResult result;
    EpochLog first;
    first.valid = evaluate_id_loss(model, valid, retrieval, cfg.v);
    first.lr = lr_at(cfg, base_lr, 0, total);
    {
        nn::NoGrad ng;
        auto sample = sample_examples(split, cfg.cuts_per_user, cfg.max_len, data);
        std::span<const Example> all(sample);
        first.train = step_loss(all.first(std::min(all.size(), cfg.batch_size)));
    }
    result.log.push_back(first);
    result.best_valid = first.valid;
    auto best = snapshot(model.store());
    std::size_t stale = 0, step = 0;

    for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
        auto examples = sample_examples(split, cfg.cuts_per_user, cfg.max_len, data);
        std::shuffle(examples.begin(), examples.end(), data.engine());
        EpochLog row;
        row.epoch = epoch;
        row.lr = lr_at(cfg, base_lr, step, total);
        std::size_t seen = 0;
        for (std::size_t b = 0; b < examples.size(); b += cfg.batch_size) {
            std::span<const Example> batch(examples.data() + b, std::min(cfg.batch_size, examples.size() - b));
            opt.zero_grad();
            LossBreakdown bd;
            try {
                bd = step_loss(batch);
            } catch (const NonFiniteLoss&) {
                restore(model.store(), best);
                throw;
            }
            opt.step(lr_at(cfg, base_lr, step++, total));
            const double w = static_cast<double>(batch.size());
            row.train.lan += w * bd.lan;
            row.train.id += w * bd.id;
            row.train.item += w * bd.item;
            row.train.user += w * bd.user;
            row.train.kl += w * bd.kl;
            row.train.total += w * bd.total;
            seen += batch.size();
        }
        if (seen > 0) {
            const double inv = 1.0 / static_cast<double>(seen);
            for (double* x : {&row.train.lan, &row.train.id, &row.train.item, &row.train.user, &row.train.kl,
                              &row.train.total}) {
                *x *= inv;
            }
        }
        row.valid = evaluate_id_loss(model, valid, retrieval, cfg.v);
        if (!std::isfinite(row.valid)) {
            restore(model.store(), best);
            throw NonFiniteLoss("validation L^id");
        }
        result.log.push_back(row);
        if (row.valid < result.best_valid) {
            result.best_valid = row.valid;
            result.best_epoch = epoch;
            best = snapshot(model.store());
            stale = 0;
        } else if (++stale >= cfg.patience) {
            result.early_stopped = true;
            break;
        }
    }
    restore(model.store(), best);
    return result;
}

}  // namespace

corpus::SplitDataset make_split(const corpus::Corpus& corpus, const ExperimentConfig& cfg) {
    const auto mode = cfg.popularity == "all" ? corpus::PopularityMode::AllInteractions : corpus::PopularityMode::TrainOnly;
    const auto rounding = cfg.head_rounding == "floor" ? corpus::HeadRounding::Floor : corpus::HeadRounding::Round;
    return corpus::split_leave_one_out(corpus, cfg.max_len, mode, rounding);
}

semid::SemanticIds make_ids(const Matrix& embeddings, const ExperimentConfig& cfg, semid::Codebooks* out) {
    semid::KMeansOptions opts;
    opts.max_iters = cfg.kmeans_iters;
    opts.restarts = cfg.kmeans_restarts;
    auto codebooks = semid::fit_codebooks(embeddings, cfg.id_levels, cfg.id_vocab, cfg.seed, opts);
    auto ids = semid::assign_ids(codebooks, embeddings);
    if (out) *out = std::move(codebooks);
    return ids;
}

textembed::ExtractorConfig extractor_config(const ExperimentConfig& cfg) {
    textembed::ExtractorConfig e;
    e.kind = cfg.extractor == "file" ? textembed::ExtractorKind::FileLoaded : textembed::ExtractorKind::DeterministicHash;
    e.dim = cfg.ext_dim;
    e.seed = cfg.seed;
    e.vectors_file = cfg.vectors_file;
    return e;
}

Dataset prepare_dataset(corpus::Corpus corpus, const ExperimentConfig& cfg) {
    Dataset d;
    d.corpus = std::move(corpus);
    d.split = make_split(d.corpus, cfg);
    d.partition = corpus::head_tail_partition(d.split);
    d.embeddings = textembed::extract(d.corpus.items, extractor_config(cfg));
    d.ids = make_ids(d.embeddings, cfg);
    return d;
}

GenPluginModel::GenPluginModel(const ExperimentConfig& cfg, const Dataset& data) : data_(&data) {
    Rng init(cfg.seed, "init");
    const auto ecfg = encoder_config(cfg);
    projector_ = textembed::Projector(store_, "proj", data.embeddings.cols(), cfg.d_model, cfg.proj_hidden, init);
    language_ = encoders::LanguageEncoder(store_, "lan_enc", ecfg, init);
    id_ = encoders::IdEncoder(store_, "id_enc", ecfg, data.ids, init);
    ssg::DecoderConfig dcfg;
    dcfg.dims = ecfg.dims;
    dcfg.token_dim = cfg.token_dim;
    decoder_ = ssg::SharedDecoder(store_, "dec", dcfg, data.ids.level_sizes, init);
}

Var GenPluginModel::encode_language(std::span<const std::size_t> items) const {
    Matrix rows(items.size(), data_->embeddings.cols());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto src = data_->embeddings.row_span(items[i]);
        std::copy(src.begin(), src.end(), rows.row_span(i).begin());
    }
    return language_(projector_(ag::constant(std::move(rows))));
}

Var GenPluginModel::encode_id(std::span<const std::size_t> items) const { return id_(items); }

Var GenPluginModel::preference(std::span<const std::size_t> items) const { return encoders::mean_pool(encode_id(items)); }

std::uint64_t GenPluginModel::encoder_checksum() const {
    std::uint64_t h = store_.checksum(kProjector);
    h = fnv1a_bytes(&h, sizeof h, store_.checksum(kLanguageEncoder));
    return fnv1a_bytes(&h, sizeof h, store_.checksum(kIdEncoder));
}

void GenPluginModel::set_encoders_trainable(bool trainable) {
    for (const char* p : {kProjector, kLanguageEncoder, kIdEncoder}) store_.set_trainable(p, trainable);
}

void save_checkpoint(const std::filesystem::path& path, const GenPluginModel& model, const std::string& stage,
                     std::uint64_t config_hash) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw UserError("cannot write checkpoint " + path.string());
        out.write(kMagic, sizeof kMagic);
        put_string(out, stage);
        put<std::uint64_t>(out, config_hash);
        const auto& entries = model.store().entries();
        put<std::uint64_t>(out, entries.size());
        for (const auto& [name, p] : entries) {
            put_string(out, name);
            put<std::uint64_t>(out, p->value.rows());
            put<std::uint64_t>(out, p->value.cols());
            out.write(reinterpret_cast<const char*>(p->value.data()),
                      static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        }
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, GenPluginModel& model) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw UserError("not a checkpoint: " + path.string());
    CheckpointInfo info;
    info.stage = get_string(in);
    info.config_hash = get<std::uint64_t>(in);
    const auto n = get<std::uint64_t>(in);
    const auto& entries = model.store().entries();
    if (n != entries.size()) throw UserError("checkpoint architecture mismatch: parameter count");
    for (const auto& [name, p] : entries) {
        const auto stored = get_string(in);
        const auto rows = get<std::uint64_t>(in);
        const auto cols = get<std::uint64_t>(in);
        if (stored != name || rows != p->value.rows() || cols != p->value.cols()) {
            throw UserError("checkpoint architecture mismatch at " + stored);
        }
        in.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!in) throw UserError("truncated checkpoint");
    }
    info.checksum = model.store().checksum();
    return info;
}

std::vector<Example> sample_examples(const corpus::SplitDataset& split, std::size_t cuts, std::size_t max_len,
                                     Rng& rng) {
    std::vector<Example> out;
    for (std::size_t u = 0; u < split.users.size(); ++u) {
        const auto& train = split.users[u].train;
        if (train.size() < 2) continue;
        for (std::size_t c = 0; c < cuts; ++c) {
            const std::size_t cut = 1 + rng.index(train.size() - 1);
            out.push_back({u, tail(train, cut, max_len), train[cut]});
        }
    }
    return out;
}

std::vector<Example> validation_examples(const corpus::SplitDataset& split, std::size_t max_len) {
    std::vector<Example> out;
    for (std::size_t u = 0; u < split.users.size(); ++u) {
        const auto& s = split.users[u];
        out.push_back({u, tail(s.train, s.train.size(), max_len), s.valid});
    }
    return out;
}

std::vector<Example> test_examples(const corpus::SplitDataset& split, std::size_t max_len) {
    std::vector<Example> out;
    for (std::size_t u = 0; u < split.users.size(); ++u) {
        auto seq = split.users[u].train;
        seq.push_back(split.users[u].valid);
        out.push_back({u, tail(seq, seq.size(), max_len), split.users[u].test});
    }
    return out;
}

LossTerms loss_terms(const GenPluginModel& model, std::span<const Example> batch, const ExperimentConfig& cfg,
                     Rng& substitution, std::vector<SsgDraw>* draws) {
    const auto& dec = model.decoder();
    const bool replay = draws && !draws->empty();
    if (replay && draws->size() != batch.size()) throw std::invalid_argument("loss_terms: draw count mismatch");
    if (draws && !replay) draws->reserve(batch.size());

    std::vector<Var> lan, id, kl, p, q;
    std::vector<encoders::ViewEncoding> views;
    std::vector<std::vector<std::size_t>> inputs;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& ex = batch[b];
        const auto& target = model.tokens(ex.target);
        encoders::ViewEncoding view;
        view.n_items = ex.input.size();
        view.id_length = dec.id_length();
        view.id = model.encode_id(ex.input);
        const auto id_mem = dec.prepare(view.id);
        q.push_back(encoders::mean_pool(view.id));

        std::vector<Var> lan_logits;
        nn::ProjectedMemory lan_mem;
        if (cfg.dual_view) {
            view.language = model.encode_language(ex.input);
            p.push_back(encoders::mean_pool(view.language));
            lan_mem = dec.prepare(view.language);
            lan_logits = dec.decode_teacher_forced(lan_mem, target);
            lan.push_back(ssg::generation_loss(lan_logits, target));
        }
        std::vector<Var> id_logits;
        if (cfg.ssg) {
            SsgDraw fresh;
            const SsgDraw* draw = replay ? &(*draws)[b] : &fresh;
            if (!replay) {
                fresh.refined = ssg::language_view_refine(
                    cfg.lan_prediction == "free_running" ? ssg::free_running_logits(dec, lan_mem) : lan_logits, cfg.q);
                fresh.plan = ssg::draw_plan(cfg.p1, cfg.p2, dec.id_length(), cfg.q, substitution);
            }
            id_logits = dec.logits(ssg::apply_substitution(dec, draw->plan, target, draw->refined), id_mem);
            kl.push_back(ssg::kl_mutual_loss(lan_logits, id_logits, cfg.phi));
            if (draws && !replay) draws->push_back(std::move(fresh));
        } else {
            id_logits = dec.decode_teacher_forced(id_mem, target);
        }
        id.push_back(ssg::generation_loss(id_logits, target));
        views.push_back(std::move(view));
        inputs.push_back(ex.input);
    }

    LossTerms t;
    t.lan = mean_of(lan);
    t.id = mean_of(id);
    t.kl = mean_of(kl);
    t.item = zero();
    t.user = zero();
    if (cfg.dual_view && !batch.empty()) {
        const auto pairs = encoders::collect_item_pairs(views, inputs);
        t.item = encoders::loss_item_alignment(pairs, cfg.tau);
        if (batch.size() >= 2) t.user = encoders::loss_user_alignment(ag::concat_rows(p), ag::concat_rows(q), cfg.tau);
    }
    return t;
}

Var weighted_total(const LossTerms& t, const ExperimentConfig& cfg) {
    Var total = ag::add(t.lan, t.id);
    total = ag::add(total, ag::scale(t.item, cfg.lambda1));
    total = ag::add(total, ag::scale(t.user, cfg.lambda2));
    return ag::add(total, ag::scale(t.kl, cfg.lambda3));
}

LossBreakdown breakdown(const LossTerms& t, const ExperimentConfig& cfg) {
    LossBreakdown b;
    const std::pair<const char*, std::pair<const Var*, double*>> terms[] = {
        {"L^lan", {&t.lan, &b.lan}}, {"L^id", {&t.id, &b.id}},   {"L_item", {&t.item, &b.item}},
        {"L_user", {&t.user, &b.user}}, {"L_KL", {&t.kl, &b.kl}},
    };
    for (const auto& [name, slot] : terms) {
        *slot.second = ag::item(*slot.first);
        if (!std::isfinite(*slot.second)) throw NonFiniteLoss(name);
    }
    b.total = b.lan + b.id + cfg.lambda1 * b.item + cfg.lambda2 * b.user + cfg.lambda3 * b.kl;
    return b;
}

Matrix preference_matrix(const GenPluginModel& model) {
    const auto& users = model.data().split.users;
    const std::size_t d = model.decoder().d_model();
    Matrix q(users.size(), d);
    const auto n = static_cast<std::ptrdiff_t>(users.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        nn::NoGrad ng;
        const auto& train = users[static_cast<std::size_t>(i)].train;
        const Var pooled = model.preference(train);
        const auto row = pooled->value.span();
        auto dst = q.row_span(static_cast<std::size_t>(i));
        for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<double>(static_cast<float>(row[c]));
    }
    return q;
}

RetrievalState build_retrieval(const GenPluginModel& model, const ExperimentConfig& cfg) {
    const auto& data = model.data();
    RetrievalState r;
    r.bm25 = retrieval::Bm25Index(corpus::build_pseudo_documents(data.split, data.corpus), cfg.bm25_k1, cfg.bm25_b);
    std::vector<std::vector<std::size_t>> train;
    for (const auto& u : data.split.users) train.push_back(u.train);
    retrieval::CollabConfig cc;
    cc.d_model = cfg.d_model;
    cc.heads = cfg.heads;
    cc.layers = cfg.layers;
    cc.ffn = cfg.ffn;
    cc.max_len = cfg.max_len;
    cc.epochs = cfg.collab_epochs;
    cc.batch_size = cfg.batch_size;
    cc.lr = cfg.lr;
    cc.seed = cfg.seed;
    r.profiles = retrieval::train_collab_encoder(train, data.split.n_items(), cc);
    r.cache.q = preference_matrix(model);
    r.cache.checkpoint_hash = model.encoder_checksum();
    r.contexts = retrieval::build_contexts(r.bm25, r.profiles, r.cache.q, cfg.z, cfg.v);
    return r;
}

std::vector<std::size_t> memory_users(const retrieval::RetrievalContext& ctx, std::size_t v) {
    std::vector<std::size_t> out;
    for (const auto& s : ctx.reranked) {
        if (out.size() >= v) break;
        if (std::find(ctx.forced.begin(), ctx.forced.end(), s.user) != ctx.forced.end()) out.push_back(s.user);
    }
    for (const auto& s : ctx.reranked) {
        if (out.size() >= v) break;
        if (std::find(out.begin(), out.end(), s.user) == out.end()) out.push_back(s.user);
    }
    return out;
}

nn::ProjectedMemory decoder_memory(const GenPluginModel& model, std::span<const std::size_t> items,
                                   const Matrix* cached_q, std::span<const std::size_t> retrieved) {
    Var seq;
    {
        nn::NoGrad ng;
        seq = ag::constant(model.encode_id(items)->value);
    }
    if (cached_q && !retrieved.empty()) {
        Matrix rows(retrieved.size(), cached_q->cols());
        for (std::size_t i = 0; i < retrieved.size(); ++i) {
            const auto src = cached_q->row_span(retrieved[i]);
            std::copy(src.begin(), src.end(), rows.row_span(i).begin());
        }
        seq = model.decoder().augment_memory(seq, ag::constant(std::move(rows)));
    }
    return model.decoder().prepare(seq);
}

double evaluate_id_loss(const GenPluginModel& model, std::span<const Example> examples,
                        const RetrievalState* retrieval, std::size_t v) {
    if (examples.empty()) return 0.0;
    std::vector<double> losses(examples.size());
    const auto n = static_cast<std::ptrdiff_t>(examples.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        nn::NoGrad ng;
        const auto& ex = examples[static_cast<std::size_t>(i)];
        std::vector<std::size_t> users;
        if (retrieval) users = memory_users(retrieval->contexts.at(ex.user), v);
        const auto mem = decoder_memory(model, ex.input, retrieval ? &retrieval->cache.q : nullptr, users);
        const auto& target = model.tokens(ex.target);
        losses[static_cast<std::size_t>(i)] = ag::item(ssg::generation_loss(model.decoder().decode_teacher_forced(mem, target), target));
    }
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
}

TrainResult pretrain(GenPluginModel& model, const ExperimentConfig& cfg) {
    model.set_encoders_trainable(true);
    Rng substitution(cfg.seed, "substitution");
    auto step = [&](std::span<const Example> batch) {
        const auto terms = loss_terms(model, batch, cfg, substitution);
        const auto bd = breakdown(terms, cfg);
        if (nn::grad_enabled()) ag::backward(weighted_total(terms, cfg));
        return bd;
    };
    return run_epochs(model, cfg, cfg.max_epochs, cfg.lr, model.store().trainable(), nullptr, "data", step);
}

Var finetune_loss(const GenPluginModel& model, std::span<const Example> batch, const RetrievalState& retrieval,
                  const ExperimentConfig& cfg, Rng& substitution) {
    const auto& dec = model.decoder();
    std::vector<Var> losses;
    for (const auto& ex : batch) {
        const auto& target = model.tokens(ex.target);
        const auto users = memory_users(retrieval.contexts.at(ex.user), cfg.v);
        const auto mem = decoder_memory(model, ex.input, &retrieval.cache.q, users);
        std::vector<Var> logits;
        if (cfg.finetune_ssg) {
            std::vector<Var> lan;
            {
                nn::NoGrad ng;
                const auto lan_mem = dec.prepare(model.encode_language(ex.input));
                lan = cfg.lan_prediction == "free_running" ? ssg::free_running_logits(dec, lan_mem)
                                                           : dec.decode_teacher_forced(lan_mem, target);
            }
            const auto refined = ssg::language_view_refine(lan, cfg.q);
            const auto plan = ssg::draw_plan(cfg.p1, cfg.p2, dec.id_length(), cfg.q, substitution);
            logits = dec.logits(ssg::apply_substitution(dec, plan, target, refined), mem);
        } else {
            logits = dec.decode_teacher_forced(mem, target);
        }
        losses.push_back(ssg::generation_loss(logits, target));
    }
    return mean_of(losses);
}

TrainResult finetune(GenPluginModel& model, const RetrievalState& retrieval, const ExperimentConfig& cfg) {
    retrieval.cache.checked(model.encoder_checksum());
    if (retrieval.contexts.size() != model.data().split.users.size()) {
        throw UserError("retrieval contexts do not match the corpus");
    }
    const auto before = model.encoder_checksum();
    model.set_encoders_trainable(false);
    Rng substitution(cfg.seed, "finetune-substitution");
    auto step = [&](std::span<const Example> batch) {
        const auto loss = finetune_loss(model, batch, retrieval, cfg, substitution);
        LossBreakdown bd;
        bd.id = ag::item(loss);
        if (!std::isfinite(bd.id)) throw NonFiniteLoss("L^id");
        bd.total = bd.id;
        if (nn::grad_enabled()) ag::backward(loss);
        return bd;
    };
    TrainResult r;
    try {
        r = run_epochs(model, cfg, cfg.finetune_epochs, cfg.finetune_lr, model.store().trainable(), &retrieval,
                       "finetune-data", step);
    } catch (...) {
        model.set_encoders_trainable(true);
        throw;
    }
    model.set_encoders_trainable(true);
    if (model.encoder_checksum() != before) throw std::logic_error("fine-tuning modified frozen encoder parameters");
    return r;
}

std::vector<std::vector<std::size_t>> infer(const GenPluginModel& model, const RetrievalState* retrieval,
                                            const ExperimentConfig& cfg) {
    const auto examples = test_examples(model.data().split, cfg.max_len);
    std::vector<std::vector<std::size_t>> out(examples.size());
    const auto n = static_cast<std::ptrdiff_t>(examples.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        nn::NoGrad ng;
        const auto& ex = examples[static_cast<std::size_t>(i)];
        std::vector<std::size_t> users;
        if (retrieval) users = memory_users(retrieval->contexts.at(ex.user), cfg.v);
        const auto mem = decoder_memory(model, ex.input, retrieval ? &retrieval->cache.q : nullptr, users);
        const auto gen = ssg::generate(model.decoder(), mem, model.ids().trie, cfg.beam);
        auto& dst = out[static_cast<std::size_t>(i)];
        for (const auto& g : gen) dst.push_back(g.item);
    }
    return out;
}

std::string log_csv(const TrainResult& result) {
    std::ostringstream out;
    out.precision(10);
    out << "epoch,lan,id,item,user,kl,total,valid,lr\n";
    for (const auto& r : result.log) {
        out << r.epoch << ',' << r.train.lan << ',' << r.train.id << ',' << r.train.item << ',' << r.train.user << ','
            << r.train.kl << ',' << r.train.total << ',' << r.valid << ',' << r.lr << '\n';
    }
    return out.str();
}

}  // namespace genplugin::trainer
