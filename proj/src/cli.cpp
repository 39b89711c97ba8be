#include "genplugin/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "genplugin/config.hpp"
#include "genplugin/errors.hpp"
#include "genplugin/log.hpp"
#include "genplugin/pipeline.hpp"

namespace genplugin::cli {
namespace fs = std::filesystem;
namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UserError("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw UserError("cannot write " + p.string());
    out << content;
}

nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw UserError(p.string() + ": " + e.what());
    }
}

struct Stage {
    const char* name;
    std::vector<const char*> upstream;
};

// Upstream lists are static; evaluate additionally needs finetune when retrieval is on.
const std::map<std::string, Stage>& stages() {
    static const std::map<std::string, Stage> s = {
        {"synth-data", {"synth-data", {}}},
        {"ingest", {"ingest", {}}},
        {"build-ids", {"build-ids", {"ingest"}}},
        {"pretrain", {"pretrain", {"build-ids"}}},
        {"build-retrieval", {"build-retrieval", {"pretrain"}}},
        {"finetune", {"finetune", {"build-retrieval"}}},
        {"evaluate", {"evaluate", {"pretrain"}}},
        {"probe-bias", {"probe-bias", {"pretrain"}}},
        {"ablate", {"ablate", {"build-ids"}}},
    };
    return s;
}

class Experiment {
public:
    Experiment(fs::path root, ExperimentConfig cfg, std::string config_bytes, bool force, std::ostream& out)
        : root_(std::move(root)), cfg_(std::move(cfg)), bytes_(std::move(config_bytes)), force_(force), out_(out) {
        hash_ = config_hash(cfg_);
    }

    int run(const std::string& stage) {
        fs::create_directories(root_);
        write_file(root_ / "config.json", bytes_);
        write_file(root_ / "config.effective.json", config_to_json(cfg_).dump(2) + "\n");

        auto upstream = upstream_of(stage);
        std::vector<std::string> ids;
        for (const auto& u : upstream) {
            const auto id = stamp(u);
            if (!id) {
                throw MissingArtifact(stage + " requires stage '" + u + "' (run `genplugin " + u + "` first)");
            }
            ids.push_back(u + "=" + *id);
        }
        std::string key = stage + "|" + hex_hash(hash_);
        for (const auto& id : ids) key += "|" + id;
        if (stage == "ingest") key += "|" + input_fingerprint();
        const std::string id = hex_hash(fnv1a(key));

        if (!force_ && stamp(stage) == id) {
            out_ << stage << ": up-to-date\n";
            return kOk;
        }
        dispatch(stage);
        write_file(stamp_path(stage), id + "\n");
        nlohmann::json meta{{"stage", stage}, {"id", id}, {"config_hash", hex_hash(hash_)}, {"upstream", ids}};
        write_file(root_ / "stamps" / (stage + ".json"), meta.dump(2) + "\n");
        return kOk;
    }

private:
    std::vector<std::string> upstream_of(const std::string& stage) const {
        std::vector<std::string> u;
        for (const char* s : stages().at(stage).upstream) u.emplace_back(s);
        if (stage == "evaluate" && cfg_.retrieval) u.emplace_back("finetune");
        if (stage == "ingest" && cfg_.interactions.empty()) u.emplace_back("synth-data");
        return u;
    }

    fs::path stamp_path(const std::string& stage) const { return root_ / "stamps" / (stage + ".stamp"); }

    std::optional<std::string> stamp(const std::string& stage) const {
        std::ifstream in(stamp_path(stage));
        std::string s;
        if (!(in >> s)) return std::nullopt;
        return s;
    }

    std::pair<fs::path, fs::path> raw_inputs() const {
        if (!cfg_.interactions.empty()) {
            if (cfg_.items.empty()) throw ConfigError("config sets 'interactions' but not 'items'");
            return {cfg_.interactions, cfg_.items};
        }
        return {root_ / "raw" / "interactions.jsonl", root_ / "raw" / "items.jsonl"};
    }

    std::string input_fingerprint() const {
        const auto [a, b] = raw_inputs();
        std::uint64_t h = fnv1a("inputs");
        for (const auto& p : {a, b}) {
            if (!fs::exists(p)) return "missing";
            const auto bytes = read_file(p);
            h = fnv1a(bytes, h);
        }
        return hex_hash(h);
    }

    void dispatch(const std::string& stage) {
        if (stage == "synth-data") return synth_data();
        if (stage == "ingest") return ingest();
        if (stage == "build-ids") return build_ids();
        if (stage == "pretrain") return pretrain();
        if (stage == "build-retrieval") return build_retrieval();
        if (stage == "finetune") return finetune();
        if (stage == "evaluate") return evaluate();
        if (stage == "probe-bias") return probe_bias();
        if (stage == "ablate") return ablate();
        throw UserError("unknown stage " + stage);
    }

    void synth_data() {
        corpus::SynthParams p;
        p.n_users = cfg_.synth_users;
        p.n_items = cfg_.synth_items;
        p.n_clusters = cfg_.synth_clusters;
        p.skew = cfg_.synth_skew;
        p.seed = cfg_.seed;
        const auto c = corpus::synth_generate(p);
        fs::create_directories(root_ / "raw");
        corpus::write_interactions(root_ / "raw" / "interactions.jsonl", c);
        corpus::write_item_meta(root_ / "raw" / "items.jsonl", c);
        out_ << "synth-data: " << c.n_users() << " users, " << c.n_items() << " items, " << c.n_interactions()
             << " interactions\n";
    }

    void ingest() {
        const auto [inter, meta] = raw_inputs();
        if (!fs::exists(inter) || !fs::exists(meta)) {
            throw MissingArtifact("interaction/item files not found (" + inter.string() + ")");
        }
        auto c = corpus::ingest(inter, meta);
        corpus::FilterReport report;
        if (cfg_.five_core) c = corpus::five_core_filter(c, &report);
        const auto dir = root_ / "corpus";
        fs::create_directories(dir);
        corpus::write_interactions(dir / "interactions.jsonl", c);
        corpus::write_item_meta(dir / "items.jsonl", c);
        const auto split = trainer::make_split(c, cfg_);
        auto manifest = corpus::split_manifest(split, c);
        manifest["corpus_hash"] = hex_hash(corpus::corpus_hash(c));
        manifest["filter"] = {{"users_removed", report.users_removed},
                              {"items_removed", report.items_removed},
                              {"interactions_removed", report.interactions_removed},
                              {"passes", report.passes}};
        manifest["config_hash"] = hex_hash(hash_);
        write_file(dir / "manifest.json", manifest.dump(1) + "\n");
        out_ << "ingest: " << c.n_users() << " users, " << c.n_items() << " items (" << split.head_items.size()
             << " head / " << split.tail_items.size() << " tail), " << c.n_interactions() << " interactions\n";
    }

    corpus::Corpus load_corpus() const {
        const auto dir = root_ / "corpus";
        return corpus::ingest(dir / "interactions.jsonl", dir / "items.jsonl");
    }

    void build_ids() {
        const auto c = load_corpus();
        const auto emb =
            textembed::extract_cached(c.items, trainer::extractor_config(cfg_), root_ / "cache", corpus::corpus_hash(c));
        semid::Codebooks codebooks;
        const auto ids = trainer::make_ids(emb, cfg_, &codebooks);
        std::vector<std::string> item_ids;
        for (const auto& m : c.items) item_ids.push_back(m.item_id);
        auto manifest = semid::id_manifest(ids, item_ids);
        manifest["config_hash"] = hex_hash(hash_);
        manifest["level_error"] = codebooks.level_error;
        fs::create_directories(root_ / "ids");
        for (std::size_t r = 0; r < codebooks.levels.size(); ++r)
            semid::write_matrix(root_ / "ids" / ("codebook_" + std::to_string(r) + ".bin"), codebooks.levels[r]);
        write_file(root_ / "ids" / "ids.json", manifest.dump(1) + "\n");
        out_ << "build-ids: " << ids.n_items() << " items, id length " << ids.id_length()
             << (ids.has_disambiguation ? " (with disambiguation token)" : "") << "\n";
    }

    trainer::Dataset load_dataset() const {
        trainer::Dataset d;
        d.corpus = load_corpus();
        d.split = trainer::make_split(d.corpus, cfg_);
        d.partition = corpus::head_tail_partition(d.split);
        const auto ext = trainer::extractor_config(cfg_);
        if (!textembed::read_cache(root_ / "cache" / "embeddings", textembed::extractor_name(ext),
                                   corpus::corpus_hash(d.corpus), d.embeddings)) {
            throw MissingArtifact("embedding cache missing or stale (run `genplugin build-ids`)");
        }
        std::vector<std::string> item_ids;
        for (const auto& m : d.corpus.items) item_ids.push_back(m.item_id);
        d.ids = semid::ids_from_manifest(read_json(root_ / "ids" / "ids.json"), item_ids);
        return d;
    }

    fs::path checkpoint(const std::string& stage) const { return root_ / "checkpoints" / (stage + ".ckpt"); }

    void load_model(trainer::GenPluginModel& model, const std::string& stage) const {
        const auto info = trainer::load_checkpoint(checkpoint(stage), model);
        if (info.stage != stage) throw UserError("checkpoint " + checkpoint(stage).string() + " has stage " + info.stage);
        if (info.config_hash != hash_) {
            throw StaleCache("checkpoint " + stage + " was built with another config (run `genplugin " + stage + "`)");
        }
    }

    void pretrain() {
        const auto data = load_dataset();
        trainer::GenPluginModel model(cfg_, data);
        fs::create_directories(root_ / "checkpoints");
        trainer::TrainResult r;
        try {
            r = trainer::pretrain(model, cfg_);
        } catch (const NonFiniteLoss&) {
            trainer::save_checkpoint(checkpoint("pretrain"), model, "pretrain", hash_);
            throw;
        }
        trainer::save_checkpoint(checkpoint("pretrain"), model, "pretrain", hash_);
        write_file(root_ / "logs" / "pretrain.csv", trainer::log_csv(r));
        out_ << "pretrain: best epoch " << r.best_epoch << ", validation L^id " << r.best_valid << " ("
             << r.log.size() - 1 << " epochs" << (r.early_stopped ? ", early stop" : "") << ")\n";
    }

    fs::path retrieval_dir() const { return root_ / "retrieval"; }

    void build_retrieval() {
        const auto data = load_dataset();
        trainer::GenPluginModel model(cfg_, data);
        load_model(model, "pretrain");
        const auto r = trainer::build_retrieval(model, cfg_);
        const auto dir = retrieval_dir();
        fs::create_directories(dir);
        write_file(dir / "bm25.json", r.bm25.to_json().dump() + "\n");
        semid::write_matrix(dir / "profiles.bin", r.profiles);
        retrieval::write_cache(dir / "preference_cache", r.cache);
        write_file(dir / "contexts.json", retrieval::contexts_to_json(r.contexts).dump() + "\n");
        out_ << "build-retrieval: " << r.contexts.size() << " contexts (z=" << cfg_.z << ", v=" << cfg_.v << ")\n";
    }

    trainer::RetrievalState load_retrieval(const trainer::GenPluginModel& model) const {
        const auto dir = retrieval_dir();
        if (!fs::exists(dir / "contexts.json")) throw MissingArtifact("retrieval artifacts missing (run build-retrieval)");
        trainer::RetrievalState r;
        r.bm25 = retrieval::Bm25Index::from_json(read_json(dir / "bm25.json"));
        r.profiles = semid::read_matrix(dir / "profiles.bin");
        r.cache = retrieval::read_cache(dir / "preference_cache", model.encoder_checksum());
        r.contexts = retrieval::contexts_from_json(read_json(dir / "contexts.json"));
        return r;
    }

    void finetune() {
        const auto data = load_dataset();
        trainer::GenPluginModel model(cfg_, data);
        load_model(model, "pretrain");
        const auto r = load_retrieval(model);
        const auto result = trainer::finetune(model, r, cfg_);
        trainer::save_checkpoint(checkpoint("finetune"), model, "finetune", hash_);
        write_file(root_ / "logs" / "finetune.csv", trainer::log_csv(result));
        out_ << "finetune: best epoch " << result.best_epoch << ", validation L^id " << result.best_valid << "\n";
    }

    void evaluate() {
        const auto data = load_dataset();
        trainer::GenPluginModel model(cfg_, data);
        std::optional<trainer::RetrievalState> r;
        if (cfg_.retrieval) {
            load_model(model, "finetune");
            r = load_retrieval(model);
        } else {
            load_model(model, "pretrain");
        }
        const auto rankings = trainer::infer(model, r ? &*r : nullptr, cfg_);
        const auto report = pipeline::evaluate(model, rankings, cfg_.n_bins);
        const auto dir = root_ / "reports";
        auto j = evalkit::report_json(report);
        j["config_hash"] = hex_hash(hash_);
        write_file(dir / "metrics.json", j.dump(2) + "\n");
        write_file(dir / "metrics.csv", report_csv(report));
        nlohmann::json ranks = nlohmann::json::object();
        for (std::size_t u = 0; u < rankings.size(); ++u) {
            nlohmann::json list = nlohmann::json::array();
            for (std::size_t i : rankings[u]) list.push_back(data.corpus.items[i].item_id);
            ranks[data.corpus.user_ids[u]] = list;
        }
        write_file(dir / "rankings.json", ranks.dump() + "\n");
        const auto& o = report.overall;
        out_ << "evaluate: users " << report.n_users << "  H@5 " << o.h5 << "  H@10 " << o.h10 << "  N@5 " << o.n5
             << "  N@10 " << o.n10 << "\n";
    }

    void probe_bias() {
        const auto data = load_dataset();
        trainer::GenPluginModel model(cfg_, data);
        load_model(model, "pretrain");
        const auto p = pipeline::probe(model, cfg_);
        write_file(root_ / "reports" / "probe.json", evalkit::probe_json(p).dump(2) + "\n");
        out_ << "probe-bias: mean gap (levels 2+) " << p.mean_gap() << "\n";
        for (std::size_t l = 0; l < p.gap.size(); ++l) {
            out_ << "  level " << l + 1 << ": teacher-forced " << p.teacher_forced[l] << ", free-running "
                 << p.free_running[l] << ", gap " << p.gap[l] << "\n";
        }
    }

    void ablate() {
        const auto data = load_dataset();
        const auto rows = pipeline::run_ablation(data, cfg_);
        const auto table = pipeline::ablation_table(rows);
        write_file(root_ / "reports" / "ablation.txt", table);
        write_file(root_ / "reports" / "ablation.json", pipeline::ablation_json(rows).dump(2) + "\n");
        out_ << table;
    }

    fs::path root_;
    ExperimentConfig cfg_;
    std::string bytes_;
    bool force_;
    std::ostream& out_;
    std::uint64_t hash_ = 0;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"GenPlugin experiment pipeline"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    std::string config_path, out_dir = "experiment";
    std::optional<std::uint64_t> seed;
    bool force = false, verbose = false;
    app.add_option("--config", config_path, "experiment config (flat JSON)");
    app.add_option("--seed", seed, "override the config seed");
    app.add_flag("--force", force, "recompute even when up-to-date");
    app.add_option("--out", out_dir, "experiment directory");
    app.add_flag("-v,--verbose", verbose, "progress output");
    const char* descriptions[][2] = {
        {"synth-data", "generate the seeded synthetic corpus"},
        {"ingest", "read, 5-core filter and split the corpus"},
        {"build-ids", "extract item embeddings and build semantic IDs"},
        {"pretrain", "dual-encoder / shared-decoder pre-training"},
        {"build-retrieval", "similar-user retrieval and preference cache"},
        {"finetune", "retrieval-augmented decoder fine-tuning"},
        {"evaluate", "rank test targets and write metrics"},
        {"probe-bias", "teacher-forced vs free-running token accuracy"},
        {"ablate", "train the four variant rows and compare"},
    };
    for (const auto& d : descriptions) app.add_subcommand(d[0], d[1]);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kOk : kUserError;
    }
    set_verbose(verbose);
    try {
        std::string bytes = "{}\n";
        ExperimentConfig cfg;
        if (!config_path.empty()) {
            bytes = read_file(config_path);
            cfg = load_config(config_path);
        }
        if (seed) cfg.seed = *seed;
        cfg.validate();
        Experiment exp(out_dir, cfg, bytes, force, out);
        return exp.run(app.get_subcommands().front()->get_name());
    } catch (const UserError& e) {
        err << "error: " << e.what() << "\n";
        return kUserError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternalError;
    }
}

}  // namespace genplugin::cli
