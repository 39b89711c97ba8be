#include <fstream>
#include <sstream>

#include "doctest.h"
#include "genplugin/cli.hpp"
#include "genplugin/log.hpp"
#include "json.hpp"
#include "tmpdir.hpp"

using namespace genplugin;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"({
  "seed": 5, "synth_users": 60, "synth_items": 30, "synth_clusters": 3,
  "d_model": 16, "heads": 2, "ffn": 32, "layers": 1, "token_dim": 8, "proj_hidden": 16, "ext_dim": 32,
  "id_levels": 2, "id_vocab": 4, "q": 3, "batch_size": 16, "collab_epochs": 2,
  "max_epochs": 2, "finetune_epochs": 1, "beam": 10, "z": 4, "v": 2
})";

struct Run {
    int code;
    std::string out, err;
};

Run cli_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct Workspace {
    TempDir dir;
    fs::path config = dir / "config.json";
    std::string exp = (dir / "exp").string();
    explicit Workspace(const std::string& json = kSmall) { std::ofstream(config) << json; }
    Run stage(const std::string& name, std::vector<std::string> extra = {}) {
        std::vector<std::string> args{name, "--config", config.string(), "--out", exp};
        args.insert(args.end(), extra.begin(), extra.end());
        return cli_run(args);
    }
};

}  // namespace

TEST_CASE("full pipeline through evaluation, with up-to-date reruns") {
    set_warnings_silenced(true);
    Workspace w;
    for (const char* s : {"synth-data", "ingest", "build-ids", "pretrain", "build-retrieval", "finetune", "evaluate",
                          "probe-bias"}) {
        CAPTURE(std::string(s));
        const auto r = w.stage(s);
        REQUIRE(r.code == cli::kOk);
        CHECK(r.out.find("up-to-date") == std::string::npos);
    }
    const fs::path exp = w.exp;
    CHECK(fs::exists(exp / "reports" / "metrics.json"));
    CHECK(fs::exists(exp / "reports" / "probe.json"));
    CHECK(fs::exists(exp / "logs" / "pretrain.csv"));
    CHECK(fs::exists(exp / "ids" / "codebook_0.bin"));
    CHECK(fs::exists(exp / "ids" / "codebook_1.bin"));
    CHECK(nlohmann::json::parse(slurp(exp / "ids" / "ids.json"))["level_error"].size() == 2);
    const auto metrics = nlohmann::json::parse(slurp(exp / "reports" / "metrics.json"));
    CHECK(metrics["overall"]["H@10"].get<double>() >= 0.0);

    const auto again = w.stage("pretrain");
    CHECK(again.code == cli::kOk);
    CHECK(again.out == "pretrain: up-to-date\n");
    const auto forced = w.stage("evaluate", {"--force"});
    CHECK(forced.out.find("up-to-date") == std::string::npos);

    // Re-running with the same config reproduces byte-identical artifacts.
    const auto rankings = slurp(exp / "reports" / "rankings.json");
    const auto log = slurp(exp / "logs" / "pretrain.csv");
    REQUIRE(w.stage("pretrain", {"--force"}).code == cli::kOk);
    REQUIRE(w.stage("build-retrieval").code == cli::kOk);
    REQUIRE(w.stage("finetune").code == cli::kOk);
    REQUIRE(w.stage("evaluate").code == cli::kOk);
    CHECK(slurp(exp / "logs" / "pretrain.csv") == log);
    CHECK(slurp(exp / "reports" / "rankings.json") == rankings);

    // A different seed makes the stored item IDs stale until build-ids reruns.
    const auto reseeded = w.stage("pretrain", {"--seed", "6"});
    CHECK(reseeded.code == cli::kUserError);
    CHECK(reseeded.err.find("build-ids") != std::string::npos);
    REQUIRE(w.stage("ingest", {"--seed", "6"}).code == cli::kOk);
    REQUIRE(w.stage("build-ids", {"--seed", "6"}).code == cli::kOk);
    const auto retrained = w.stage("pretrain", {"--seed", "6"});
    CHECK(retrained.code == cli::kOk);
    CHECK(retrained.out.find("up-to-date") == std::string::npos);
    set_warnings_silenced(false);
}

TEST_CASE("missing upstream stage is a user error naming the artifact") {
    Workspace w;
    const auto r = w.stage("pretrain");
    CHECK(r.code == cli::kUserError);
    CHECK(r.err.find("requires stage 'build-ids'") != std::string::npos);
    const auto f = w.stage("finetune");
    CHECK(f.code == cli::kUserError);
}

TEST_CASE("config errors exit with the user-error code") {
    Workspace unknown(R"({"d_modle": 16})");
    const auto r = unknown.stage("synth-data");
    CHECK(r.code == cli::kUserError);
    CHECK(r.err.find("d_modle") != std::string::npos);

    Workspace bad_type(R"({"lr": "fast"})");
    CHECK(bad_type.stage("synth-data").code == cli::kUserError);

    Workspace invalid(R"({"heads": 3, "d_model": 16})");
    CHECK(invalid.stage("synth-data").code == cli::kUserError);

    Workspace w;
    CHECK(cli_run({"ingest", "--config", (w.dir / "absent.json").string()}).code == cli::kUserError);
    CHECK(cli_run({"no-such-stage"}).code == cli::kUserError);
    CHECK(cli_run({}).code == cli::kUserError);
    CHECK(cli_run({"--help"}).code == cli::kOk);
}

TEST_CASE("ingest reads supplied interaction files") {
    Workspace src;
    REQUIRE(src.stage("synth-data").code == cli::kOk);
    const fs::path raw = fs::path(src.exp) / "raw";
    auto j = nlohmann::json::parse(kSmall);
    j["interactions"] = (raw / "interactions.jsonl").string();
    j["items"] = (raw / "items.jsonl").string();
    Workspace w(j.dump());
    const auto r = w.stage("ingest");
    CHECK(r.code == cli::kOk);
    CHECK(w.stage("ingest").out == "ingest: up-to-date\n");

    j["interactions"] = (raw / "nope.jsonl").string();
    Workspace missing(j.dump());
    CHECK(missing.stage("ingest").code == cli::kUserError);
}

TEST_CASE("ablate prints four variant rows") {
    set_warnings_silenced(true);
    auto j = nlohmann::json::parse(kSmall);
    j["max_epochs"] = 1;
    Workspace w(j.dump());
    REQUIRE(w.stage("synth-data").code == cli::kOk);
    REQUIRE(w.stage("ingest").code == cli::kOk);
    REQUIRE(w.stage("build-ids").code == cli::kOk);
    const auto r = w.stage("ablate");
    REQUIRE(r.code == cli::kOk);
    const auto rows = nlohmann::json::parse(slurp(fs::path(w.exp) / "reports" / "ablation.json"));
    CHECK(rows.size() == 4);
    std::istringstream lines(r.out);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) n += !line.empty();
    CHECK(n == 5);  // header + four variants
    set_warnings_silenced(false);
}
