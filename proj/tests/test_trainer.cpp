#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <tuple>

#include "doctest.h"
#include "genplugin/errors.hpp"
#include "genplugin/log.hpp"
#include "gradcheck.hpp"
#include "tmpdir.hpp"
#include "toy.hpp"

using namespace genplugin;
using namespace genplugin::trainer;

namespace {

struct Toy {
    ExperimentConfig cfg = toy::tiny_config();
    Dataset data = prepare_dataset(toy::two_user_corpus(), cfg);
};

// Records one substitution draw, then replays it so repeated evaluations agree.
struct Replayed {
    const GenPluginModel& model;
    ExperimentConfig cfg;
    std::vector<Example> batch = toy::two_user_batch();
    std::vector<SsgDraw> draws;
    Replayed(const GenPluginModel& m, const ExperimentConfig& c) : model(m), cfg(c) {
        Rng rng(c.seed, "substitution");
        loss_terms(model, batch, cfg, rng, &draws);
    }
    LossTerms terms() {
        Rng unused(0);
        return loss_terms(model, batch, cfg, unused, &draws);
    }
};

}  // namespace

TEST_CASE("example construction") {
    corpus::SplitDataset split;
    split.users.resize(2);
    split.users[0].train = {4, 5, 6, 7};
    split.users[0].valid = 8;
    split.users[0].test = 9;
    split.users[1].train = {1};
    split.users[1].valid = 2;
    split.users[1].test = 3;
    Rng rng(1);
    const auto ex = sample_examples(split, 50, 2, rng);
    CHECK(ex.size() == 50);  // user 1 has no prefix/next pair
    for (const auto& e : ex) {
        CHECK(e.user == 0);
        const auto& t = split.users[0].train;
        const auto pos = std::find(t.begin(), t.end(), e.target) - t.begin();
        REQUIRE(pos >= 1);
        CHECK(e.input.size() == std::min<std::size_t>(2, static_cast<std::size_t>(pos)));
        CHECK(e.input.back() == t[static_cast<std::size_t>(pos) - 1]);
    }
    const auto v = validation_examples(split, 3);
    CHECK(v[0].input == std::vector<std::size_t>{5, 6, 7});
    CHECK(v[0].target == 8);
    const auto t = test_examples(split, 3);
    CHECK(t[0].input == std::vector<std::size_t>{6, 7, 8});
    CHECK(t[0].target == 9);
    CHECK(t[1].input == std::vector<std::size_t>{1, 2});
}

TEST_CASE("loss weights combine the components") {
    const Toy toy;
    const GenPluginModel model(toy.cfg, toy.data);
    Replayed r(model, toy.cfg);
    const auto t = r.terms();

    ExperimentConfig zero = toy.cfg;
    zero.lambda1 = zero.lambda2 = zero.lambda3 = 0.0;
    CHECK(ag::item(weighted_total(t, zero)) == ag::item(t.lan) + ag::item(t.id));

    ExperimentConfig twice = toy.cfg;
    twice.lambda3 *= 2;
    const double delta = ag::item(weighted_total(r.terms(), twice)) - ag::item(weighted_total(r.terms(), toy.cfg));
    CHECK(delta == doctest::Approx(toy.cfg.lambda3 * ag::item(t.kl)).epsilon(1e-12));

    const auto bd = breakdown(t, toy.cfg);
    CHECK(std::abs(bd.total - ag::item(weighted_total(t, toy.cfg))) < 1e-6);
    CHECK(bd.kl > 0.0);
    CHECK(bd.item > 0.0);
    CHECK(bd.user > 0.0);
}

TEST_CASE("every loss term matches finite differences on the toy") {
    Toy toy;
    for (auto [p1, p2, mode] : {std::tuple{0.6, 0.5, "teacher_forced"}, std::tuple{0.0, 0.0, "teacher_forced"},
                                std::tuple{0.0, 0.0, "free_running"}}) {
        toy.cfg.p1 = p1;
        toy.cfg.p2 = p2;
        toy.cfg.lan_prediction = mode;
        const GenPluginModel model(toy.cfg, toy.data);
        Replayed r(model, toy.cfg);
        // Attention key biases have an exactly zero gradient; checked separately.
        std::vector<Var> params, key_bias;
        for (const auto& [name, v] : model.store().entries())
            (name.ends_with("k.bias") ? key_bias : params).push_back(v);
        const std::pair<std::string, Var LossTerms::*> terms[] = {
            {"lan", &LossTerms::lan}, {"id", &LossTerms::id},   {"item", &LossTerms::item},
            {"user", &LossTerms::user}, {"kl", &LossTerms::kl},
        };
        for (const auto& [name, member] : terms) {
            CAPTURE(name);
            CHECK(gradcheck::check([&] { return r.terms().*member; }, params).max_rel < 1e-4);
            for (const auto& kb : key_bias) {
                gradcheck::check([&] { return r.terms().*member; }, {kb});
                CHECK(ag::sum(ag::mul(ag::constant(kb->grad), ag::constant(kb->grad)))->value[0] < 1e-20);
            }
        }
        CHECK(gradcheck::check([&] { return weighted_total(r.terms(), toy.cfg); }, params).max_rel < 1e-4);
    }
}

TEST_CASE("p1 = 1 reduces the ID view to teacher forcing") {
    Toy toy;
    toy.cfg.p1 = 1.0;
    const GenPluginModel model(toy.cfg, toy.data);
    Replayed r(model, toy.cfg);
    const auto& dec = model.decoder();
    double ref = 0.0;
    for (const auto& ex : r.batch) {
        const auto& target = model.tokens(ex.target);
        ref += ag::item(ssg::generation_loss(dec.decode_teacher_forced(dec.prepare(model.encode_id(ex.input)), target),
                                             target));
    }
    CHECK(ag::item(r.terms().id) == doctest::Approx(ref / 2).epsilon(1e-12));
}

TEST_CASE("non-finite components are reported by name") {
    const Toy toy;
    auto c = [](double v) { return ag::constant(Matrix(1, 1, v)); };
    LossTerms t{c(1), c(1), c(1), c(std::numeric_limits<double>::quiet_NaN()), c(1)};
    try {
        breakdown(t, toy.cfg);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.term() == "L_user");
    }
    t.user = c(1);
    t.kl = c(std::numeric_limits<double>::infinity());
    CHECK_THROWS_WITH_AS(breakdown(t, toy.cfg), "non-finite loss term: L_KL", NonFiniteLoss);
}

TEST_CASE("checkpoints round trip and reject other architectures") {
    const Toy toy;
    GenPluginModel a(toy.cfg, toy.data);
    TempDir dir;
    save_checkpoint(dir / "m.ckpt", a, "pretrain", 42);
    ExperimentConfig other_seed = toy.cfg;
    other_seed.seed = 9;
    GenPluginModel b(other_seed, toy.data);
    CHECK(b.store().checksum() != a.store().checksum());
    const auto info = load_checkpoint(dir / "m.ckpt", b);
    CHECK(info.stage == "pretrain");
    CHECK(info.config_hash == 42);
    CHECK(b.store().checksum() == a.store().checksum());
    CHECK(info.checksum == a.store().checksum());

    ExperimentConfig wider = toy.cfg;
    wider.ffn = 12;
    GenPluginModel c(wider, toy.data);
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", c), UserError);
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt", c), MissingArtifact);
}

TEST_CASE("parameter registry: encoders freeze, decoder stays trainable") {
    const Toy toy;
    GenPluginModel m(toy.cfg, toy.data);
    const auto all = m.store().trainable().size();
    m.set_encoders_trainable(false);
    const auto frozen = m.store().trainable();
    CHECK(frozen.size() == m.store().with_prefix(kDecoder).size());
    CHECK(frozen.size() < all);
    m.set_encoders_trainable(true);
    CHECK(m.store().trainable().size() == all);
    for (const auto& [name, v] : m.store().entries()) {
        const bool known = name.starts_with(kProjector) || name.starts_with(kLanguageEncoder) ||
                           name.starts_with(kIdEncoder) || name.starts_with(kDecoder);
        CHECK(known);
    }
}

TEST_CASE("memory users: forced first, then by score, at most v") {
    retrieval::RetrievalContext ctx;
    ctx.reranked = {{7, 0.9}, {3, 0.8}, {5, 0.1}, {2, 0.05}};
    ctx.forced = {2, 5};
    CHECK(memory_users(ctx, 3) == std::vector<std::size_t>{5, 2, 7});
    CHECK(memory_users(ctx, 1) == std::vector<std::size_t>{5});
    CHECK(memory_users(ctx, 0).empty());
    CHECK(memory_users(ctx, 10).size() == 4);
}

TEST_CASE("pretrain, retrieval, fine-tune and inference on a small corpus") {
    set_warnings_silenced(true);
    const auto cfg = toy::small_config();
    const Dataset data = prepare_dataset(toy::small_synthetic(1), cfg);
    GenPluginModel model(cfg, data);
    const auto res = pretrain(model, cfg);
    REQUIRE(res.log.size() == cfg.max_epochs + 1);
    CHECK(res.log[0].epoch == 0);
    CHECK(res.best_valid < res.log[0].valid);
    double best = res.log[0].valid;
    for (const auto& r : res.log) best = std::min(best, r.valid);
    CHECK(res.best_valid == best);
    for (const auto& r : res.log) {
        const double total = r.train.lan + r.train.id + cfg.lambda1 * r.train.item + cfg.lambda2 * r.train.user +
                             cfg.lambda3 * r.train.kl;
        CHECK(std::abs(total - r.train.total) < 1e-6);
    }
    // The restored best snapshot reproduces the best validation loss.
    CHECK(evaluate_id_loss(model, validation_examples(data.split, cfg.max_len), nullptr, 0) ==
          doctest::Approx(res.best_valid).epsilon(1e-12));
    CHECK(log_csv(res).rfind("epoch,lan,id,item,user,kl,total,valid,lr\n", 0) == 0);

    const auto state = build_retrieval(model, cfg);
    // Cached vectors equal a fresh encode-and-pool.
    for (std::size_t u = 0; u < data.split.users.size(); u += 7) {
        nn::NoGrad ng;
        const auto fresh = model.preference(data.split.users[u].train);
        for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(std::abs(fresh->value[j] - state.cache.q(u, j)) < 1e-6);
    }

    const auto enc_before = model.encoder_checksum();
    const auto dec_before = model.store().checksum(kDecoder);
    const auto ft = finetune(model, state, cfg);
    CHECK(model.encoder_checksum() == enc_before);
    if (ft.best_epoch > 0) CHECK(model.store().checksum(kDecoder) != dec_before);

    const auto ck = model.store().checksum();
    const auto r1 = infer(model, &state, cfg), r2 = infer(model, &state, cfg);
    CHECK(r1 == r2);
    CHECK(model.store().checksum() == ck);
    REQUIRE(r1.size() == data.split.users.size());
    for (const auto& list : r1) {
        CHECK(list.size() == std::min<std::size_t>(cfg.beam, data.ids.n_items()));
        CHECK(std::set<std::size_t>(list.begin(), list.end()).size() == list.size());
        for (auto item : list) CHECK(item < data.corpus.n_items());
    }

    // A cache built for other encoder weights is rejected.
    auto stale = state;
    model.store().get("id_enc.tokens")->value[0] += 1.0;
    CHECK_THROWS_AS(finetune(model, stale, cfg), StaleCache);
    set_warnings_silenced(false);
}

TEST_CASE("v = 0 leaves only the target's own encoding in memory") {
    set_warnings_silenced(true);
    const auto cfg = toy::small_config();
    const Dataset data = prepare_dataset(toy::small_synthetic(2), cfg);
    const GenPluginModel model(cfg, data);
    const auto state = build_retrieval(model, cfg);
    const auto& ctx = state.contexts[0];
    const auto users = memory_users(ctx, 0);
    CHECK(users.empty());
    const auto& items = data.split.users[0].train;
    const auto plain = decoder_memory(model, items);
    const auto with = decoder_memory(model, items, &state.cache.q, users);
    REQUIRE(plain.keys.size() == with.keys.size());
    for (std::size_t l = 0; l < plain.keys.size(); ++l) CHECK(max_abs_diff(plain.keys[l]->value, with.keys[l]->value) == 0.0);
    const auto aug = decoder_memory(model, items, &state.cache.q, memory_users(ctx, 2));
    CHECK(aug.keys[0]->value.rows() == plain.keys[0]->value.rows() + 2);
    // Evaluation with v = 0 and no retrieval agree.
    const auto valid = validation_examples(data.split, cfg.max_len);
    CHECK(evaluate_id_loss(model, valid, &state, 0) == evaluate_id_loss(model, valid, nullptr, 0));
    set_warnings_silenced(false);
}

TEST_CASE("patience: training stops after exactly that many stale epochs") {
    set_warnings_silenced(true);
    auto cfg = toy::small_config();
    cfg.max_epochs = 40;
    cfg.patience = 2;
    cfg.lr = 0.05;
    const Dataset data = prepare_dataset(toy::small_synthetic(3, 30, 20), cfg);
    GenPluginModel model(cfg, data);
    const auto res = pretrain(model, cfg);
    if (res.early_stopped) {
        CHECK(res.log.back().epoch - res.best_epoch == cfg.patience);
        for (std::size_t e = res.best_epoch + 1; e < res.log.size(); ++e) CHECK(res.log[e].valid >= res.best_valid);
    } else {
        CHECK(res.log.size() == cfg.max_epochs + 1);
    }
    set_warnings_silenced(false);
}

TEST_CASE("training is deterministic per seed") {
    set_warnings_silenced(true);
    auto cfg = toy::small_config();
    cfg.max_epochs = 2;
    const Dataset data = prepare_dataset(toy::small_synthetic(4), cfg);
    GenPluginModel a(cfg, data), b(cfg, data);
    const auto ra = pretrain(a, cfg), rb = pretrain(b, cfg);
    CHECK(log_csv(ra) == log_csv(rb));
    CHECK(a.store().checksum() == b.store().checksum());
    set_warnings_silenced(false);
}
