#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "genplugin/log.hpp"
#include "genplugin/ssg_decoder.hpp"
#include "gradcheck.hpp"

using namespace genplugin;
using namespace genplugin::ssg;

namespace {

DecoderConfig small() {
    DecoderConfig c;
    c.dims = {8, 2, 16, 2};
    c.token_dim = 6;
    return c;
}

Var random_memory(std::size_t rows, std::size_t d, Rng& rng) {
    Matrix m(rows, d);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return ag::constant(std::move(m));
}

// Random sub-catalog of the tuple space, inserted into a trie.
semid::IdTrie random_trie(const std::vector<std::size_t>& sizes, std::size_t n, Rng& rng) {
    std::set<semid::TokenTuple> picked;
    while (picked.size() < n) {
        semid::TokenTuple t;
        for (auto v : sizes) t.push_back(rng.index(v));
        picked.insert(t);
    }
    semid::IdTrie trie;
    std::size_t item = 0;
    for (const auto& t : picked) trie.insert(t, item++);
    return trie;
}

std::vector<double> softmax(std::vector<double> x) {
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0;
    for (auto& v : x) z += (v = std::exp(v - mx));
    for (auto& v : x) v /= z;
    return x;
}

}  // namespace

TEST_CASE("teacher-forced decoding: shapes, determinism and causality") {
    nn::ParameterStore store;
    Rng rng(1);
    const SharedDecoder one(store, "one", small(), {4}, rng);
    const auto mem1 = one.prepare(random_memory(3, 8, rng));
    CHECK(one.decode_teacher_forced(mem1, std::vector<std::size_t>{2}).size() == 1);

    const SharedDecoder dec(store, "dec", small(), {4, 3, 5}, rng);
    const auto mem = dec.prepare(random_memory(5, 8, rng));
    const std::vector<std::size_t> t{1, 2, 3};
    const auto a = dec.decode_teacher_forced(mem, t), b = dec.decode_teacher_forced(mem, t);
    for (std::size_t l = 0; l < 3; ++l) CHECK(max_abs_diff(a[l]->value, b[l]->value) == 0.0);
    CHECK(a[2]->value.cols() == 5);
    // Changing tokens after position l leaves logits at l and before untouched.
    const auto c = dec.decode_teacher_forced(mem, std::vector<std::size_t>{1, 0, 4});
    CHECK(max_abs_diff(a[0]->value, c[0]->value) == 0.0);
    CHECK(max_abs_diff(a[1]->value, c[1]->value) == 0.0);
    const auto d = dec.decode_teacher_forced(mem, std::vector<std::size_t>{3, 2, 3});
    CHECK(max_abs_diff(a[0]->value, d[0]->value) == 0.0);
    CHECK(max_abs_diff(a[1]->value, d[1]->value) > 0.0);
    CHECK_THROWS_AS(dec.decode_teacher_forced(mem, std::vector<std::size_t>{1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(dec.decode_teacher_forced(mem, std::vector<std::size_t>{1, 3, 0}), std::out_of_range);
}

TEST_CASE("top-q refinement") {
    const std::vector<double> two{2.0, 0.0};
    const auto r = refine_top_q(two, 2);
    CHECK(r.tokens == std::vector<std::size_t>{0, 1});
    CHECK(r.weights[0] == doctest::Approx(std::exp(2.0) / (std::exp(2.0) + 1)).epsilon(1e-12));
    CHECK(r.weights[0] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(r.weights[1] == doctest::Approx(0.1192).epsilon(1e-3));

    const std::vector<double> x{0.3, -1.0, 2.5, 2.5, 0.0};
    const auto point = refine_top_q(x, 1);
    CHECK(point.tokens == std::vector<std::size_t>{2});  // tie goes to the lower id
    CHECK(point.weights == std::vector<double>{1.0});
    const auto full = refine_top_q(x, 5);
    const auto sm = softmax(x);
    for (std::size_t j = 0; j < 5; ++j) CHECK(full.weights[j] == doctest::Approx(sm[full.tokens[j]]).epsilon(1e-12));
    CHECK_THROWS_AS(refine_top_q(x, 6), std::invalid_argument);
    CHECK_THROWS_AS(refine_top_q(x, 0), std::invalid_argument);

    const std::vector<Var> logits{ag::constant(Matrix(1, 3, std::vector<double>{1, 2, 3})),
                                  ag::constant(Matrix(1, 2, std::vector<double>{1, 0})),
                                  ag::constant(Matrix(1, 4))};
    const auto per_level = language_view_refine(logits, 5);
    REQUIRE(per_level.size() == 2);
    CHECK(per_level[0].tokens.size() == 3);
    CHECK(per_level[1].tokens.size() == 2);
}

TEST_CASE("substitution plans") {
    Rng rng(2);
    SUBCASE("p1 = 1 recovers teacher forcing") {
        for (int i = 0; i < 100; ++i) {
            const auto p = draw_plan(1.0, 0.0, 3, 5, rng);
            CHECK_FALSE(p.substitute_item);
            CHECK(substituted_inputs(p, 3) == 0);
        }
    }
    SUBCASE("p1 = p2 = 0 fuses every position") {
        const auto p = draw_plan(0.0, 0.0, 3, 5, rng);
        CHECK(p.substitute_item);
        CHECK(substituted_inputs(p, 4) == 3);
    }
    SUBCASE("per-token rate is (1-p1)(1-p2)") {
        for (auto [p1, p2] : {std::pair{0.6, 0.5}, std::pair{0.5, 0.6}}) {
            std::size_t hits = 0;
            const std::size_t draws = 100000;
            for (std::size_t i = 0; i < draws; ++i) hits += draw_plan(p1, p2, 1, 5, rng).substitute[0];
            const double rate = static_cast<double>(hits) / draws;
            CHECK(rate == doctest::Approx(0.2).epsilon(0.05));
        }
    }
    CHECK_THROWS_AS(draw_plan(1.5, 0.5, 2, 5, rng), std::invalid_argument);
}

TEST_CASE("applying a plan mixes ground truth and fused embeddings") {
    nn::ParameterStore store;
    Rng rng(3);
    const SharedDecoder dec(store, "dec", small(), {4, 3, 5}, rng);
    const std::vector<std::size_t> t{1, 2, 3};
    const std::vector<RefinedDistribution> refined{{{3, 0}, {0.7, 0.3}}, {{1, 2, 0}, {0.5, 0.3, 0.2}}};

    SubstitutionPlan keep;
    keep.substitute.assign(3, false);
    CHECK(max_abs_diff(apply_substitution(dec, keep, t, refined)->value, dec.teacher_inputs(t)->value) == 0.0);

    SubstitutionPlan sub;
    sub.substitute_item = true;
    sub.substitute = {false, true, false};
    const auto rows = apply_substitution(dec, sub, t, refined)->value;
    const auto gt = dec.teacher_inputs(t)->value;
    for (std::size_t j = 0; j < rows.cols(); ++j) {
        CHECK(rows(0, j) == gt(0, j));
        CHECK(rows(1, j) == gt(1, j));
        // Convex combination of the listed token rows.
        double expect = 0;
        for (std::size_t k = 0; k < 3; ++k)
            expect += refined[1].weights[k] * dec.token_embedding(1, refined[1].tokens[k])->value[j];
        CHECK(rows(2, j) == doctest::Approx(expect).epsilon(1e-12));
    }
    // The fusion weights are constants: gradients reach only the token table.
    const auto fused = dec.fused_embedding(1, refined[1]);
    CHECK(fused->requires_grad);
    CHECK_THROWS_AS(dec.fused_embedding(1, {{7}, {1.0}}), std::out_of_range);
}

TEST_CASE("temperature scaling") {
    const std::vector<double> z{2.0, 0.0};
    const auto half = temperature_scale(z, 0.5);
    CHECK(half.probs[0] == doctest::Approx(std::exp(4.0) / (std::exp(4.0) + 1)).epsilon(1e-12));
    CHECK(half.probs[0] == doctest::Approx(0.9820).epsilon(1e-4));
    const std::vector<double> w{3.0, -1.0, 0.5, 2.0};
    const auto one = temperature_scale(w, 1.0);
    const auto sm = softmax(w);
    for (std::size_t j = 0; j < 4; ++j) CHECK(one.probs[j] == doctest::Approx(sm[j]).epsilon(1e-12));
    const auto flat = temperature_scale(w, 1e6);
    CHECK(*std::max_element(flat.probs.begin(), flat.probs.end()) -
              *std::min_element(flat.probs.begin(), flat.probs.end()) <
          1e-4);
    const std::vector<double> huge{1000.0, 999.0};
    const auto stable = temperature_scale(huge, 1.0);
    CHECK(std::isfinite(stable.probs[0]));
    CHECK(stable.probs[0] + stable.probs[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(temperature_scale(z, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(temperature_scale(z, -1.0), std::invalid_argument);
}

TEST_CASE("mutual KL: hand values, symmetry and positivity") {
    using D = TokenDistribution;
    const D p{0, {1.0, 0.0}, 1.0}, q{0, {0.5, 0.5}, 1.0};
    const double forward = std::log(2.0);
    const double reverse = 0.5 * std::log(0.5 / kKlFloor) + 0.5 * std::log(0.5 / 1.0);
    CHECK(kl_mutual({{p}}, {{q}}) == doctest::Approx(forward + reverse).epsilon(1e-9));
    CHECK(kl_mutual({{q}}, {{q}}) == doctest::Approx(0.0).epsilon(1e-9));

    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(5), b(5);
        for (auto& x : a) x = 3 * rng.normal();
        for (auto& x : b) x = 3 * rng.normal();
        const D da = temperature_scale(a, 2.0), db = temperature_scale(b, 2.0);
        const double ab = kl_mutual({{da, db}}, {{db, da}});
        CHECK(ab > 0.0);
        CHECK(ab == kl_mutual({{db, da}}, {{da, db}}));
    }
}

TEST_CASE("differentiable KL agrees with the numeric one and its gradient") {
    Rng rng(5);
    auto row = [&](std::size_t n) {
        Matrix m(1, n);
        for (std::size_t i = 0; i < n; ++i) m[i] = rng.normal();
        return ag::leaf(std::move(m));
    };
    const std::vector<Var> lan{row(4), row(3)}, id{row(4), row(3)};
    const double phi = 2.0;
    const double value = ag::item(kl_mutual_loss(lan, id, phi));
    std::vector<TokenDistribution> pl, pi;
    for (std::size_t l = 0; l < 2; ++l) {
        pl.push_back(temperature_scale(lan[l]->value.span(), phi));
        pi.push_back(temperature_scale(id[l]->value.span(), phi));
    }
    CHECK(value == doctest::Approx(kl_mutual({pl}, {pi})).epsilon(1e-9));
    CHECK(ag::item(kl_mutual_loss(lan, lan, phi)) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(gradcheck::check([&] { return kl_mutual_loss(lan, id, phi); }, {lan[0], lan[1], id[0], id[1]}).max_rel <
          1e-6);
}

TEST_CASE("generation loss is the mean token cross-entropy") {
    const std::vector<Var> logits{ag::constant(Matrix(1, 2, std::vector<double>{0, 0})),
                                  ag::constant(Matrix(1, 3, std::vector<double>{1, 0, 0}))};
    const std::vector<std::size_t> t{1, 0};
    const double expect = 0.5 * (std::log(2.0) + std::log(std::exp(1.0) + 2.0) - 1.0);
    CHECK(ag::item(generation_loss(logits, t)) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("constrained generation only emits catalog IDs") {
    set_warnings_silenced(true);
    Rng rng(6);
    for (int trial = 0; trial < 60; ++trial) {
        const std::vector<std::size_t> sizes{2 + rng.index(4), 2 + rng.index(4), 1 + rng.index(3)};
        std::size_t space = sizes[0] * sizes[1] * sizes[2];
        const auto trie = random_trie(sizes, 1 + rng.index(space), rng);
        nn::ParameterStore store;
        Rng init(static_cast<std::uint64_t>(trial));
        const SharedDecoder dec(store, "dec", small(), sizes, init);
        const auto mem = dec.prepare(random_memory(1 + rng.index(6), 8, rng));
        const auto out = generate(dec, mem, trie, 1 + rng.index(12));
        for (const auto& g : out) {
            REQUIRE(trie.contains(g.tokens));
            CHECK(trie.item_of(g.tokens) == g.item);
        }
    }
    set_warnings_silenced(false);
}

TEST_CASE("full-width beam equals exhaustive scoring") {
    Rng rng(7);
    const std::vector<std::size_t> sizes{4, 3, 3};
    const auto trie = random_trie(sizes, 20, rng);
    nn::ParameterStore store;
    const SharedDecoder dec(store, "dec", small(), sizes, rng);
    const auto mem = dec.prepare(random_memory(4, 8, rng));
    const auto beam = generate(dec, mem, trie, 20);
    const auto ref = score_all(dec, mem, trie);
    REQUIRE(beam.size() == 20);
    REQUIRE(ref.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(beam[i].item == ref[i].item);
        CHECK(beam[i].log_prob == doctest::Approx(ref[i].log_prob).epsilon(1e-9));
    }
    for (std::size_t i = 1; i < 20; ++i) CHECK(beam[i - 1].log_prob >= beam[i].log_prob);

    set_warnings_silenced(true);
    const auto before = warning_count();
    CHECK(generate(dec, mem, trie, 50).size() == 20);
    CHECK(warning_count() == before + 1);
    set_warnings_silenced(false);

    semid::IdTrie single;
    single.insert({2, 1, 0}, 0);
    const auto only = generate(dec, mem, single, 1);
    REQUIRE(only.size() == 1);
    CHECK(only[0].tokens == semid::TokenTuple{2, 1, 0});
}

TEST_CASE("greedy decoding follows the argmax of each prefix") {
    Rng rng(8);
    nn::ParameterStore store;
    const SharedDecoder dec(store, "dec", small(), {4, 3, 5}, rng);
    const auto mem = dec.prepare(random_memory(3, 8, rng));
    const auto g = greedy_decode(dec, mem);
    const auto tf = dec.decode_teacher_forced(mem, g);
    for (std::size_t l = 0; l < 3; ++l) {
        const auto x = tf[l]->value.span();
        CHECK(static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin()) == g[l]);
    }
    // Free-running logits are the teacher-forced logits of the greedy path.
    const auto fr = free_running_logits(dec, mem);
    REQUIRE(fr.size() == 3);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(max_abs_diff(fr[l]->value, tf[l]->value) < 1e-12);
        CHECK_FALSE(fr[l]->requires_grad);
    }
}

TEST_CASE("retrieved memory rows carry the segment embedding") {
    Rng rng(9);
    nn::ParameterStore store;
    const SharedDecoder dec(store, "dec", small(), {3, 3}, rng);
    const auto seq = random_memory(2, 8, rng);
    const auto ret = random_memory(3, 8, rng);
    const auto m = dec.augment_memory(seq, ret)->value;
    REQUIRE(m.rows() == 5);
    const auto seg = store.get("dec.retrieval_segment")->value;
    for (std::size_t j = 0; j < 8; ++j) {
        CHECK(m(1, j) == seq->value(1, j));
        CHECK(m(3, j) == doctest::Approx(ret->value(1, j) + seg[j]));
    }
}
