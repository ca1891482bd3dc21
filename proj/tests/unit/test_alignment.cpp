#include "doctest.h"

#include <cmath>
#include <functional>

#include "fixtures.hpp"
#include "xlab/alignment.hpp"

using namespace xlab;
using namespace xlab::alignment;

namespace {

model::ModelConfig align_model(std::size_t vocab, std::size_t d, std::vector<std::size_t> segments = {},
                               bool tied = true) {
    model::ModelConfig c;
    c.n_layers = 2;
    c.d_model = static_cast<int>(d);
    c.n_heads = 2;
    c.d_ff = static_cast<int>(2 * d);
    c.vocab_size = static_cast<int>(vocab);
    c.max_seq_len = 32;
    c.tie_embeddings = tied;
    c.vocab_segments = std::move(segments);
    return c;
}

// Exhaustive search over injections of the shorter side into the longer one;
// partial sums run in row order so equal matchings give equal doubles.
double brute_force_best(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
    const bool flip = rows > cols;
    const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<char> used(m, 0);
    std::vector<std::size_t> choice(n);
    std::function<void(std::size_t)> go = [&](std::size_t i) {
        if (i == n) {
            // Re-add in the orientation matching_weight uses (sorted by row).
            std::vector<std::pair<std::size_t, std::size_t>> pairs;
            for (std::size_t k = 0; k < n; ++k) pairs.emplace_back(flip ? choice[k] : k, flip ? k : choice[k]);
            std::sort(pairs.begin(), pairs.end());
            double s = 0;
            for (auto [r, c] : pairs) s += w[r * cols + c];
            best = std::max(best, s);
            return;
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (used[j]) continue;
            used[j] = 1;
            choice[i] = j;
            go(i + 1);
            used[j] = 0;
        }
    };
    go(0);
    return best;
}

}  // namespace

TEST_CASE("cosine basics") {
    const std::vector<double> a = {1, 2, 3}, b = {-1, -2, -3}, c = {3, 0, -1};
    CHECK(cosine(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine(a, b) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(cosine(a, c) == doctest::Approx(0.0));
    const std::vector<double> z = {0, 0, 0};
    CHECK(std::isnan(cosine(a, z)));
}

TEST_CASE("identity-dominant weights give the identity matching") {
    const std::vector<double> w = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const auto m = max_weight_matching(w, 3, 3);
    REQUIRE(m.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(m[i] == std::pair<std::size_t, std::size_t>{i, i});
    CHECK(matching_weight(w, 3, m) == 3.0);
}

TEST_CASE("matching equals brute force on random rectangular matrices") {
    Rng rng(2024);
    int mismatches = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t rows = 1 + rng.below(8), cols = 1 + rng.below(8);
        std::vector<double> w(rows * cols);
        for (auto& x : w) x = rng.uniform() * 2 - 1;
        const auto m = max_weight_matching(w, rows, cols);
        CHECK(m.size() == std::min(rows, cols));
        std::vector<char> used_r(rows, 0), used_c(cols, 0);
        for (auto [r, c] : m) {
            CHECK_FALSE(used_r[r]);
            CHECK_FALSE(used_c[c]);
            used_r[r] = used_c[c] = 1;
        }
        mismatches += matching_weight(w, cols, m) != brute_force_best(w, rows, cols);
    }
    CHECK(mismatches == 0);
    CHECK_THROWS_AS(max_weight_matching(std::vector<double>{}, 0, 3), std::invalid_argument);
}

TEST_CASE("embedding similarity: copied rows and fresh init") {
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(300), 2, 0.1, 3);
    auto m = model::init<float>(align_model(cv.size(), 64, cv.segments()), 5);
    std::vector<std::uint64_t> freq(300);
    for (std::size_t i = 0; i < freq.size(); ++i) freq[i] = i * i;

    const auto fresh = embedding_similarity(m, cv, freq, 1);
    CHECK(fresh.pairs == cv.n_duplicated());
    CHECK(std::abs(fresh.mean - fresh.baseline) < 0.05);
    std::size_t bucketed = 0;
    for (const auto& b : fresh.buckets) bucketed += b.pairs;
    CHECK(bucketed == fresh.pairs);
    CHECK(fresh.buckets.front().decade == -1);

    const auto d = static_cast<std::size_t>(m.config.d_model);
    for (TokenId base : cv.duplicated_ids()) {
        const auto from = m.layout.wte + cv.to_final(0, base) * d;
        const auto to = m.layout.wte + cv.to_final(1, base) * d;
        std::copy_n(m.params.begin() + static_cast<std::ptrdiff_t>(from), d,
                    m.params.begin() + static_cast<std::ptrdiff_t>(to));
    }
    const auto copied = embedding_similarity(m, cv, {}, 1);
    CHECK(copied.mean == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(copied.buckets.empty());
    CHECK(copied.to_json().contains("baseline"));

    const auto all_anchor = tokenizer::clone_vocab(test::flat_vocab(20), 2, 1.0, 1);
    const auto ma = model::init<float>(align_model(all_anchor.size(), 16), 1);
    CHECK_THROWS_AS(embedding_similarity(ma, all_anchor, {}, 1), std::invalid_argument);
}

TEST_CASE("hidden similarity on identical and fully anchored pairs is 1") {
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(40), 2, 1.0, 1);
    const auto m = model::init<double>(align_model(cv.size(), 16, cv.segments()), 2);
    const auto stream = test::markov_stream(40, 20, 3);
    const auto base = std::vector<TokenId>(stream.ids.begin(), stream.ids.end());
    const std::vector<ParallelPair> pairs = {cloned_pair(cv, base, 0, 1)};
    const auto t = hidden_similarity(m, std::span<const ParallelPair>(pairs), Matching::positional);
    REQUIRE(t.mean.size() == 3);
    for (double v : t.mean) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(t.token_pairs == 20);

    const std::vector<ParallelPair> empty = {ParallelPair{{}, {1, 2}, ParallelPair::Mode::real}};
    CHECK_THROWS_AS(hidden_similarity(m, std::span<const ParallelPair>(empty), Matching::max_weight),
                    std::invalid_argument);
    CHECK_THROWS_AS(hidden_similarity(m, std::span<const ParallelPair>(pairs), Matching::max_weight),
                    std::invalid_argument);
}

TEST_CASE("matching on cloned pairs never scores below positional") {
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(40), 2, 0.5, 4);
    const auto m = model::init<double>(align_model(cv.size(), 16, cv.segments()), 9);
    const auto stream = test::markov_stream(40, 60, 8, 20);
    std::vector<ParallelPair> pairs;
    for (std::size_t d = 0; d < stream.n_documents(); ++d) {
        const auto doc = stream.document(d);
        pairs.push_back(cloned_pair(cv, doc, 0, 1));
        check_cloned_pair(cv, pairs.back());
    }
    const std::span<const ParallelPair> ps(pairs);
    const auto pos = hidden_similarity(m, ps, Matching::positional);
    const auto mw = hidden_similarity(m, ps, Matching::max_weight, true);
    double pos_mean = 0, mw_mean = 0;
    for (std::size_t l = 0; l < pos.mean.size(); ++l) {
        pos_mean += pos.mean[l];
        mw_mean += mw.mean[l];
    }
    CHECK(mw_mean >= pos_mean - 1e-9);

    auto shorter = pairs[0];
    shorter.seq_b.pop_back();
    CHECK_THROWS_AS(check_cloned_pair(cv, shorter), std::invalid_argument);
    auto shifted = pairs[0];
    std::rotate(shifted.seq_b.begin(), shifted.seq_b.begin() + 1, shifted.seq_b.end());
    CHECK_THROWS_AS(check_cloned_pair(cv, shifted), std::invalid_argument);
}

TEST_CASE("strictly dominant diagonal recovers the positional matching") {
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(30), 2, 1.0, 1);
    const auto m = model::init<double>(align_model(cv.size(), 16, cv.segments()), 3);
    std::vector<TokenId> ids = {3, 7, 1, 9, 12, 4, 20, 25};
    const auto enc = cv.encode_language(ids, 0);
    const auto trace = model::forward(m, enc);
    const auto matched = match_tokens(trace.hidden, trace.hidden, 16);
    REQUIRE(matched.size() == ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) CHECK(matched[i] == std::pair<std::size_t, std::size_t>{i, i});
}

TEST_CASE("hidden table CSV carries a delta row") {
    HiddenTable a{{0.5, 0.55, 0.4}, 10}, b{{0.6, 0.86, 0.5}, 10};
    const std::vector<std::pair<std::string, HiddenTable>> rows = {{"50/50", a}, {"90/10", b}};
    const auto csv = hidden_csv(rows);
    CHECK(csv == "run,emb,layer_1,layer_2\n50/50,0.5000,0.5500,0.4000\n90/10,0.6000,0.8600,0.5000\n"
                 "delta,0.1000,0.3100,0.1000\n");
    const std::vector<std::string> pa = {"the", "house"}, pb = {"la", "maison"};
    const std::vector<double> w = {0.9, 0.1, 0.2, 0.8};
    const std::vector<std::pair<std::size_t, std::size_t>> mt = {{0, 0}, {1, 1}};
    CHECK(alignment_text(pa, pb, mt, w, 2) == "the   <-> la  0.900\nhouse <-> maison  0.800\n");
}

TEST_CASE("gradient similarity: same sequence, disjoint embeddings, macro average") {
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(30), 2, 0.0, 1);
    const auto stream = test::markov_stream(30, 16, 2);
    const std::vector<TokenId> base(stream.ids.begin(), stream.ids.end());

    const auto untied = model::init<double>(align_model(cv.size(), 16, cv.segments(), false), 4);
    const std::vector<ParallelPair> same = {cloned_pair(cv, base, 0, 0)};
    const auto s = gradient_similarity(untied, std::span<const ParallelPair>(same));
    for (const auto& g : s.groups) {
        REQUIRE(g.cosine.has_value());
        CHECK(*g.cosine == doctest::Approx(1.0).epsilon(1e-9));
    }
    REQUIRE(s.macro.has_value());
    CHECK(*s.macro == doctest::Approx(1.0).epsilon(1e-9));

    const std::vector<ParallelPair> cross = {cloned_pair(cv, base, 0, 1)};
    const auto x = gradient_similarity(untied, std::span<const ParallelPair>(cross));
    std::size_t in_macro = 0;
    for (const auto& g : x.groups) {
        if (g.group == "token_embedding") {
            CHECK(*g.cosine == 0.0);
            CHECK_FALSE(g.in_macro);
        }
        if (g.group == "position_embedding") CHECK_FALSE(g.in_macro);
        in_macro += g.in_macro;
        if (g.cosine) CHECK(std::abs(*g.cosine) <= 1.0);
    }
    CHECK(in_macro == x.groups.size() - 2);
    CHECK(x.to_json()["groups"].size() == x.groups.size());

    auto frozen = untied;
    for (auto& v : frozen.group("final_ln")) v = 0.0;  // zero gain and bias: upstream grads vanish
    const auto z = gradient_similarity(frozen, std::span<const ParallelPair>(cross));
    bool undefined = false;
    for (const auto& g : z.groups) undefined = undefined || !g.cosine;
    CHECK(undefined);
}
