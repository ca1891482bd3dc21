#include "doctest.h"

#include <cmath>

#include "fixtures.hpp"
#include "xlab/mixer.hpp"
#include "xlab/trainer.hpp"

using namespace xlab;
using namespace xlab::trainer;
using xlab::test::TempDir;

namespace {

model::ModelConfig small_model(std::size_t vocab, std::vector<std::size_t> segments = {}) {
    model::ModelConfig c;
    c.n_layers = 1;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_ff = 64;
    c.vocab_size = static_cast<int>(vocab);
    c.max_seq_len = 32;
    c.vocab_segments = std::move(segments);
    return c;
}

TrainConfig small_train(std::int64_t steps) {
    TrainConfig t;
    t.total_steps = steps;
    t.batch_size = 4;
    t.seq_len = 16;
    t.lr_max = 3e-3;
    t.lr_min = 3e-4;
    t.warmup_steps = std::min<std::int64_t>(10, steps / 2);
    t.seed = 5;
    return t;
}

struct Fixture {
    corpus::TokenStream stream = test::markov_stream(16, 20000, 3);
    tokenizer::ClonedVocabulary cv = tokenizer::clone_vocab(test::flat_vocab(16), 2, 0.25, 1);

    mixer::ClonedSource source(const mixer::MixPolicy& policy, std::uint64_t seed = 9) const {
        return mixer::ClonedSource(stream, cv, policy, seed);
    }
    model::ModelConfig config() const { return small_model(cv.size(), cv.segments()); }
};

}  // namespace

TEST_CASE("lr schedule: warmup, peak and cosine floor") {
    TrainConfig c;
    c.total_steps = 10000;
    c.warmup_steps = 500;
    CHECK(lr_at(c, 0) == 0.0);
    CHECK(lr_at(c, 250) == doctest::Approx(3e-4));
    CHECK(lr_at(c, 500) == doctest::Approx(6e-4).epsilon(1e-12));
    const double last = lr_at(c, 9999);
    const double increment = lr_at(c, 9998) - last;
    CHECK(last >= 6e-6);
    CHECK(last - 6e-6 <= increment);
    for (std::int64_t s = 501; s < 10000; s += 97) CHECK(lr_at(c, s) <= lr_at(c, s - 1));
    CHECK_THROWS_AS(lr_at(c, 10000), std::invalid_argument);
    CHECK_THROWS_AS(lr_at(c, -1), std::invalid_argument);
}

TEST_CASE("train config validation") {
    auto c = small_train(10);
    c.warmup_steps = 10;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_train(10);
    c.lr_min = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = small_train(10);
    CHECK(TrainConfig::from_json(c.to_json()) == c);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"step", 1}}), std::invalid_argument);
}

TEST_CASE("zero steps leave the state unchanged") {
    Fixture f;
    auto src = f.source(mixer::MixPolicy::parse_shorthand("50/50"));
    const auto init = model::init<float>(f.config(), 1);
    const auto out = train(init, src, small_train(0));
    CHECK(out.state.params == init.params);
    CHECK(out.record.steps == 0);
    CHECK(out.record.losses.empty());
}

TEST_CASE("same seed twice gives bit-identical runs") {
    Fixture f;
    const auto policy = mixer::MixPolicy::parse_shorthand("90v10");
    auto s1 = f.source(policy);
    auto s2 = f.source(policy);
    const auto a = train(model::init<float>(f.config(), 1), s1, small_train(30));
    const auto b = train(model::init<float>(f.config(), 1), s2, small_train(30));
    CHECK(a.state.params == b.state.params);
    CHECK(a.record == b.record);
    CHECK(a.adam.m == b.adam.m);
}

TEST_CASE("token accounting matches the policy marginal") {
    Fixture f;
    auto src = f.source(mixer::MixPolicy::parse_shorthand("90v10"), 17);
    auto tc = small_train(200);
    tc.batch_size = 50;
    tc.seq_len = 4;
    model::ModelConfig tiny = small_model(f.cv.size(), f.cv.segments());
    tiny.d_model = 8;
    tiny.d_ff = 8;
    const auto out = train(model::init<float>(tiny, 1), src, tc);
    std::uint64_t total = 0;
    for (auto t : out.record.tokens) total += t;
    CHECK(total == 200u * 50u * 4u);
    for (auto t : out.record.tokens) CHECK(std::abs(static_cast<double>(t) / static_cast<double>(total) - 0.5) < 0.02);
    for (std::size_t s = 0; s < out.record.step_counts.size(); ++s) {
        CHECK(out.record.step_counts[s][0] + out.record.step_counts[s][1] == 200u);
    }
}

TEST_CASE("learnable Markov data: loss falls by at least 20% and below the unigram entropy") {
    const auto stream = test::markov_stream(16, 40000, 4);
    const auto cv = tokenizer::clone_vocab(test::flat_vocab(16), 1, 0.0, 1);
    mixer::ClonedSource src(stream, cv, mixer::MixPolicy::parse_shorthand("100"), 3);
    auto tc = small_train(500);
    tc.batch_size = 8;
    const auto out = train(model::init<float>(small_model(cv.size()), 2), src, tc);
    const auto& l = out.record.losses;
    double tail = 0;
    for (std::size_t i = l.size() - 20; i < l.size(); ++i) tail += l[i] / 20.0;
    INFO("initial " << l.front() << " final " << tail);
    CHECK(tail < 0.8 * l.front());
    CHECK(tail < test::unigram_entropy(stream, 16));
}

TEST_CASE("eval hooks and checkpoint schedule") {
    Fixture f;
    TempDir dir;
    auto src = f.source(mixer::MixPolicy::parse_shorthand("50/50"));
    auto tc = small_train(25);
    tc.checkpoint_every = 10;
    std::vector<std::int64_t> seen;
    TrainHooks hooks;
    hooks.eval_steps = {0, 10, 25};
    hooks.eval = [&](const model::ModelState<float>&, std::int64_t step) {
        seen.push_back(step);
        return std::vector<double>{1.0 + static_cast<double>(step), 2.0};
    };
    hooks.checkpoint_dir = dir.path();
    const auto out = train(model::init<float>(f.config(), 1), src, tc, hooks);
    CHECK(seen == std::vector<std::int64_t>{0, 10, 25});
    REQUIRE(out.record.evals.size() == 3);
    CHECK(out.record.evals[1].ppl[0] == 11.0);
    CHECK(std::filesystem::exists(dir / "step-00000010.xlck"));
    CHECK(std::filesystem::exists(dir / "step-00000020.xlck"));
    CHECK(std::filesystem::exists(dir / "step-00000025.xlck"));
    CHECK(out.last_checkpoint == dir / "step-00000025.xlck");

    CHECK(RunRecord::from_json(out.record.to_json()) == out.record);
    const auto csv = out.record.losses_csv();
    CHECK(csv.rfind("step,loss,tokens_lang0,tokens_lang1\n0,", 0) == 0);
}

TEST_CASE("interrupt and resume reproduces the uninterrupted run bit for bit") {
    Fixture f;
    const auto policy = mixer::MixPolicy::parse_shorthand("90v10");
    const auto tc = small_train(200);
    auto full_src = f.source(policy);
    const auto full = train(model::init<float>(f.config(), 1), full_src, tc);

    for (std::int64_t k : {0, 100}) {
        TempDir dir;
        TrainHooks stop;
        stop.checkpoint_dir = dir.path();
        stop.stop_after = k;
        auto src = f.source(policy);
        const auto partial = train(model::init<float>(f.config(), 1), src, tc, stop);
        REQUIRE(partial.last_checkpoint.has_value());
        CHECK(partial.record.steps == k);

        auto fresh_src = f.source(policy, 12345);  // state comes from the checkpoint
        const auto resumed = resume(*partial.last_checkpoint, fresh_src, tc);
        CHECK(resumed.state.params == full.state.params);
        CHECK(resumed.record == full.record);
    }
}

TEST_CASE("checkpoint integrity") {
    Fixture f;
    TempDir dir;
    auto src = f.source(mixer::MixPolicy::parse_shorthand("50/50"));
    TrainHooks hooks;
    hooks.checkpoint_dir = dir.path();
    const auto tc = small_train(5);
    const auto out = train(model::init<float>(f.config(), 1), src, tc, hooks);
    const auto path = *out.last_checkpoint;
    const auto ck = read_checkpoint(path);
    CHECK(ck.state.params == out.state.params);
    CHECK(ck.adam.v == out.adam.v);
    CHECK(ck.step == 5);
    CHECK(load_model(path).params == out.state.params);

    const std::string bytes = test::read_file(path);
    SUBCASE("corrupt header") {
        auto bad = bytes;
        bad[20] ^= 0x01;
        test::write_file(dir / "bad.xlck", bad);
        CHECK_THROWS_AS(read_checkpoint(dir / "bad.xlck"), DigestError);
    }
    SUBCASE("corrupt payload") {
        auto bad = bytes;
        bad[bad.size() - 3] ^= 0x40;
        test::write_file(dir / "bad.xlck", bad);
        CHECK_THROWS_AS(read_checkpoint(dir / "bad.xlck"), DigestError);
    }
    SUBCASE("different configuration") {
        auto other = tc;
        other.lr_max = 1e-3;
        auto s2 = f.source(mixer::MixPolicy::parse_shorthand("50/50"));
        CHECK_THROWS_AS(resume(path, s2, other), DigestError);
    }
    SUBCASE("not a checkpoint") {
        test::write_file(dir / "junk.xlck", "hello world, definitely not a checkpoint");
        CHECK_THROWS_AS(read_checkpoint(dir / "junk.xlck"), FormatError);
    }
}

TEST_CASE("non-finite loss aborts with step context") {
    Fixture f;
    auto src = f.source(mixer::MixPolicy::parse_shorthand("50/50"));
    auto init = model::init<float>(f.config(), 1);
    init.params[init.layout.layers[0].fc1_b] = std::numeric_limits<float>::infinity();
    try {
        train(init, src, small_train(5));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string what = e.what();
        CHECK(what.find("step 0") != std::string::npos);
        CHECK(what.find("last good checkpoint: none") != std::string::npos);
    }
}

TEST_CASE("relabelling clones permutes the trained state exactly") {
    Fixture f;
    const auto policy = mixer::MixPolicy::parse_shorthand("90/10");
    const std::vector<int> swap = {1, 0};
    const auto cv_b = f.cv.relabeled(swap);

    std::vector<TokenId> new_of_old(f.cv.size());
    for (TokenId id = 0; id < f.cv.size(); ++id) {
        const auto o = f.cv.origin(id);
        new_of_old[id] = o.language < 0 ? id : cv_b.to_final(o.language, o.base_id);
    }
    auto init_b = model::init<float>(f.config(), 1);
    const auto init_a = init_b;
    model::permute_vocab_rows(init_b, new_of_old);

    mixer::ClonedSource src_a(f.stream, f.cv, policy, 9);
    mixer::ClonedSource src_b(f.stream, cv_b, policy, 9);
    const auto a = train(init_a, src_a, small_train(60));
    const auto b = train(init_b, src_b, small_train(60));
    auto moved = a.state;
    model::permute_vocab_rows(moved, new_of_old);
    CHECK(moved.params == b.state.params);
    CHECK(a.record.losses == b.record.losses);
}
