#include "xlab/mixer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace xlab::mixer {

MixPolicy::MixPolicy(std::vector<MixStage> stages) : stages_(std::move(stages)) {
    if (stages_.empty()) throw std::invalid_argument("a mix policy needs at least one stage");
    const std::size_t n = stages_.front().probs.size();
    if (n == 0) throw std::invalid_argument("a mix policy needs at least one language");
    double prev = 0.0;
    for (const auto& st : stages_) {
        if (st.probs.size() != n) throw std::invalid_argument("all policy stages must cover the same languages");
        if (!(st.until > prev && st.until <= 1.0)) {
            throw std::invalid_argument("stage ends must be strictly increasing within (0, 1]");
        }
        double sum = 0.0;
        for (double p : st.probs) {
            if (!(p >= 0.0)) throw std::invalid_argument("stage probabilities must be non-negative");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("stage probabilities must sum to 1");
        prev = st.until;
    }
    if (stages_.back().until != 1.0) throw std::invalid_argument("the last stage must end at 1");
}

bool operator==(const MixPolicy& a, const MixPolicy& b) {
    if (a.stages_.size() != b.stages_.size()) return false;
    for (std::size_t i = 0; i < a.stages_.size(); ++i) {
        if (a.stages_[i].until != b.stages_[i].until || a.stages_[i].probs != b.stages_[i].probs) return false;
    }
    return true;
}

MixPolicy MixPolicy::permuted(std::span<const int> permutation) const {
    const auto n = static_cast<std::size_t>(n_languages());
    if (permutation.size() != n) throw std::invalid_argument("permutation size differs from language count");
    auto stages = stages_;
    for (std::size_t k = 0; k < stages.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i) stages[k].probs[i] = stages_[k].probs.at(static_cast<std::size_t>(permutation[i]));
    }
    return MixPolicy(std::move(stages));
}

namespace {

std::vector<double> parse_percentages(std::string_view text, char sep) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find(sep, start);
        if (end == std::string_view::npos) end = text.size();
        const std::string field(text.substr(start, end - start));
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(field, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != field.size()) {
            throw std::invalid_argument("bad policy shorthand '" + std::string(text) + "'");
        }
        out.push_back(v / 100.0);
        start = end + 1;
    }
    // Accept "90/10" style percentages that sum to 100 up to rounding.
    double sum = 0.0;
    for (double p : out) sum += p;
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("policy shorthand '" + std::string(text) + "' does not sum to 100");
    for (double& p : out) p /= sum;
    return out;
}

}  // namespace

MixPolicy MixPolicy::parse_shorthand(std::string_view text) {
    if (auto v = text.find('v'); v != std::string_view::npos) {
        const auto first = parse_percentages(std::string(text.substr(0, v)) + "/" + std::string(text.substr(v + 1)), '/');
        if (first.size() != 2) throw std::invalid_argument("mirror shorthand needs two languages: '" + std::string(text) + "'");
        return MixPolicy({{0.5, first}, {1.0, {first[1], first[0]}}});
    }
    return MixPolicy({{1.0, parse_percentages(text, '/')}});
}

MixPolicy MixPolicy::from_json(const nlohmann::json& j) {
    if (j.is_string()) return parse_shorthand(j.get<std::string>());
    if (!j.is_array()) throw std::invalid_argument("policy must be a shorthand string or a list of stages");
    std::vector<MixStage> stages;
    for (const auto& st : j) {
        if (!st.contains("until") || !st.contains("probs")) {
            throw std::invalid_argument("each policy stage needs 'until' and 'probs'");
        }
        stages.push_back({st.at("until").get<double>(), st.at("probs").get<std::vector<double>>()});
    }
    return MixPolicy(std::move(stages));
}

nlohmann::json MixPolicy::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& st : stages_) j.push_back({{"until", st.until}, {"probs", st.probs}});
    return j;
}

std::vector<double> probs_at(const MixPolicy& policy, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0 || step < 0 || step >= total_steps) {
        throw std::invalid_argument("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    for (const auto& st : policy.stages()) {
        if (progress < st.until) return st.probs;
    }
    return policy.stages().back().probs;
}

std::vector<double> marginal(const MixPolicy& policy) {
    std::vector<double> out(static_cast<std::size_t>(policy.n_languages()), 0.0);
    double prev = 0.0;
    for (const auto& st : policy.stages()) {
        const double w = st.until - prev;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * st.probs[i];
        prev = st.until;
    }
    return out;
}

int sample_language(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    int last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        cum += probs[i];
        last_positive = static_cast<int>(i);
        if (u < cum) return static_cast<int>(i);
    }
    return last_positive;
}

TaggedSequence assign_and_encode(std::span<const TokenId> base_ids, const MixPolicy& policy, std::int64_t step,
                                 std::int64_t total_steps, const tokenizer::ClonedVocabulary& cv, Rng& rng) {
    if (policy.n_languages() != cv.n_languages()) {
        throw std::invalid_argument("policy covers " + std::to_string(policy.n_languages()) +
                                    " languages but the vocabulary has " + std::to_string(cv.n_languages()));
    }
    const auto probs = probs_at(policy, step, total_steps);
    TaggedSequence out;
    out.language = sample_language(probs, rng);
    out.ids = cv.encode_language(base_ids, out.language);
    return out;
}

// ---------------------------------------------------------------------------

ClonedSource::ClonedSource(const corpus::TokenStream& base_stream, tokenizer::ClonedVocabulary cv, MixPolicy policy,
                           std::uint64_t seed, Granularity granularity)
    : stream_(base_stream), cv_(std::move(cv)), policy_(std::move(policy)), granularity_(granularity), rng_(seed) {
    if (policy_.n_languages() != cv_.n_languages()) {
        throw std::invalid_argument("policy covers " + std::to_string(policy_.n_languages()) +
                                    " languages but the vocabulary has " + std::to_string(cv_.n_languages()));
    }
    stream_.validate(cv_.base().size());
}

TaggedSequence ClonedSource::next(std::int64_t step, std::int64_t total_steps, std::size_t seq_len) {
    const std::size_t need = seq_len + 1;
    if (stream_.size() < need) {
        throw std::invalid_argument("training stream has " + std::to_string(stream_.size()) +
                                    " tokens, fewer than one sequence of " + std::to_string(need));
    }
    if (cursor_ + need > stream_.size()) {
        cursor_ = 0;
        ++epoch_;
        log_info("training stream wrapped; epoch " + std::to_string(epoch_));
    }
    const std::span<const TokenId> slice(stream_.ids.data() + cursor_, need);
    TaggedSequence out;
    if (granularity_ == Granularity::sequence) {
        out = assign_and_encode(slice, policy_, step, total_steps, cv_, rng_);
    } else {
        const auto& b = stream_.doc_boundaries;
        const auto doc = static_cast<std::int64_t>(std::upper_bound(b.begin(), b.end(), cursor_) - b.begin());
        if (doc != doc_language_doc_) {
            doc_language_ = sample_language(probs_at(policy_, step, total_steps), rng_);
            doc_language_doc_ = doc;
        }
        out.language = doc_language_;
        out.ids = cv_.encode_language(slice, out.language);
    }
    cursor_ += seq_len;
    return out;
}

nlohmann::json ClonedSource::save_state() const {
    return {{"kind", "cloned"},     {"rng", rng_.save()},          {"cursor", cursor_},
            {"epoch", epoch_},      {"doc", doc_language_doc_},    {"doc_language", doc_language_}};
}

void ClonedSource::restore_state(const nlohmann::json& state) {
    if (state.at("kind") != "cloned") throw FormatError("source state is not for a cloned source");
    rng_.restore(state.at("rng").get<std::string>());
    cursor_ = state.at("cursor").get<std::uint64_t>();
    epoch_ = state.at("epoch").get<std::uint64_t>();
    doc_language_doc_ = state.at("doc").get<std::int64_t>();
    doc_language_ = state.at("doc_language").get<int>();
}

// ---------------------------------------------------------------------------

BilingualSource::BilingualSource(std::vector<const corpus::TokenStream*> streams, tokenizer::JointVocabulary joint,
                                 MixPolicy policy, std::uint64_t seed)
    : streams_(std::move(streams)), joint_(std::move(joint)), policy_(std::move(policy)), rng_(seed) {
    if (static_cast<int>(streams_.size()) != joint_.n_languages() || policy_.n_languages() != joint_.n_languages()) {
        throw std::invalid_argument("stream count, joint vocabulary and policy must agree on the language count");
    }
    for (std::size_t i = 0; i < streams_.size(); ++i) {
        if (streams_[i] == nullptr || streams_[i]->size() == 0) {
            throw std::invalid_argument("stream for language " + std::to_string(i) + " is empty");
        }
        streams_[i]->validate(joint_.remap[i].size());
    }
    cursors_.assign(streams_.size(), 0);
    epochs_.assign(streams_.size(), 0);
}

TaggedSequence BilingualSource::next(std::int64_t step, std::int64_t total_steps, std::size_t seq_len) {
    const std::size_t need = seq_len + 1;
    TaggedSequence out;
    out.language = sample_language(probs_at(policy_, step, total_steps), rng_);
    const auto lang = static_cast<std::size_t>(out.language);
    const auto& s = *streams_[lang];
    if (s.size() < need) {
        throw std::invalid_argument("stream for language " + std::to_string(lang) + " is shorter than one sequence");
    }
    if (cursors_[lang] + need > s.size()) {
        cursors_[lang] = 0;
        ++epochs_[lang];
        log_info("stream " + std::to_string(lang) + " wrapped; epoch " + std::to_string(epochs_[lang]));
    }
    out.ids = joint_.to_joint(out.language, std::span<const TokenId>(s.ids.data() + cursors_[lang], need));
    cursors_[lang] += seq_len;
    return out;
}

nlohmann::json BilingualSource::save_state() const {
    return {{"kind", "bilingual"}, {"rng", rng_.save()}, {"cursors", cursors_}, {"epochs", epochs_}};
}

void BilingualSource::restore_state(const nlohmann::json& state) {
    if (state.at("kind") != "bilingual") throw FormatError("source state is not for a bilingual source");
    rng_.restore(state.at("rng").get<std::string>());
    cursors_ = state.at("cursors").get<std::vector<std::uint64_t>>();
    epochs_ = state.at("epochs").get<std::vector<std::uint64_t>>();
}

}  // namespace xlab::mixer
