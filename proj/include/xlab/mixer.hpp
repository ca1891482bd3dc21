#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "xlab/common.hpp"
#include "xlab/corpus.hpp"
#include "xlab/tokenizer.hpp"

namespace xlab::mixer {

struct MixStage {
    double until;                // end of the stage as a fraction of training
    std::vector<double> probs;   // one entry per language
};

/// Ordered schedule stages. Stage k covers the half-open progress interval
/// [until_{k-1}, until_k); switches are immediate.
class MixPolicy {
public:
    explicit MixPolicy(std::vector<MixStage> stages);

    const std::vector<MixStage>& stages() const noexcept { return stages_; }
    int n_languages() const noexcept { return static_cast<int>(stages_.front().probs.size()); }
    bool is_static() const noexcept { return stages_.size() == 1; }

    /// Same schedule with languages reordered: result probs[n] = probs[perm[n]].
    MixPolicy permuted(std::span<const int> permutation) const;

    /// "50/50", "90/10", "50/25/25" (single stage); "90v10" (two-stage mirror:
    /// 90/10 for the first half, 10/90 for the second).
    static MixPolicy parse_shorthand(std::string_view text);
    /// Either a shorthand string or a list of {"until": x, "probs": [...]}.
    static MixPolicy from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    friend bool operator==(const MixPolicy& a, const MixPolicy& b);

private:
    std::vector<MixStage> stages_;
};

std::vector<double> probs_at(const MixPolicy& policy, std::int64_t step, std::int64_t total_steps);

/// Stage-length-weighted average of the stage probabilities.
std::vector<double> marginal(const MixPolicy& policy);

/// Inverse-CDF draw with a single uniform variate.
int sample_language(std::span<const double> probs, Rng& rng);

struct TaggedSequence {
    int language = 0;
    std::vector<TokenId> ids;
};

/// Samples one language for the whole sequence and maps every base id into
/// that language's block of the cloned vocabulary.
TaggedSequence assign_and_encode(std::span<const TokenId> base_ids, const MixPolicy& policy, std::int64_t step,
                                 std::int64_t total_steps, const tokenizer::ClonedVocabulary& cv, Rng& rng);

// ---------------------------------------------------------------------------
// Sequence sources for training. Each call yields seq_len + 1 ids (inputs
// plus the shifted targets) and the language they were drawn for. Sources
// are deterministic given their seed and fully checkpointable.
// ---------------------------------------------------------------------------

class SequenceSource {
public:
    virtual ~SequenceSource() = default;
    virtual int n_languages() const = 0;
    virtual std::size_t vocab_size() const = 0;
    virtual TaggedSequence next(std::int64_t step, std::int64_t total_steps, std::size_t seq_len) = 0;
    virtual nlohmann::json save_state() const = 0;
    virtual void restore_state(const nlohmann::json& state) = 0;
};

enum class Granularity { sequence, document };

/// Reads contiguous slices of one base-vocabulary stream (documents
/// concatenated, wrapping at the end) and assigns each slice to a cloned
/// language. In document granularity the language is drawn when the cursor
/// enters a new document and kept for every slice starting inside it.
class ClonedSource final : public SequenceSource {
public:
    ClonedSource(const corpus::TokenStream& base_stream, tokenizer::ClonedVocabulary cv, MixPolicy policy,
                 std::uint64_t seed, Granularity granularity = Granularity::sequence);

    int n_languages() const override { return cv_.n_languages(); }
    std::size_t vocab_size() const override { return cv_.size(); }
    TaggedSequence next(std::int64_t step, std::int64_t total_steps, std::size_t seq_len) override;
    nlohmann::json save_state() const override;
    void restore_state(const nlohmann::json& state) override;

    const tokenizer::ClonedVocabulary& vocabulary() const noexcept { return cv_; }
    std::uint64_t epoch() const noexcept { return epoch_; }

private:
    const corpus::TokenStream& stream_;
    tokenizer::ClonedVocabulary cv_;
    MixPolicy policy_;
    Granularity granularity_;
    Rng rng_;
    std::uint64_t cursor_ = 0;
    std::uint64_t epoch_ = 0;
    std::int64_t doc_language_doc_ = -1;
    int doc_language_ = 0;
};

/// Real-language mode: one stream per language (each in its own source
/// vocabulary), remapped into a joint id space. Each language keeps its own
/// cursor; an exhausted stream wraps and bumps that language's epoch.
class BilingualSource final : public SequenceSource {
public:
    BilingualSource(std::vector<const corpus::TokenStream*> streams, tokenizer::JointVocabulary joint, MixPolicy policy,
                    std::uint64_t seed);

    int n_languages() const override { return joint_.n_languages(); }
    std::size_t vocab_size() const override { return joint_.size; }
    TaggedSequence next(std::int64_t step, std::int64_t total_steps, std::size_t seq_len) override;
    nlohmann::json save_state() const override;
    void restore_state(const nlohmann::json& state) override;

    std::uint64_t epoch(int language) const { return epochs_.at(static_cast<std::size_t>(language)); }

private:
    std::vector<const corpus::TokenStream*> streams_;
    tokenizer::JointVocabulary joint_;
    MixPolicy policy_;
    Rng rng_;
    std::vector<std::uint64_t> cursors_;
    std::vector<std::uint64_t> epochs_;
};

}  // namespace xlab::mixer
