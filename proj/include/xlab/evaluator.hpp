#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/corpus.hpp"
#include "xlab/model.hpp"
#include "xlab/tokenizer.hpp"

namespace xlab::evaluator {

/// Windows start at 0, stride, 2*stride, ... and hold `window` input tokens.
/// The first window of a document scores every target it covers; each later
/// window scores only the targets past the previous window's end. Context
/// never crosses a document boundary.
struct WindowParams {
    std::size_t window = 512;
    std::size_t stride = 128;
    void validate() const;
};

struct LanguageScore {
    std::string language;
    double ppl = 0.0;
    double nll = 0.0;   // summed negative log-likelihood (nats)
    std::uint64_t tokens_scored = 0;
};

struct EvalResult {
    std::vector<LanguageScore> languages;
    WindowParams window;

    /// "lang,ppl,tokens_scored"
    std::string csv() const;
    nlohmann::json to_json() const;
    static EvalResult from_json(const nlohmann::json& j);
    std::vector<double> ppl() const;
};

/// Log-probabilities of tokens 1..len-1 of one document (entry i-1 belongs
/// to token i), each computed with the context the sliding scheme gives it.
template <typename T>
std::vector<double> document_log_probs(const model::ModelState<T>& state, std::span<const TokenId> document,
                                       const WindowParams& params);

/// Start of the window that scores token `position` (>= 1).
std::size_t window_start(std::size_t position, const WindowParams& params);

/// Sliding-window perplexity over every document of the stream. Per-document
/// sums use compensated summation; documents are combined in a fixed order
/// independent of their position in the stream.
template <typename T>
LanguageScore sliding_ppl(const model::ModelState<T>& state, const corpus::TokenStream& stream,
                          const WindowParams& params, std::string language = "lang0");

/// Cloned mode: the base-id test stream is mapped into every language's ids
/// and scored separately.
template <typename T>
EvalResult per_language_eval(const model::ModelState<T>& state, const tokenizer::ClonedVocabulary& cv,
                             const corpus::TokenStream& base_test, const WindowParams& params);

/// Real mode: each language's own test stream, remapped to the joint ids.
template <typename T>
EvalResult per_language_eval(const model::ModelState<T>& state, const tokenizer::JointVocabulary& joint,
                             std::span<const corpus::TokenStream> test_streams, const WindowParams& params);

}  // namespace xlab::evaluator
