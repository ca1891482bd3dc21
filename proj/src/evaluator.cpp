#include "xlab/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xlab::evaluator {

void WindowParams::validate() const {
    if (window == 0) throw std::invalid_argument("window must be positive");
    if (stride == 0 || stride > window) throw std::invalid_argument("stride must be in [1, window]");
}

std::size_t window_start(std::size_t position, const WindowParams& p) {
    if (position == 0) throw std::invalid_argument("token 0 has no context");
    if (position <= p.window) return 0;
    const std::size_t over = position - p.window;
    return (over + p.stride - 1) / p.stride * p.stride;
}

namespace {

struct Window {
    std::size_t doc;
    std::size_t begin;       // first input position
    std::size_t end;         // one past the last input position (= last target position)
    std::size_t score_from;  // first target position scored by this window
};

void plan_document(std::size_t doc, std::size_t len, const WindowParams& p, std::vector<Window>& out) {
    if (len < 2) return;
    const std::size_t last = len - 1;  // targets are positions 1..last
    std::size_t begin = 0;
    std::size_t end = std::min(p.window, last);
    out.push_back({doc, begin, end, 1});
    while (end < last) {
        const std::size_t prev = end;
        begin += p.stride;
        end = std::min(begin + p.window, last);
        out.push_back({doc, begin, end, prev + 1});
    }
}

template <typename T>
void check_fits(const model::ModelState<T>& state, const WindowParams& p) {
    p.validate();
    if (p.window > static_cast<std::size_t>(state.config.max_seq_len)) {
        throw std::invalid_argument("window " + std::to_string(p.window) + " exceeds the model context " +
                                    std::to_string(state.config.max_seq_len));
    }
}

/// Fills lp[target - 1] for every target the window scores.
template <typename T>
void score_window(const model::ModelState<T>& state, std::span<const TokenId> doc, const Window& w,
                  std::span<double> lp) {
    const auto inputs = doc.subspan(w.begin, w.end - w.begin);
    const auto targets = doc.subspan(w.begin + 1, w.end - w.begin);
    const auto out = model::target_log_probs(state, inputs, targets);
    for (std::size_t t = 0; t < out.size(); ++t) {
        const std::size_t pos = w.begin + 1 + t;
        if (pos >= w.score_from) lp[pos - 1] = out[t];
    }
}

template <typename T>
void run_windows(const model::ModelState<T>& state, const std::vector<std::span<const TokenId>>& docs,
                 const std::vector<Window>& windows, std::vector<std::vector<double>>& lps) {
    std::vector<std::exception_ptr> errors(windows.size());
    const auto n = static_cast<std::ptrdiff_t>(windows.size());
#pragma omp parallel for num_threads(model::thread_count()) schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            const auto& w = windows[static_cast<std::size_t>(i)];
            score_window(state, docs[w.doc], w, lps[w.doc]);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Neumaier-compensated sum, in sequence order.
double compensated_sum(std::span<const double> values) {
    double sum = 0.0, c = 0.0;
    for (double v : values) {
        const double t = sum + v;
        if (std::abs(sum) >= std::abs(v)) {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    return sum + c;
}

}  // namespace

template <typename T>
std::vector<double> document_log_probs(const model::ModelState<T>& state, std::span<const TokenId> document,
                                       const WindowParams& params) {
    check_fits(state, params);
    std::vector<Window> windows;
    plan_document(0, document.size(), params, windows);
    std::vector<std::vector<double>> lps(1, std::vector<double>(document.size() > 0 ? document.size() - 1 : 0));
    run_windows(state, {document}, windows, lps);
    return std::move(lps[0]);
}

template <typename T>
LanguageScore sliding_ppl(const model::ModelState<T>& state, const corpus::TokenStream& stream,
                          const WindowParams& params, std::string language) {
    check_fits(state, params);
    if (stream.size() == 0) throw std::invalid_argument("empty evaluation stream");
    stream.validate(static_cast<std::size_t>(state.config.vocab_size));

    std::vector<std::span<const TokenId>> docs;
    std::vector<Window> windows;
    std::vector<std::vector<double>> lps;
    for (std::size_t d = 0; d < stream.n_documents(); ++d) {
        docs.push_back(stream.document(d));
        lps.emplace_back(docs.back().empty() ? 0 : docs.back().size() - 1);
        plan_document(d, docs.back().size(), params, windows);
    }
    run_windows(state, docs, windows, lps);

    LanguageScore score;
    score.language = std::move(language);
    std::vector<double> doc_nll;
    for (const auto& lp : lps) {
        if (lp.empty()) continue;
        doc_nll.push_back(-compensated_sum(lp));
        score.tokens_scored += lp.size();
    }
    if (score.tokens_scored == 0) throw std::invalid_argument("evaluation stream has no predictable tokens");
    score.nll = order_free_sum(std::span<double>(doc_nll));
    score.ppl = std::exp(score.nll / static_cast<double>(score.tokens_scored));
    if (!std::isfinite(score.ppl)) throw NumericError("non-finite perplexity for " + score.language);
    return score;
}

template <typename T>
EvalResult per_language_eval(const model::ModelState<T>& state, const tokenizer::ClonedVocabulary& cv,
                             const corpus::TokenStream& base_test, const WindowParams& params) {
    if (cv.size() != static_cast<std::size_t>(state.config.vocab_size)) {
        throw std::invalid_argument("cloned vocabulary size does not match the model");
    }
    EvalResult result;
    result.window = params;
    for (int n = 0; n < cv.n_languages(); ++n) {
        corpus::TokenStream s;
        s.ids = cv.encode_language(base_test.ids, n);
        s.doc_boundaries = base_test.doc_boundaries;
        result.languages.push_back(sliding_ppl(state, s, params, "lang" + std::to_string(n)));
    }
    return result;
}

template <typename T>
EvalResult per_language_eval(const model::ModelState<T>& state, const tokenizer::JointVocabulary& joint,
                             std::span<const corpus::TokenStream> test_streams, const WindowParams& params) {
    if (static_cast<int>(test_streams.size()) != joint.n_languages()) {
        throw std::invalid_argument("one test stream per language is required");
    }
    EvalResult result;
    result.window = params;
    for (int n = 0; n < joint.n_languages(); ++n) {
        const auto& src = test_streams[static_cast<std::size_t>(n)];
        corpus::TokenStream s;
        s.ids = joint.to_joint(n, src.ids);
        s.doc_boundaries = src.doc_boundaries;
        result.languages.push_back(sliding_ppl(state, s, params, "lang" + std::to_string(n)));
    }
    return result;
}

std::string EvalResult::csv() const {
    std::string out = "lang,ppl,tokens_scored\n";
    char buf[64];
    for (const auto& l : languages) {
        std::snprintf(buf, sizeof buf, "%.10g", l.ppl);
        out += l.language + "," + buf + "," + std::to_string(l.tokens_scored) + "\n";
    }
    return out;
}

nlohmann::json EvalResult::to_json() const {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : languages) {
        langs.push_back({{"lang", l.language}, {"ppl", l.ppl}, {"nll", l.nll}, {"tokens_scored", l.tokens_scored}});
    }
    return {{"window", window.window}, {"stride", window.stride}, {"languages", langs}};
}

EvalResult EvalResult::from_json(const nlohmann::json& j) {
    EvalResult r;
    r.window.window = j.at("window").get<std::size_t>();
    r.window.stride = j.at("stride").get<std::size_t>();
    for (const auto& l : j.at("languages")) {
        r.languages.push_back({l.at("lang").get<std::string>(), l.at("ppl").get<double>(), l.at("nll").get<double>(),
                               l.at("tokens_scored").get<std::uint64_t>()});
    }
    return r;
}

std::vector<double> EvalResult::ppl() const {
    std::vector<double> out;
    for (const auto& l : languages) out.push_back(l.ppl);
    return out;
}

#define XLAB_INSTANTIATE(T)                                                                                       \
    template std::vector<double> document_log_probs(const model::ModelState<T>&, std::span<const TokenId>,      \
                                                    const WindowParams&);                                        \
    template LanguageScore sliding_ppl(const model::ModelState<T>&, const corpus::TokenStream&,                  \
                                       const WindowParams&, std::string);                                        \
    template EvalResult per_language_eval(const model::ModelState<T>&, const tokenizer::ClonedVocabulary&,       \
                                          const corpus::TokenStream&, const WindowParams&);                      \
    template EvalResult per_language_eval(const model::ModelState<T>&, const tokenizer::JointVocabulary&,        \
                                          std::span<const corpus::TokenStream>, const WindowParams&);

XLAB_INSTANTIATE(float)
XLAB_INSTANTIATE(double)

}  // namespace xlab::evaluator
