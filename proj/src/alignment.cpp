#include "xlab/alignment.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <map>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xlab::alignment {

namespace {

template <typename A, typename B>
double cosine_impl(std::span<const A> a, std::span<const B> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine of vectors with different sizes");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0 || nb == 0) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <typename F>
void parallel_for(std::size_t n, F&& body) {
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for num_threads(model::thread_count()) schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b) { return cosine_impl(a, b); }

template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
    return cosine_impl(a, b);
}

// ---------------------------------------------------------------------------

nlohmann::json EmbeddingSimilarity::to_json() const {
    nlohmann::json b = nlohmann::json::array();
    for (const auto& k : buckets) b.push_back({{"decade", k.decade}, {"pairs", k.pairs}, {"mean", k.mean}});
    return {{"mean", mean}, {"baseline", baseline}, {"pairs", pairs}, {"by_frequency", b}};
}

template <typename T>
EmbeddingSimilarity embedding_similarity(const model::ModelState<T>& state, const tokenizer::ClonedVocabulary& cv,
                                         std::span<const std::uint64_t> frequencies, std::uint64_t seed) {
    if (cv.size() != static_cast<std::size_t>(state.config.vocab_size)) {
        throw std::invalid_argument("cloned vocabulary size does not match the model");
    }
    if (cv.n_languages() < 2) throw std::invalid_argument("embedding similarity needs at least two languages");
    const auto& dups = cv.duplicated_ids();
    if (dups.empty()) throw std::invalid_argument("vocabulary is fully anchored: no duplicated pairs");
    if (!frequencies.empty() && frequencies.size() != cv.base().size()) {
        throw std::invalid_argument("frequencies must have one count per base id");
    }

    EmbeddingSimilarity out;
    std::map<int, std::pair<std::size_t, double>> buckets;
    double total = 0;
    const int L = cv.n_languages();
    for (TokenId base : dups) {
        for (int x = 0; x < L; ++x) {
            for (int y = x + 1; y < L; ++y) {
                const double c = cosine(state.embedding_row(cv.to_final(x, base)),
                                        state.embedding_row(cv.to_final(y, base)));
                total += c;
                ++out.pairs;
                if (!frequencies.empty()) {
                    const auto n = frequencies[base];
                    const int decade = n == 0 ? -1 : static_cast<int>(std::floor(std::log10(static_cast<double>(n))));
                    auto& slot = buckets[decade];
                    ++slot.first;
                    slot.second += c;
                }
            }
        }
    }
    out.mean = total / static_cast<double>(out.pairs);
    for (const auto& [decade, slot] : buckets) {
        out.buckets.push_back({decade, slot.first, slot.second / static_cast<double>(slot.first)});
    }

    // Random ids from the duplicated set of any language; equivalent or
    // identical pairs are redrawn.
    Rng rng(seed);
    const auto D = dups.size();
    const auto pick = [&]() {
        const auto k = rng.below(static_cast<std::uint64_t>(D) * static_cast<std::uint64_t>(L));
        return std::pair<int, TokenId>{static_cast<int>(k / D), dups[k % D]};
    };
    if (D < 2) throw std::invalid_argument("baseline needs at least two duplicated ids");
    double base_total = 0;
    for (std::size_t i = 0; i < out.pairs; ++i) {
        auto [la, a] = pick();
        auto [lb, b] = pick();
        while (a == b) std::tie(lb, b) = pick();
        base_total += cosine(state.embedding_row(cv.to_final(la, a)), state.embedding_row(cv.to_final(lb, b)));
    }
    out.baseline = base_total / static_cast<double>(out.pairs);
    return out;
}

// ---------------------------------------------------------------------------

ParallelPair cloned_pair(const tokenizer::ClonedVocabulary& cv, std::span<const TokenId> base_ids, int lang_a,
                         int lang_b) {
    return {cv.encode_language(base_ids, lang_a), cv.encode_language(base_ids, lang_b), ParallelPair::Mode::cloned};
}

void check_cloned_pair(const tokenizer::ClonedVocabulary& cv, const ParallelPair& pair) {
    if (pair.seq_a.size() != pair.seq_b.size()) throw std::invalid_argument("cloned pair lengths differ");
    for (std::size_t i = 0; i < pair.seq_a.size(); ++i) {
        if (cv.origin(pair.seq_a[i]).base_id != cv.origin(pair.seq_b[i]).base_id) {
            throw std::invalid_argument("cloned pair differs at position " + std::to_string(i));
        }
    }
}

std::vector<std::string> HiddenTable::columns(std::size_t n_layers) {
    std::vector<std::string> c = {"emb"};
    for (std::size_t l = 1; l <= n_layers; ++l) c.push_back("layer_" + std::to_string(l));
    return c;
}

nlohmann::json HiddenTable::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    const auto cols = columns(mean.empty() ? 0 : mean.size() - 1);
    for (std::size_t l = 0; l < mean.size(); ++l) j[cols[l]] = mean[l];
    return {{"layers", j}, {"token_pairs", token_pairs}};
}

namespace {

template <typename T>
std::span<const T> row_of(const std::vector<T>& m, std::size_t i, std::size_t d) {
    return std::span<const T>(m).subspan(i * d, d);
}

template <typename T>
std::vector<double> layer_mean_weights(const std::vector<std::vector<T>>& ha, const std::vector<std::vector<T>>& hb,
                                       std::size_t d, std::size_t na, std::size_t nb) {
    std::vector<double> w(na * nb, 0.0);
    const double layers = static_cast<double>(ha.size());
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = 0; j < nb; ++j) {
            double s = 0;
            for (std::size_t l = 0; l < ha.size(); ++l) s += cosine(row_of(ha[l], i, d), row_of(hb[l], j, d));
            w[i * nb + j] = s / layers;
        }
    }
    return w;
}

}  // namespace

template <typename T>
HiddenTable hidden_similarity(const model::ModelState<T>& state, std::span<const ParallelPair> pairs,
                              Matching matching, bool allow_matching_on_clones) {
    if (pairs.empty()) throw std::invalid_argument("no pairs to compare");
    const auto d = static_cast<std::size_t>(state.config.d_model);
    const auto L1 = static_cast<std::size_t>(state.config.n_layers) + 1;
    std::vector<std::vector<double>> sums(pairs.size(), std::vector<double>(L1, 0.0));
    std::vector<std::size_t> counts(pairs.size(), 0);

    parallel_for(pairs.size(), [&](std::size_t p) {
        const auto& pair = pairs[p];
        if (pair.seq_a.empty() || pair.seq_b.empty()) throw std::invalid_argument("empty sequence in pair");
        if (pair.mode == ParallelPair::Mode::cloned && matching == Matching::max_weight && !allow_matching_on_clones) {
            throw std::invalid_argument("cloned pairs use positional matching");
        }
        const auto ta = model::forward(state, pair.seq_a);
        const auto tb = model::forward(state, pair.seq_b);
        std::vector<std::pair<std::size_t, std::size_t>> matched;
        if (matching == Matching::positional) {
            if (pair.seq_a.size() != pair.seq_b.size()) {
                throw std::invalid_argument("positional matching needs equal lengths");
            }
            for (std::size_t i = 0; i < pair.seq_a.size(); ++i) matched.emplace_back(i, i);
        } else {
            matched = match_tokens(ta.hidden, tb.hidden, d);
        }
        for (auto [i, j] : matched) {
            for (std::size_t l = 0; l < L1; ++l) {
                sums[p][l] += cosine(row_of(ta.hidden[l], i, d), row_of(tb.hidden[l], j, d));
            }
        }
        counts[p] = matched.size();
    });

    HiddenTable t;
    t.mean.assign(L1, 0.0);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        for (std::size_t l = 0; l < L1; ++l) t.mean[l] += sums[p][l];
        t.token_pairs += counts[p];
    }
    for (auto& m : t.mean) m /= static_cast<double>(t.token_pairs);
    return t;
}

std::string hidden_csv(std::span<const std::pair<std::string, HiddenTable>> rows) {
    if (rows.empty()) return "run\n";
    const std::size_t L1 = rows.front().second.mean.size();
    std::string out = "run";
    for (const auto& c : HiddenTable::columns(L1 - 1)) out += "," + c;
    out += "\n";
    char buf[32];
    const auto emit = [&](const std::string& name, const std::vector<double>& v) {
        out += name;
        for (double x : v) {
            std::snprintf(buf, sizeof buf, ",%.4f", x);
            out += buf;
        }
        out += "\n";
    };
    for (const auto& [name, t] : rows) {
        if (t.mean.size() != L1) throw std::invalid_argument("tables differ in layer count");
        emit(name, t.mean);
    }
    if (rows.size() == 2) {
        std::vector<double> delta(L1);
        for (std::size_t l = 0; l < L1; ++l) delta[l] = rows[1].second.mean[l] - rows[0].second.mean[l];
        emit("delta", delta);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> max_weight_matching(std::span<const double> weights,
                                                                     std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("matching needs two nonempty sides");
    if (weights.size() != rows * cols) throw std::invalid_argument("weight matrix has the wrong size");
    for (double w : weights)
        if (!std::isfinite(w)) throw std::invalid_argument("non-finite matching weight");

    // Hungarian method with potentials on the shorter side (n <= m),
    // minimising negated weights.
    const bool flip = rows > cols;
    const std::size_t n = flip ? cols : rows, m = flip ? rows : cols;
    const auto cost = [&](std::size_t i, std::size_t j) {  // 1-based
        return -(flip ? weights[(j - 1) * cols + (i - 1)] : weights[(i - 1) * cols + (j - 1)]);
    };
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0, j) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        if (flip) {
            out.emplace_back(j - 1, p[j] - 1);
        } else {
            out.emplace_back(p[j] - 1, j - 1);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

double matching_weight(std::span<const double> weights, std::size_t cols,
                       std::span<const std::pair<std::size_t, std::size_t>> matching) {
    double s = 0;
    for (auto [i, j] : matching) s += weights[i * cols + j];
    return s;
}

template <typename T>
std::vector<std::pair<std::size_t, std::size_t>> match_tokens(const std::vector<std::vector<T>>& hidden_a,
                                                              const std::vector<std::vector<T>>& hidden_b,
                                                              std::size_t d_model) {
    if (hidden_a.empty() || hidden_a.size() != hidden_b.size()) {
        throw std::invalid_argument("hidden states must cover the same layers");
    }
    const std::size_t na = hidden_a[0].size() / d_model, nb = hidden_b[0].size() / d_model;
    const auto w = layer_mean_weights(hidden_a, hidden_b, d_model, na, nb);
    return max_weight_matching(w, na, nb);
}

std::string alignment_text(std::span<const std::string> pieces_a, std::span<const std::string> pieces_b,
                           std::span<const std::pair<std::size_t, std::size_t>> matching,
                           std::span<const double> weights, std::size_t cols) {
    // Pad by code points so multi-byte pieces line up.
    const auto columns = [](const std::string& s) {
        return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
    };
    std::size_t width = 0;
    for (auto [i, j] : matching) width = std::max(width, columns(pieces_a[i]));
    std::string out;
    char buf[32];
    for (auto [i, j] : matching) {
        out += pieces_a[i] + std::string(width - columns(pieces_a[i]), ' ') + " <-> " + pieces_b[j];
        std::snprintf(buf, sizeof buf, "  %.3f\n", weights[i * cols + j]);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json GradientSimilarity::to_json() const {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& c : groups) {
        g.push_back({{"group", c.group},
                     {"cosine", c.cosine ? nlohmann::json(*c.cosine) : nlohmann::json(nullptr)},
                     {"in_macro", c.in_macro}});
    }
    return {{"groups", g}, {"macro", macro ? nlohmann::json(*macro) : nlohmann::json(nullptr)}, {"pairs", pairs}};
}

template <typename T>
GradientSimilarity gradient_similarity(const model::ModelState<T>& state, std::span<const ParallelPair> pairs) {
    if (pairs.empty()) throw std::invalid_argument("no pairs to compare");
    const auto& groups = state.layout.groups;
    std::vector<std::vector<double>> per_pair(pairs.size(), std::vector<double>(groups.size()));

    // The batch-of-one gradients already use the model's own sharding, so
    // pairs run one after another.
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto& pair = pairs[p];
        if (pair.seq_a.size() < 2 || pair.seq_b.size() < 2) {
            throw std::invalid_argument("gradient similarity needs sequences of at least two tokens");
        }
        std::vector<T> ga, gb;
        const auto side = [&](const std::vector<TokenId>& s, std::vector<T>& g) {
            const std::span<const TokenId> ids(s);
            model::loss_and_grads(state, ids.first(s.size() - 1), ids.subspan(1), g);
        };
        side(pair.seq_a, ga);
        side(pair.seq_b, gb);
        for (std::size_t k = 0; k < groups.size(); ++k) {
            const auto& g = groups[k];
            per_pair[p][k] = cosine(std::span<const T>(ga).subspan(g.offset, g.size),
                                    std::span<const T>(gb).subspan(g.offset, g.size));
        }
    }

    GradientSimilarity out;
    out.pairs = pairs.size();
    double macro_sum = 0;
    std::size_t macro_n = 0;
    for (std::size_t k = 0; k < groups.size(); ++k) {
        GroupCosine c;
        c.group = groups[k].name;
        c.in_macro = c.group != "token_embedding" && c.group != "position_embedding";
        double s = 0;
        std::size_t n = 0;
        for (const auto& row : per_pair) {
            if (std::isnan(row[k])) continue;
            s += row[k];
            ++n;
        }
        if (n > 0) {
            c.cosine = s / static_cast<double>(n);
        } else {
            log_warning("gradient of group " + c.group + " is zero; excluded from the macro average");
        }
        if (c.in_macro && c.cosine) {
            macro_sum += *c.cosine;
            ++macro_n;
        }
        out.groups.push_back(std::move(c));
    }
    if (macro_n > 0) out.macro = macro_sum / static_cast<double>(macro_n);
    return out;
}

#define XLAB_INSTANTIATE(T)                                                                                       \
    template double cosine(std::span<const T>, std::span<const T>);                                              \
    template EmbeddingSimilarity embedding_similarity(const model::ModelState<T>&,                                \
                                                      const tokenizer::ClonedVocabulary&,                         \
                                                      std::span<const std::uint64_t>, std::uint64_t);              \
    template HiddenTable hidden_similarity(const model::ModelState<T>&, std::span<const ParallelPair>, Matching,  \
                                           bool);                                                                 \
    template std::vector<std::pair<std::size_t, std::size_t>> match_tokens(                                       \
        const std::vector<std::vector<T>>&, const std::vector<std::vector<T>>&, std::size_t);                     \
    template GradientSimilarity gradient_similarity(const model::ModelState<T>&, std::span<const ParallelPair>);

XLAB_INSTANTIATE(float)
XLAB_INSTANTIATE(double)

}  // namespace xlab::alignment
