#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "xlab/model.hpp"
#include "xlab/tokenizer.hpp"

namespace xlab::alignment {

double cosine(std::span<const double> a, std::span<const double> b);
template <typename T>
double cosine(std::span<const T> a, std::span<const T> b);

// ---------------------------------------------------------------------------
// Embedding similarity with a random-pair (anisotropy) baseline.
// ---------------------------------------------------------------------------

struct FrequencyBucket {
    int decade;            // floor(log10(count)); -1 for unseen ids
    std::size_t pairs = 0;
    double mean = 0;
};

struct EmbeddingSimilarity {
    double mean = 0;       // over every equivalent duplicated-id pair
    double baseline = 0;   // over as many random non-equivalent pairs
    std::size_t pairs = 0;
    std::vector<FrequencyBucket> buckets;

    nlohmann::json to_json() const;
};

/// Pairs every duplicated base id across every two languages. `frequencies`
/// holds per-base-id counts (may be empty: no buckets). Baseline pairs are
/// distinct, non-equivalent ids drawn from the same duplicated set.
template <typename T>
EmbeddingSimilarity embedding_similarity(const model::ModelState<T>& state, const tokenizer::ClonedVocabulary& cv,
                                         std::span<const std::uint64_t> frequencies, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Hidden-state similarity.
// ---------------------------------------------------------------------------

struct ParallelPair {
    enum class Mode { cloned, real };
    std::vector<TokenId> seq_a, seq_b;
    Mode mode = Mode::cloned;
};

/// The same base sequence rendered in two clone languages.
ParallelPair cloned_pair(const tokenizer::ClonedVocabulary& cv, std::span<const TokenId> base_ids, int lang_a,
                         int lang_b);

/// Throws std::invalid_argument if a cloned pair is not position-equivalent.
void check_cloned_pair(const tokenizer::ClonedVocabulary& cv, const ParallelPair& pair);

enum class Matching { positional, max_weight };

/// Columns: "emb" (embedding output) then one per block.
struct HiddenTable {
    std::vector<double> mean;   // n_layers + 1 entries
    std::size_t token_pairs = 0;

    static std::vector<std::string> columns(std::size_t n_layers);
    nlohmann::json to_json() const;
};

/// Per-layer mean cosine over matched token pairs, pooled over all pairs.
/// Cloned pairs need positional matching unless `allow_matching_on_clones`.
template <typename T>
HiddenTable hidden_similarity(const model::ModelState<T>& state, std::span<const ParallelPair> pairs,
                              Matching matching, bool allow_matching_on_clones = false);

/// "run,emb,layer_1,..." one row per table and, for two tables, a "delta"
/// row (second minus first).
std::string hidden_csv(std::span<const std::pair<std::string, HiddenTable>> rows);

// ---------------------------------------------------------------------------
// Token matching.
// ---------------------------------------------------------------------------

/// Exact maximum-weight matching that covers every row or every column of a
/// rows x cols weight matrix (row-major), whichever side is shorter. Pairs
/// come back sorted by row.
std::vector<std::pair<std::size_t, std::size_t>> max_weight_matching(std::span<const double> weights,
                                                                     std::size_t rows, std::size_t cols);

/// Sum of matched weights, added in row order.
double matching_weight(std::span<const double> weights, std::size_t cols,
                       std::span<const std::pair<std::size_t, std::size_t>> matching);

/// Edge weight = cosine averaged over layers. Each hidden argument holds one
/// (len x d) matrix per layer.
template <typename T>
std::vector<std::pair<std::size_t, std::size_t>> match_tokens(const std::vector<std::vector<T>>& hidden_a,
                                                              const std::vector<std::vector<T>>& hidden_b,
                                                              std::size_t d_model);

/// One line per matched pair: "piece_a <-> piece_b  weight".
std::string alignment_text(std::span<const std::string> pieces_a, std::span<const std::string> pieces_b,
                           std::span<const std::pair<std::size_t, std::size_t>> matching,
                           std::span<const double> weights, std::size_t cols);

// ---------------------------------------------------------------------------
// Gradient similarity.
// ---------------------------------------------------------------------------

struct GroupCosine {
    std::string group;
    std::optional<double> cosine;   // empty when either gradient is zero
    bool in_macro = true;           // embedding groups are reported apart
};

struct GradientSimilarity {
    std::vector<GroupCosine> groups;
    std::optional<double> macro;
    std::size_t pairs = 0;

    nlohmann::json to_json() const;
};

/// Batch-of-one loss gradients for each side of every pair; per-group cosine
/// averaged over pairs. The macro average covers block, final-norm and head
/// groups only.
template <typename T>
GradientSimilarity gradient_similarity(const model::ModelState<T>& state, std::span<const ParallelPair> pairs);

}  // namespace xlab::alignment
