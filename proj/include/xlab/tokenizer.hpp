#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xlab/common.hpp"
#include "xlab/corpus.hpp"

namespace xlab::tokenizer {

/// U+2581, prepended to every whitespace-delimited pretoken.
inline constexpr std::string_view kWordBegin = "\xE2\x96\x81";
inline constexpr std::string_view kUnkPiece = "<unk>";
/// What decode() emits for the unk id (U+FFFD). Encoding it yields unk again.
inline constexpr std::string_view kUnkSurface = "\xEF\xBF\xBD";

using Merge = std::pair<std::string, std::string>;

/// Subword pieces in id order plus the ordered merge list that produced them.
/// Immutable once built.
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> pieces, std::vector<Merge> merges,
               std::string marker = std::string(kWordBegin), TokenId unk_id = 0);

    std::size_t size() const noexcept { return pieces_.size(); }
    const std::string& piece(TokenId id) const { return pieces_.at(id); }
    const std::vector<std::string>& pieces() const noexcept { return pieces_; }
    const std::vector<Merge>& merges() const noexcept { return merges_; }
    const std::string& marker() const noexcept { return marker_; }
    TokenId unk_id() const noexcept { return unk_id_; }

    std::optional<TokenId> find(std::string_view piece) const;

    struct MergeRule {
        std::uint32_t rank;
        TokenId result;
    };
    std::optional<MergeRule> merge_rule(TokenId left, TokenId right) const;

    /// SHA-256 of the serialized vocabulary file.
    Digest digest() const;

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.pieces_ == b.pieces_ && a.merges_ == b.merges_ && a.marker_ == b.marker_ && a.unk_id_ == b.unk_id_;
    }

private:
    std::vector<std::string> pieces_;
    std::vector<Merge> merges_;
    std::string marker_{kWordBegin};
    TokenId unk_id_ = 0;
    std::unordered_map<std::string, TokenId> index_;
    std::unordered_map<std::uint64_t, MergeRule> merge_index_;
};

/// Whitespace-split pretokens, each prefixed with `marker`.
std::vector<std::string> pretokenize(std::string_view text, std::string_view marker = kWordBegin);

/// Splits UTF-8 text into code-point strings. Input is assumed valid.
std::vector<std::string> split_code_points(std::string_view text);

/// Sennrich-style BPE. The base alphabet is <unk> followed by every distinct
/// code point (sorted by UTF-8 bytes) seen in pretokens, marker included.
/// Each merge takes the most frequent adjacent pair, ties broken by the
/// lexicographically smallest (left, right). Throws std::invalid_argument if
/// vocab_size is below the alphabet size or the corpus runs out of pairs.
Vocabulary train_bpe(const corpus::DocumentStore& store, std::size_t vocab_size);

/// Size of the base alphabet train_bpe would use for `store`.
std::size_t base_alphabet_size(const corpus::DocumentStore& store);

std::vector<TokenId> encode(const Vocabulary& vocab, std::string_view text);

/// Concatenates pieces, turns markers back into spaces and drops the single
/// leading space. Throws std::invalid_argument for out-of-range ids.
std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids);

/// Encoder with a per-word cache, for bulk encoding.
class Encoder {
public:
    explicit Encoder(const Vocabulary& vocab) : vocab_(vocab) {}
    void encode_into(std::string_view text, std::vector<TokenId>& out);
    std::vector<TokenId> encode(std::string_view text) {
        std::vector<TokenId> out;
        encode_into(text, out);
        return out;
    }

private:
    const std::vector<TokenId>& encode_word(const std::string& word);
    const Vocabulary& vocab_;
    std::unordered_map<std::string, std::vector<TokenId>> cache_;
};

/// One document per store document; documents that encode to nothing are
/// skipped.
corpus::TokenStream encode_store(const Vocabulary& vocab, const corpus::DocumentStore& store);

/// Occurrence count of every id in a stream.
std::vector<std::uint64_t> id_counts(const corpus::TokenStream& stream, std::size_t vocab_size);

// File format:
//   #xlab-vocab version=1 marker=<m> unk=<id> pieces=<n> merges=<k>
//   <n lines, one piece each, in id order>
//   #merges
//   <k lines "left<TAB>right" in merge order>
void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::filesystem::path& path);
std::string serialize_vocabulary(const Vocabulary& vocab);
Vocabulary parse_vocabulary(std::string_view text);

// ---------------------------------------------------------------------------
// Cloned languages.
//
// Final id layout: anchors occupy [0, A) in ascending base-id order. Every
// other base id gets a dup-index j (ascending base-id order) and, in the
// language that owns block b, the id A + b*D + j with D = |base| - A.
// Language n initially owns block n; relabelling permutes block ownership.
// ---------------------------------------------------------------------------

enum class AnchorSelection { uniform, frequency_stratified };

class ClonedVocabulary {
public:
    ClonedVocabulary(Vocabulary base, int n_languages, std::vector<TokenId> anchors);

    const Vocabulary& base() const noexcept { return base_; }
    int n_languages() const noexcept { return static_cast<int>(block_of_.size()); }
    const std::vector<TokenId>& anchors() const noexcept { return anchors_; }
    std::size_t n_anchors() const noexcept { return anchors_.size(); }
    std::size_t n_duplicated() const noexcept { return dup_ids_.size(); }
    std::size_t size() const noexcept { return n_anchors() + block_of_.size() * n_duplicated(); }

    bool is_anchor(TokenId base_id) const { return dup_index_.at(base_id) < 0; }
    /// Base ids that are duplicated, in dup-index order.
    const std::vector<TokenId>& duplicated_ids() const noexcept { return dup_ids_; }

    TokenId to_final(int language, TokenId base_id) const;

    struct Origin {
        TokenId base_id;
        int language;  // -1 for anchors (shared by every language)
    };
    Origin origin(TokenId final_id) const;

    std::vector<TokenId> encode_language(std::span<const TokenId> base_ids, int language) const;
    std::vector<TokenId> translate(std::span<const TokenId> final_ids, int from, int to) const;

    /// Vocabulary segments in final-id order: anchors, then one block of D
    /// ids per language.
    std::vector<std::size_t> segments() const;

    /// Language n of the result uses the id block of language perm[n] here.
    ClonedVocabulary relabeled(std::span<const int> permutation) const;

    const std::vector<int>& block_of_language() const noexcept { return block_of_; }

    friend bool operator==(const ClonedVocabulary& a, const ClonedVocabulary& b) {
        return a.base_ == b.base_ && a.anchors_ == b.anchors_ && a.block_of_ == b.block_of_;
    }

private:
    Vocabulary base_;
    std::vector<TokenId> anchors_;
    std::vector<std::int64_t> dup_index_;  // base id -> j, or -1 for anchors
    std::vector<TokenId> anchor_rank_;     // base id -> final id for anchors
    std::vector<TokenId> dup_ids_;
    std::vector<int> block_of_;
};

/// Picks floor(anchor_fraction * |base|) anchors. Uniform selection takes
/// the head of a seeded permutation. Frequency-stratified selection sorts ids
/// by descending `frequencies`, cuts them into k equal strata and draws one
/// id per stratum.
ClonedVocabulary clone_vocab(const Vocabulary& vocab, int n_languages, double anchor_fraction, std::uint64_t seed,
                             AnchorSelection selection = AnchorSelection::uniform,
                             std::span<const std::uint64_t> frequencies = {});

ClonedVocabulary relabel(const ClonedVocabulary& cv, std::span<const int> permutation);

// ---------------------------------------------------------------------------
// Real bilingual vocabularies.
// ---------------------------------------------------------------------------

/// Union of two independently trained vocabularies. A's pieces keep their
/// ids; B's pieces not present in A follow in B's id order.
struct MergedVocabulary {
    Vocabulary vocab_a;
    Vocabulary vocab_b;
    std::vector<std::string> shared;  // surface forms in both, in A id order
    std::vector<TokenId> remap_a;     // A id -> merged id
    std::vector<TokenId> remap_b;     // B id -> merged id
    std::vector<std::string> pieces;  // merged id -> surface form

    std::size_t size() const noexcept { return pieces.size(); }
};

MergedVocabulary merge_vocabs(const Vocabulary& vocab_a, const Vocabulary& vocab_b);

/// Joint id space for real-language training: one remap table per language.
struct JointVocabulary {
    enum class Mode { disjoint, anchored };
    Mode mode = Mode::disjoint;
    std::vector<std::vector<TokenId>> remap;
    std::size_t size = 0;

    int n_languages() const noexcept { return static_cast<int>(remap.size()); }
    std::vector<TokenId> to_joint(int language, std::span<const TokenId> ids) const;
};

/// Language n's ids are offset by the sizes of languages 0..n-1.
JointVocabulary disjoint_joint(std::span<const Vocabulary> vocabs);
JointVocabulary anchored_joint(const MergedVocabulary& merged);

}  // namespace xlab::tokenizer
