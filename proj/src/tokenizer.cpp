#include "xlab/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace xlab::tokenizer {

namespace {

std::uint64_t pair_key(TokenId l, TokenId r) { return (static_cast<std::uint64_t>(l) << 32) | r; }
TokenId key_left(std::uint64_t k) { return static_cast<TokenId>(k >> 32); }
TokenId key_right(std::uint64_t k) { return static_cast<TokenId>(k & 0xFFFFFFFFu); }

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::size_t code_point_length(unsigned char c) {
    if (c < 0x80) return 1;
    if ((c & 0xE0) == 0xC0) return 2;
    if ((c & 0xF0) == 0xE0) return 3;
    return 4;
}

// Characters that never become alphabet symbols: a literal marker inside a
// word would decode to a space, and U+FFFD is what unk decodes to.
bool is_reserved_symbol(std::string_view s) { return s == kUnkSurface; }

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> pieces, std::vector<Merge> merges, std::string marker, TokenId unk_id)
    : pieces_(std::move(pieces)), merges_(std::move(merges)), marker_(std::move(marker)), unk_id_(unk_id) {
    if (marker_.empty()) throw std::invalid_argument("vocabulary marker must be non-empty");
    if (unk_id_ >= pieces_.size()) throw std::invalid_argument("unk id out of range");
    index_.reserve(pieces_.size());
    for (TokenId i = 0; i < pieces_.size(); ++i) {
        if (!index_.emplace(pieces_[i], i).second) {
            throw std::invalid_argument("duplicate vocabulary piece '" + pieces_[i] + "'");
        }
    }
    merge_index_.reserve(merges_.size());
    for (std::uint32_t rank = 0; rank < merges_.size(); ++rank) {
        const auto& [l, r] = merges_[rank];
        auto li = find(l), ri = find(r), res = find(l + r);
        if (!li || !ri || !res) {
            throw std::invalid_argument("merge '" + l + "' + '" + r + "' refers to a missing piece");
        }
        merge_index_.emplace(pair_key(*li, *ri), MergeRule{rank, *res});
    }
}

std::optional<TokenId> Vocabulary::find(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::optional<Vocabulary::MergeRule> Vocabulary::merge_rule(TokenId left, TokenId right) const {
    auto it = merge_index_.find(pair_key(left, right));
    if (it == merge_index_.end()) return std::nullopt;
    return it->second;
}

Digest Vocabulary::digest() const { return sha256(serialize_vocabulary(*this)); }

std::vector<std::string> pretokenize(std::string_view text, std::string_view marker) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j])) ++j;
        if (j > i) {
            std::string w(marker);
            w.append(text.substr(i, j - i));
            out.push_back(std::move(w));
        }
        i = j;
    }
    return out;
}

std::vector<std::string> split_code_points(std::string_view text) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < text.size();) {
        const std::size_t n = std::min(code_point_length(static_cast<unsigned char>(text[i])), text.size() - i);
        out.emplace_back(text.substr(i, n));
        i += n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// BPE training
// ---------------------------------------------------------------------------

namespace {

struct WordCounts {
    std::vector<std::string> words;
    std::vector<std::int64_t> counts;
};

WordCounts count_words(const corpus::DocumentStore& store) {
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& doc : store.documents) {
        for (auto& w : pretokenize(doc)) ++counts[std::move(w)];
    }
    WordCounts wc;
    wc.words.reserve(counts.size());
    for (auto& [w, c] : counts) wc.words.push_back(w);
    std::sort(wc.words.begin(), wc.words.end());
    wc.counts.reserve(wc.words.size());
    for (const auto& w : wc.words) wc.counts.push_back(counts[w]);
    return wc;
}

std::vector<std::string> alphabet_of(const WordCounts& wc) {
    std::set<std::string> symbols;
    for (const auto& w : wc.words) {
        auto cps = split_code_points(w);
        symbols.insert(cps.front());  // the marker
        for (std::size_t k = 1; k < cps.size(); ++k) {
            if (cps[k] != kWordBegin && !is_reserved_symbol(cps[k])) symbols.insert(cps[k]);
        }
    }
    return {symbols.begin(), symbols.end()};
}

class PairQueue {
public:
    explicit PairQueue(const std::vector<std::string>& pieces) : set_(Cmp{&pieces}) {}

    struct Entry {
        std::int64_t count;
        std::uint64_t key;
    };

    void update(std::uint64_t key, std::int64_t old_count, std::int64_t new_count) {
        if (old_count == new_count) return;
        if (old_count > 0) set_.erase(Entry{old_count, key});
        if (new_count > 0) set_.insert(Entry{new_count, key});
    }
    bool empty() const { return set_.empty(); }
    Entry top() const { return *set_.begin(); }

private:
    struct Cmp {
        const std::vector<std::string>* pieces;
        bool operator()(const Entry& a, const Entry& b) const {
            if (a.count != b.count) return a.count > b.count;
            if (a.key == b.key) return false;
            const auto& al = (*pieces)[key_left(a.key)];
            const auto& bl = (*pieces)[key_left(b.key)];
            if (al != bl) return al < bl;
            return (*pieces)[key_right(a.key)] < (*pieces)[key_right(b.key)];
        }
    };
    std::set<Entry, Cmp> set_;
};

}  // namespace

std::size_t base_alphabet_size(const corpus::DocumentStore& store) {
    return 1 + alphabet_of(count_words(store)).size();
}

Vocabulary train_bpe(const corpus::DocumentStore& store, std::size_t vocab_size) {
    const WordCounts wc = count_words(store);
    std::vector<std::string> pieces{std::string(kUnkPiece)};
    for (auto& s : alphabet_of(wc)) pieces.push_back(std::move(s));
    if (vocab_size < pieces.size()) {
        throw std::invalid_argument("vocab_size " + std::to_string(vocab_size) + " is smaller than the base alphabet (" +
                                    std::to_string(pieces.size()) + " symbols)");
    }
    std::unordered_map<std::string, TokenId> piece_ids;
    for (TokenId i = 0; i < pieces.size(); ++i) piece_ids.emplace(pieces[i], i);
    constexpr TokenId kUnk = 0;

    std::vector<std::vector<TokenId>> words(wc.words.size());
    for (std::size_t w = 0; w < wc.words.size(); ++w) {
        for (const auto& cp : split_code_points(wc.words[w])) {
            auto it = piece_ids.find(cp);
            words[w].push_back(words[w].empty() || it == piece_ids.end() || cp == kWordBegin ? kUnk : it->second);
        }
        words[w].front() = piece_ids.at(std::string(kWordBegin));
    }

    std::unordered_map<std::uint64_t, std::int64_t> counts;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
    auto for_each_pair = [](const std::vector<TokenId>& syms, auto&& fn) {
        for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
            if (syms[k] != kUnk && syms[k + 1] != kUnk) fn(pair_key(syms[k], syms[k + 1]));
        }
    };
    for (std::uint32_t w = 0; w < words.size(); ++w) {
        for_each_pair(words[w], [&](std::uint64_t key) {
            counts[key] += wc.counts[w];
            auto& list = where[key];
            if (list.empty() || list.back() != w) list.push_back(w);
        });
    }
    PairQueue queue(pieces);
    for (const auto& [key, c] : counts) queue.update(key, 0, c);

    std::vector<Merge> merges;
    std::vector<std::uint32_t> stamp(words.size(), 0);
    std::uint32_t epoch = 0;
    std::unordered_map<std::uint64_t, std::int64_t> before;

    while (pieces.size() < vocab_size) {
        if (queue.empty()) {
            throw std::invalid_argument("corpus has too few distinct pairs to reach vocab_size " +
                                        std::to_string(vocab_size));
        }
        const auto best = queue.top();
        const TokenId l = key_left(best.key), r = key_right(best.key);
        std::string joined = pieces[l] + pieces[r];
        if (joined == kUnkPiece) {
            queue.update(best.key, best.count, 0);
            counts[best.key] = 0;
            continue;
        }
        TokenId result;
        if (auto it = piece_ids.find(joined); it != piece_ids.end()) {
            result = it->second;
        } else {
            result = static_cast<TokenId>(pieces.size());
            piece_ids.emplace(joined, result);
            pieces.push_back(joined);
        }
        merges.emplace_back(pieces[l], pieces[r]);

        ++epoch;
        before.clear();
        auto note = [&](std::uint64_t key) { before.try_emplace(key, counts[key]); };
        const std::vector<std::uint32_t> affected = std::move(where[best.key]);
        where.erase(best.key);
        for (std::uint32_t w : affected) {
            if (stamp[w] == epoch) continue;
            stamp[w] = epoch;
            auto& syms = words[w];
            bool present = false;
            for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
                if (syms[k] == l && syms[k + 1] == r) {
                    present = true;
                    break;
                }
            }
            if (!present) continue;
            const std::int64_t c = wc.counts[w];
            for_each_pair(syms, [&](std::uint64_t key) {
                note(key);
                counts[key] -= c;
            });
            std::vector<TokenId> merged;
            merged.reserve(syms.size());
            for (std::size_t k = 0; k < syms.size(); ++k) {
                if (k + 1 < syms.size() && syms[k] == l && syms[k + 1] == r) {
                    merged.push_back(result);
                    ++k;
                } else {
                    merged.push_back(syms[k]);
                }
            }
            syms = std::move(merged);
            for_each_pair(syms, [&](std::uint64_t key) {
                note(key);
                counts[key] += c;
                if (key != best.key) {
                    auto& list = where[key];
                    if (list.empty() || list.back() != w) list.push_back(w);
                }
            });
        }
        for (const auto& [key, old] : before) {
            const std::int64_t now = counts[key];
            queue.update(key, old, now);
            if (now == 0) counts.erase(key);
        }
        // The merged pair may survive inside words such as "aaa" -> "aa" "a";
        // re-register those words so later merges of the pair still find them.
        if (auto it = counts.find(best.key); it != counts.end() && it->second > 0) {
            auto& list = where[best.key];
            for (std::uint32_t w : affected) {
                for_each_pair(words[w], [&](std::uint64_t key) {
                    if (key == best.key && (list.empty() || list.back() != w)) list.push_back(w);
                });
            }
        }
    }
    return Vocabulary(std::move(pieces), std::move(merges));
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

const std::vector<TokenId>& Encoder::encode_word(const std::string& word) {
    if (auto it = cache_.find(word); it != cache_.end()) return it->second;
    std::vector<TokenId> syms;
    const auto cps = split_code_points(word);
    const std::size_t marker_cps = split_code_points(vocab_.marker()).size();
    for (std::size_t k = 0; k < cps.size(); ++k) {
        if (k < marker_cps) {
            if (k == 0) syms.push_back(vocab_.find(vocab_.marker()).value_or(vocab_.unk_id()));
            continue;
        }
        const bool reserved = cps[k] == vocab_.marker() || is_reserved_symbol(cps[k]);
        syms.push_back(reserved ? vocab_.unk_id() : vocab_.find(cps[k]).value_or(vocab_.unk_id()));
    }
    for (;;) {
        std::uint32_t best_rank = UINT32_MAX;
        TokenId best_result = 0;
        TokenId bl = 0, br = 0;
        for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
            if (auto rule = vocab_.merge_rule(syms[k], syms[k + 1]); rule && rule->rank < best_rank) {
                best_rank = rule->rank;
                best_result = rule->result;
                bl = syms[k];
                br = syms[k + 1];
            }
        }
        if (best_rank == UINT32_MAX) break;
        std::vector<TokenId> merged;
        merged.reserve(syms.size());
        for (std::size_t k = 0; k < syms.size(); ++k) {
            if (k + 1 < syms.size() && syms[k] == bl && syms[k + 1] == br) {
                merged.push_back(best_result);
                ++k;
            } else {
                merged.push_back(syms[k]);
            }
        }
        syms = std::move(merged);
    }
    return cache_.emplace(word, std::move(syms)).first->second;
}

void Encoder::encode_into(std::string_view text, std::vector<TokenId>& out) {
    for (const auto& w : pretokenize(text, vocab_.marker())) {
        const auto& ids = encode_word(w);
        out.insert(out.end(), ids.begin(), ids.end());
    }
}

std::vector<TokenId> encode(const Vocabulary& vocab, std::string_view text) {
    Encoder enc(vocab);
    return enc.encode(text);
}

std::string decode(const Vocabulary& vocab, std::span<const TokenId> ids) {
    std::string joined;
    for (TokenId id : ids) {
        if (id >= vocab.size()) {
            throw std::invalid_argument("token id " + std::to_string(id) + " out of range for vocabulary of " +
                                        std::to_string(vocab.size()));
        }
        joined += id == vocab.unk_id() ? std::string(kUnkSurface) : vocab.piece(id);
    }
    std::string out;
    out.reserve(joined.size());
    const std::string& m = vocab.marker();
    for (std::size_t i = 0; i < joined.size();) {
        if (joined.compare(i, m.size(), m) == 0) {
            out.push_back(' ');
            i += m.size();
        } else {
            out.push_back(joined[i++]);
        }
    }
    if (!out.empty() && out.front() == ' ') out.erase(out.begin());
    return out;
}

corpus::TokenStream encode_store(const Vocabulary& vocab, const corpus::DocumentStore& store) {
    corpus::TokenStream stream;
    stream.vocab_digest = vocab.digest();
    Encoder enc(vocab);
    std::vector<TokenId> doc;
    for (const auto& text : store.documents) {
        doc.clear();
        enc.encode_into(text, doc);
        stream.append_document(doc);
    }
    return stream;
}

std::vector<std::uint64_t> id_counts(const corpus::TokenStream& stream, std::size_t vocab_size) {
    std::vector<std::uint64_t> counts(vocab_size, 0);
    for (TokenId id : stream.ids) ++counts.at(id);
    return counts;
}

// ---------------------------------------------------------------------------
// Vocabulary files
// ---------------------------------------------------------------------------

std::string serialize_vocabulary(const Vocabulary& vocab) {
    std::ostringstream os;
    os << "#xlab-vocab version=1 marker=" << vocab.marker() << " unk=" << vocab.unk_id()
       << " pieces=" << vocab.size() << " merges=" << vocab.merges().size() << '\n';
    for (const auto& p : vocab.pieces()) os << p << '\n';
    os << "#merges\n";
    for (const auto& [l, r] : vocab.merges()) os << l << '\t' << r << '\n';
    return os.str();
}

Vocabulary parse_vocabulary(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        lines.emplace_back(text.substr(start, end - start));
        start = end + 1;
    }
    if (lines.empty()) throw FormatError("empty vocabulary file");
    std::istringstream header(lines[0]);
    std::string tag;
    header >> tag;
    if (tag != "#xlab-vocab") throw FormatError("missing vocabulary header");
    std::map<std::string, std::string> fields;
    std::string kv;
    while (header >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw FormatError("malformed vocabulary header field '" + kv + "'");
        fields[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    for (const char* k : {"version", "marker", "unk", "pieces", "merges"}) {
        if (!fields.count(k)) throw FormatError(std::string("vocabulary header lacks '") + k + "'");
    }
    if (fields["version"] != "1") throw FormatError("unsupported vocabulary version " + fields["version"]);
    const std::size_t n_pieces = std::stoull(fields["pieces"]);
    const std::size_t n_merges = std::stoull(fields["merges"]);
    if (lines.size() < 2 + n_pieces + n_merges || lines[1 + n_pieces] != "#merges") {
        throw FormatError("vocabulary file is truncated or malformed");
    }
    std::vector<std::string> pieces(lines.begin() + 1, lines.begin() + 1 + static_cast<std::ptrdiff_t>(n_pieces));
    std::vector<Merge> merges;
    for (std::size_t i = 0; i < n_merges; ++i) {
        const auto& line = lines[2 + n_pieces + i];
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("merge line without TAB");
        merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return Vocabulary(std::move(pieces), std::move(merges), fields["marker"],
                      static_cast<TokenId>(std::stoul(fields["unk"])));
}

void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::invalid_argument("cannot write '" + path.string() + "'");
    out << serialize_vocabulary(vocab);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_vocabulary(ss.str());
}

// ---------------------------------------------------------------------------
// Cloned vocabularies
// ---------------------------------------------------------------------------

ClonedVocabulary::ClonedVocabulary(Vocabulary base, int n_languages, std::vector<TokenId> anchors)
    : base_(std::move(base)), anchors_(std::move(anchors)) {
    if (n_languages < 1) throw std::invalid_argument("n_languages must be at least 1");
    std::sort(anchors_.begin(), anchors_.end());
    if (std::adjacent_find(anchors_.begin(), anchors_.end()) != anchors_.end()) {
        throw std::invalid_argument("duplicate anchor id");
    }
    if (!anchors_.empty() && anchors_.back() >= base_.size()) throw std::invalid_argument("anchor id out of range");
    dup_index_.assign(base_.size(), 0);
    anchor_rank_.assign(base_.size(), 0);
    for (TokenId r = 0; r < anchors_.size(); ++r) {
        dup_index_[anchors_[r]] = -1;
        anchor_rank_[anchors_[r]] = r;
    }
    for (TokenId t = 0; t < base_.size(); ++t) {
        if (dup_index_[t] < 0) continue;
        dup_index_[t] = static_cast<std::int64_t>(dup_ids_.size());
        dup_ids_.push_back(t);
    }
    block_of_.resize(static_cast<std::size_t>(n_languages));
    std::iota(block_of_.begin(), block_of_.end(), 0);
}

TokenId ClonedVocabulary::to_final(int language, TokenId base_id) const {
    if (language < 0 || language >= n_languages()) throw std::invalid_argument("language index out of range");
    const std::int64_t j = dup_index_.at(base_id);
    if (j < 0) return anchor_rank_[base_id];
    return static_cast<TokenId>(n_anchors() + static_cast<std::size_t>(block_of_[language]) * n_duplicated() +
                                static_cast<std::size_t>(j));
}

ClonedVocabulary::Origin ClonedVocabulary::origin(TokenId final_id) const {
    if (final_id >= size()) throw std::invalid_argument("final id out of range");
    if (final_id < n_anchors()) return {anchors_[final_id], -1};
    const std::size_t rel = final_id - n_anchors();
    const int block = static_cast<int>(rel / n_duplicated());
    const auto it = std::find(block_of_.begin(), block_of_.end(), block);
    return {dup_ids_[rel % n_duplicated()], static_cast<int>(it - block_of_.begin())};
}

std::vector<TokenId> ClonedVocabulary::encode_language(std::span<const TokenId> base_ids, int language) const {
    std::vector<TokenId> out;
    out.reserve(base_ids.size());
    for (TokenId t : base_ids) out.push_back(to_final(language, t));
    return out;
}

std::vector<TokenId> ClonedVocabulary::translate(std::span<const TokenId> final_ids, int from, int to) const {
    std::vector<TokenId> out;
    out.reserve(final_ids.size());
    for (TokenId id : final_ids) {
        const auto o = origin(id);
        if (o.language >= 0 && o.language != from) {
            throw std::invalid_argument("id " + std::to_string(id) + " does not belong to language " + std::to_string(from));
        }
        out.push_back(to_final(to, o.base_id));
    }
    return out;
}

std::vector<std::size_t> ClonedVocabulary::segments() const {
    std::vector<std::size_t> seg{n_anchors()};
    seg.insert(seg.end(), block_of_.size(), n_duplicated());
    return seg;
}

ClonedVocabulary ClonedVocabulary::relabeled(std::span<const int> permutation) const {
    const int n = n_languages();
    if (static_cast<int>(permutation.size()) != n) throw std::invalid_argument("permutation size differs from language count");
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (int p : permutation) {
        if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
            throw std::invalid_argument("language permutation is not a bijection");
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    ClonedVocabulary out = *this;
    for (int i = 0; i < n; ++i) out.block_of_[i] = block_of_[static_cast<std::size_t>(permutation[i])];
    return out;
}

ClonedVocabulary clone_vocab(const Vocabulary& vocab, int n_languages, double anchor_fraction, std::uint64_t seed,
                             AnchorSelection selection, std::span<const std::uint64_t> frequencies) {
    if (n_languages < 1) throw std::invalid_argument("n_languages must be at least 1");
    if (!(anchor_fraction >= 0.0 && anchor_fraction <= 1.0)) {
        throw std::invalid_argument("anchor_fraction must lie in [0, 1]");
    }
    const std::size_t n = vocab.size();
    const auto k = static_cast<std::size_t>(std::floor(anchor_fraction * static_cast<double>(n)));
    Rng rng(seed);
    std::vector<TokenId> anchors;
    if (selection == AnchorSelection::uniform) {
        const auto perm = seeded_permutation(n, rng);
        for (std::size_t i = 0; i < k; ++i) anchors.push_back(static_cast<TokenId>(perm[i]));
    } else {
        if (frequencies.size() != n) throw std::invalid_argument("frequency-stratified anchors need one count per id");
        std::vector<TokenId> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](TokenId a, TokenId b) { return frequencies[a] > frequencies[b]; });
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t lo = s * n / k, hi = (s + 1) * n / k;
            anchors.push_back(order[lo + rng.below(hi - lo)]);
        }
    }
    return ClonedVocabulary(vocab, n_languages, std::move(anchors));
}

ClonedVocabulary relabel(const ClonedVocabulary& cv, std::span<const int> permutation) {
    return cv.relabeled(permutation);
}

// ---------------------------------------------------------------------------
// Merged / joint vocabularies
// ---------------------------------------------------------------------------

MergedVocabulary merge_vocabs(const Vocabulary& vocab_a, const Vocabulary& vocab_b) {
    if (vocab_a.marker() != vocab_b.marker()) {
        throw std::invalid_argument("cannot merge vocabularies with different word-begin markers");
    }
    MergedVocabulary m{vocab_a, vocab_b, {}, {}, {}, vocab_a.pieces()};
    m.remap_a.resize(vocab_a.size());
    std::iota(m.remap_a.begin(), m.remap_a.end(), 0);
    m.remap_b.resize(vocab_b.size());
    for (TokenId i = 0; i < vocab_b.size(); ++i) {
        if (auto in_a = vocab_a.find(vocab_b.piece(i))) {
            m.remap_b[i] = *in_a;
        } else {
            m.remap_b[i] = static_cast<TokenId>(m.pieces.size());
            m.pieces.push_back(vocab_b.piece(i));
        }
    }
    for (TokenId i = 0; i < vocab_a.size(); ++i) {
        if (vocab_b.find(vocab_a.piece(i))) m.shared.push_back(vocab_a.piece(i));
    }
    return m;
}

std::vector<TokenId> JointVocabulary::to_joint(int language, std::span<const TokenId> ids) const {
    const auto& table = remap.at(static_cast<std::size_t>(language));
    std::vector<TokenId> out;
    out.reserve(ids.size());
    for (TokenId id : ids) out.push_back(table.at(id));
    return out;
}

JointVocabulary disjoint_joint(std::span<const Vocabulary> vocabs) {
    JointVocabulary j;
    j.mode = JointVocabulary::Mode::disjoint;
    for (const auto& v : vocabs) {
        std::vector<TokenId> table(v.size());
        std::iota(table.begin(), table.end(), static_cast<TokenId>(j.size));
        j.remap.push_back(std::move(table));
        j.size += v.size();
    }
    return j;
}

JointVocabulary anchored_joint(const MergedVocabulary& merged) {
    JointVocabulary j;
    j.mode = JointVocabulary::Mode::anchored;
    j.remap = {merged.remap_a, merged.remap_b};
    j.size = merged.size();
    return j;
}

}  // namespace xlab::tokenizer
