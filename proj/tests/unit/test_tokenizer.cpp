#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "xlab/tokenizer.hpp"

using namespace xlab;
using namespace xlab::tokenizer;

namespace {

const std::string kM(kWordBegin);

// Plain BPE over a word-frequency table: count every adjacent pair, take the
// most frequent (smallest (left, right) on ties), merge left to right.
std::vector<Merge> oracle_merges(const std::vector<std::string>& texts, std::size_t n_merges) {
    std::map<std::vector<std::string>, std::size_t> words;
    for (const auto& t : texts) {
        for (const auto& w : pretokenize(t)) ++words[split_code_points(w)];
    }
    std::vector<Merge> merges;
    for (std::size_t k = 0; k < n_merges; ++k) {
        std::map<Merge, std::size_t> counts;
        for (const auto& [w, f] : words) {
            for (std::size_t i = 0; i + 1 < w.size(); ++i) counts[{w[i], w[i + 1]}] += f;
        }
        if (counts.empty()) break;
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it) {
            if (it->second > best->second) best = it;   // map order gives the lexicographic tie-break
        }
        merges.push_back(best->first);
        std::map<std::vector<std::string>, std::size_t> next;
        for (const auto& [w, f] : words) {
            std::vector<std::string> out;
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (i + 1 < w.size() && w[i] == best->first.first && w[i + 1] == best->first.second) {
                    out.push_back(w[i] + w[i + 1]);
                    ++i;
                } else {
                    out.push_back(w[i]);
                }
            }
            next[out] += f;
        }
        words = std::move(next);
    }
    return merges;
}

corpus::DocumentStore store_of(std::vector<std::string> docs) { return corpus::make_store(std::move(docs)); }

}  // namespace

TEST_CASE("single merge on abababab") {
    const auto store = store_of({"abababab"});
    const auto base = base_alphabet_size(store);
    CHECK(base == 4);   // <unk>, a, b, marker
    const auto v = train_bpe(store, base + 1);
    REQUIRE(v.merges().size() == 1);
    CHECK(v.merges()[0] == Merge{"a", "b"});
    CHECK(v.merges() == oracle_merges({"abababab"}, 1));
    CHECK(v.size() == base + 1);
}

TEST_CASE("vocab size equal to the alphabet means no merges") {
    const auto store = store_of({"aaaa"});
    const auto v = train_bpe(store, base_alphabet_size(store));
    CHECK(v.merges().empty());
    CHECK(v.pieces() == std::vector<std::string>{std::string(kUnkPiece), "a", kM});
    CHECK_THROWS_AS(train_bpe(store, base_alphabet_size(store) - 1), std::invalid_argument);
}

TEST_CASE("merges match the pair-counting oracle") {
    const std::vector<std::string> low = {"low low lower"};
    const auto store = store_of(low);
    const auto v = train_bpe(store, base_alphabet_size(store) + 3);
    CHECK(v.merges() == oracle_merges(low, 3));

    const std::vector<std::string> text = {"the cat sat on the mat", "a hat that sat there", "then the rat ran"};
    const auto s2 = store_of(text);
    const auto v2 = train_bpe(s2, base_alphabet_size(s2) + 12);
    CHECK(v2.merges() == oracle_merges(text, 12));
    CHECK(train_bpe(s2, base_alphabet_size(s2) + 12) == v2);   // deterministic
    for (const auto& [l, r] : v2.merges()) CHECK(v2.find(l + r).has_value());
}

TEST_CASE("encode and decode") {
    const std::vector<std::string> text = {"hello world, hello there world"};
    const auto v = train_bpe(store_of(text), base_alphabet_size(store_of(text)) + 6);
    CHECK(decode(v, encode(v, "hello world")) == "hello world");
    CHECK(encode(v, "").empty());
    CHECK(encode(v, "   ").empty());

    const auto ids = encode(v, "hellq zz");
    CHECK(std::count(ids.begin(), ids.end(), v.unk_id()) == 3);
    CHECK(decode(v, ids).find(std::string(kUnkSurface)) != std::string::npos);

    const std::vector<TokenId> bad = {static_cast<TokenId>(v.size())};
    CHECK_THROWS_AS(decode(v, bad), std::invalid_argument);

    Encoder enc(v);
    CHECK(enc.encode("hello there") == encode(v, "hello there"));
}

TEST_CASE("vocabulary file round trip") {
    test::TempDir dir;
    const auto store = store_of({"one two three two one"});
    const auto v = train_bpe(store, base_alphabet_size(store) + 4);
    save_vocabulary(dir / "v.vocab", v);
    const auto back = load_vocabulary(dir / "v.vocab");
    CHECK(back == v);
    CHECK(back.digest() == v.digest());
    CHECK(test::read_file(dir / "v.vocab").rfind("#xlab-vocab version=1", 0) == 0);
    CHECK_THROWS(parse_vocabulary("not a vocabulary"));
}

TEST_CASE("clone layout arithmetic") {
    const auto base = test::flat_vocab(100);
    const auto cv = clone_vocab(base, 2, 0.0, 1);
    CHECK(cv.size() == 200);
    CHECK(cv.to_final(1, 5) == 105);
    CHECK(cv.to_final(0, 5) == 5);

    const auto full = clone_vocab(base, 2, 1.0, 1);
    CHECK(full.size() == 100);
    for (TokenId t = 0; t < 100; ++t) CHECK(full.to_final(0, t) == full.to_final(1, t));

    const auto part = clone_vocab(base, 2, 0.4, 9);
    CHECK(part.size() == 160);
    CHECK(part.n_anchors() == 40);
    std::set<TokenId> seen0, seen1;
    for (TokenId t = 0; t < 100; ++t) {
        const auto a = part.to_final(0, t), b = part.to_final(1, t);
        CHECK((part.is_anchor(t) ? a == b : a != b));
        seen0.insert(a);
        seen1.insert(b);
    }
    CHECK(seen0.size() == 100);   // bijection per language
    CHECK(seen1.size() == 100);
    CHECK(clone_vocab(base, 2, 0.4, 9) == part);
}

TEST_CASE("translation round trip and relabelling") {
    const auto cv = clone_vocab(test::flat_vocab(100), 3, 0.3, 2);
    std::vector<TokenId> base_ids;
    for (TokenId t = 0; t < 100; t += 3) base_ids.push_back(t);
    const auto l0 = cv.encode_language(base_ids, 0);
    const auto l2 = cv.translate(l0, 0, 2);
    CHECK(l2 == cv.encode_language(base_ids, 2));
    CHECK(cv.translate(l2, 2, 0) == l0);

    const std::vector<int> id = {0, 1, 2};
    CHECK(relabel(cv, id) == cv);

    const auto two = clone_vocab(test::flat_vocab(100), 2, 0.0, 1);
    const std::vector<int> swap = {1, 0};
    const auto swapped = relabel(two, swap);
    CHECK(swapped.to_final(0, 5) == 105);
    CHECK(swapped.to_final(1, 5) == 5);
    CHECK(relabel(swapped, swap) == two);
    CHECK(swapped.anchors() == two.anchors());
    const std::vector<int> bad = {0, 0};
    CHECK_THROWS_AS(relabel(two, bad), std::invalid_argument);
}

TEST_CASE("merged vocabularies") {
    const Vocabulary a({kM + "the", "chat"}, {}), b({kM + "the", "chien"}, {});
    const auto m = merge_vocabs(a, b);
    CHECK(m.size() == 3);
    CHECK(m.remap_b[0] == m.remap_a[0]);

    const auto same = merge_vocabs(a, a);
    CHECK(same.size() == a.size());
    CHECK(same.remap_b == same.remap_a);

    const Vocabulary other_marker({"_the"}, {}, "_");
    CHECK_THROWS_AS(merge_vocabs(a, other_marker), std::invalid_argument);
}

TEST_CASE("merged size equals |A| + |B| - overlap for trained vocabularies") {
    const auto sa = store_of({"the quick brown fox jumps over the lazy dog again and again"});
    const auto sb = store_of({"le renard brun saute par dessus le chien paresseux encore"});
    const auto va = train_bpe(sa, base_alphabet_size(sa) + 8);
    const auto vb = train_bpe(sb, base_alphabet_size(sb) + 8);
    std::set<std::string> pa(va.pieces().begin(), va.pieces().end()), pb(vb.pieces().begin(), vb.pieces().end());
    std::vector<std::string> common;
    std::set_intersection(pa.begin(), pa.end(), pb.begin(), pb.end(), std::back_inserter(common));
    CHECK(!common.empty());
    const auto m = merge_vocabs(va, vb);
    CHECK(m.size() == va.size() + vb.size() - common.size());
    CHECK(m.shared.size() == common.size());
    for (TokenId i = 0; i < va.size(); ++i) CHECK(m.pieces[m.remap_a[i]] == va.piece(i));
    for (TokenId i = 0; i < vb.size(); ++i) CHECK(m.pieces[m.remap_b[i]] == vb.piece(i));

    const auto anchored = anchored_joint(m);
    CHECK(anchored.size == m.size());
    const auto shared_id_a = *va.find(common.front()), shared_id_b = *vb.find(common.front());
    CHECK(anchored.to_joint(0, std::vector<TokenId>{shared_id_a}) ==
          anchored.to_joint(1, std::vector<TokenId>{shared_id_b}));
}

TEST_CASE("disjoint joint offsets") {
    const std::vector<Vocabulary> vs = {test::flat_vocab(2000), test::flat_vocab(2000)};
    const auto joint = disjoint_joint(std::span<const Vocabulary>(vs));
    CHECK(joint.size == 4000);
    CHECK(joint.to_joint(1, std::vector<TokenId>{7}) == std::vector<TokenId>{2007});
    CHECK(joint.to_joint(0, std::vector<TokenId>{7}) == std::vector<TokenId>{7});
}
