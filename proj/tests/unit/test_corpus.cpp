#include "doctest.h"

#include <openssl/sha.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "xlab/corpus.hpp"

using namespace xlab;
using namespace xlab::corpus;
namespace fs = std::filesystem;

namespace {

// Canonical serialization hashed with OpenSSL's one-shot SHA256, bypassing
// the library's own hashing wrapper.
Digest oracle_digest(const std::vector<std::string>& docs) {
    std::string bytes;
    for (const auto& d : docs) {
        std::uint64_t n = d.size();
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
        bytes += d;
    }
    Digest out{};
    SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), out.data());
    return out;
}

// Fisher-Yates driven by mt19937_64 with rejection sampling, written out
// independently of seeded_permutation.
std::vector<std::size_t> oracle_test_indices(std::size_t n, std::size_t n_test, std::uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::uint64_t bound = i;
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
        std::uint64_t x;
        do x = eng();
        while (x >= limit);
        std::swap(idx[i - 1], idx[x % bound]);
    }
    idx.resize(n_test);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<std::string> numbered_docs(std::size_t n) {
    std::vector<std::string> docs;
    for (std::size_t i = 0; i < n; ++i) docs.push_back("document " + std::to_string(i));
    return docs;
}

}  // namespace

TEST_CASE("ingest orders files lexicographically") {
    test::TempDir dir;
    test::write_file(dir / "b.txt", "from b");
    test::write_file(dir / "a.txt", "from a");
    const std::vector<fs::path> paths = {dir / "b.txt", dir / "a.txt"};
    const auto store = ingest(paths);
    REQUIRE(store.size() == 2);
    CHECK(store.documents[0] == "from a");
    CHECK(store.documents[1] == "from b");

    const std::vector<fs::path> as_dir = {dir.path()};
    CHECK(ingest(as_dir).documents == store.documents);
}

TEST_CASE("empty directory gives an empty store with the empty digest") {
    test::TempDir dir;
    fs::create_directories(dir / "empty");
    const std::vector<fs::path> paths = {dir / "empty"};
    const auto store = ingest(paths);
    CHECK(store.empty());
    CHECK(store.source_id == oracle_digest({}));
}

TEST_CASE("store digest matches an independent SHA-256 of the canonical form") {
    test::TempDir dir;
    test::write_file(dir / "one.txt", "alpha\fbeta\fgamma");
    test::write_file(dir / "two.txt", "delta\fepsilon\f  \n\fzeta");   // whitespace-only doc dropped
    test::write_file(dir / "sub" / "three.txt", "eta\ftheta\fiota\fkappa");
    const std::vector<fs::path> paths = {dir.path()};
    const auto store = ingest(paths);
    REQUIRE(store.size() == 10);
    CHECK(store.documents.front() == "alpha");
    CHECK(store.documents[3] == "eta");   // "sub/three.txt" sorts before "two.txt"
    CHECK(store.source_id == oracle_digest(store.documents));

    auto changed = store.documents;
    changed[4][0] ^= 1;
    CHECK(store_digest(changed) != store.source_id);
    CHECK(store_digest(store.documents) == store.source_id);
}

TEST_CASE("invalid UTF-8 names the file and offset") {
    test::TempDir dir;
    test::write_file(dir / "bad.txt", std::string("ok \xC3(", 5));
    const std::vector<fs::path> paths = {dir / "bad.txt"};
    try {
        ingest(paths);
        FAIL("expected DecodeError");
    } catch (const DecodeError& e) {
        CHECK(e.offset() == 3);
        CHECK(e.file().find("bad.txt") != std::string::npos);
    }
    const std::vector<fs::path> missing = {dir / "nope.txt"};
    CHECK_THROWS_AS(ingest(missing), std::invalid_argument);
    CHECK(find_invalid_utf8("h\xE2\x96\x81llo") == std::string::npos);
    CHECK(find_invalid_utf8("\xED\xA0\x80") == 0);   // surrogate
}

TEST_CASE("split sizes and rounding") {
    const auto store = make_store(numbered_docs(10));
    auto [tr0, te0] = split(store, 0.0, 1);
    CHECK(tr0.size() == 10);
    CHECK(te0.size() == 0);

    auto [tr, te] = split(store, 0.2, 7);
    CHECK(tr.size() == 8);
    CHECK(te.size() == 2);
    auto [tr2, te2] = split(store, 0.2, 7);
    CHECK(tr2.documents == tr.documents);
    CHECK(te2.documents == te.documents);
    CHECK(te.source_id == te2.source_id);

    CHECK(test_count(10, 0.05) == 1);   // 0.5 rounds up
    CHECK(test_count(10, 0.01) == 1);   // minimum one
    CHECK(test_count(10, 0.25) == 3);
    CHECK(test_count(100, 0.1) == 10);
    CHECK_THROWS_AS(split(store, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(split(make_store({}), 0.1, 0), std::invalid_argument);
}

TEST_CASE("split matches a reimplemented seeded shuffle and partitions the store") {
    const auto docs = numbered_docs(100);
    const auto store = make_store(docs);
    for (std::uint64_t seed : {0ULL, 3ULL, 12345ULL}) {
        auto [train, test] = split(store, 0.1, seed);
        REQUIRE(test.size() == 10);
        std::vector<std::string> expected;
        for (auto i : oracle_test_indices(100, 10, seed)) expected.push_back(docs[i]);
        CHECK(test.documents == expected);

        auto all = train.documents;
        all.insert(all.end(), test.documents.begin(), test.documents.end());
        auto sorted_all = all, sorted_docs = docs;
        std::sort(sorted_all.begin(), sorted_all.end());
        std::sort(sorted_docs.begin(), sorted_docs.end());
        CHECK(sorted_all == sorted_docs);
        for (const auto& d : test.documents) {
            CHECK(std::find(train.documents.begin(), train.documents.end(), d) == train.documents.end());
        }
    }
}

TEST_CASE("token stream round trip and validation") {
    test::TempDir dir;
    TokenStream s;
    s.append_document(std::vector<TokenId>{1, 2, 3});
    s.append_document(std::vector<TokenId>{4000000000u, 5});
    s.vocab_digest = sha256("vocab");
    write_token_stream(dir / "s.xlts", s);
    const auto bytes = test::read_file(dir / "s.xlts");
    CHECK(bytes.substr(0, 4) == "XLTS");
    CHECK(static_cast<int>(bytes[4]) == 1);
    CHECK(bytes.size() == 4 + 1 + 32 + 8 + 8 + 5 * 4 + 2 * 8);

    const auto back = read_token_stream(dir / "s.xlts");
    CHECK(back.ids == s.ids);
    CHECK(back.doc_boundaries == s.doc_boundaries);
    CHECK(back.vocab_digest == s.vocab_digest);
    CHECK(back.document(1).size() == 2);

    CHECK_THROWS_AS(back.validate(100), FormatError);
    TokenStream bad = s;
    bad.doc_boundaries = {3, 3};
    CHECK_THROWS_AS(bad.validate(UINT32_MAX), FormatError);
    bad.doc_boundaries = {3};
    CHECK_THROWS_AS(bad.validate(UINT32_MAX), FormatError);

    test::write_file(dir / "junk.xlts", "XLTX" + bytes.substr(4));
    CHECK_THROWS_AS(read_token_stream(dir / "junk.xlts"), FormatError);
    test::write_file(dir / "short.xlts", bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_token_stream(dir / "short.xlts"), FormatError);
}
