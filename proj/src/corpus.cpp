#include "xlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace xlab::corpus {

namespace fs = std::filesystem;

Digest store_digest(std::span<const std::string> documents) {
    Sha256 h;
    for (const auto& doc : documents) {
        h.update_u64(doc.size());
        h.update(doc);
    }
    return h.finish();
}

DocumentStore make_store(std::vector<std::string> documents) {
    DocumentStore store;
    store.documents = std::move(documents);
    store.source_id = store_digest(store.documents);
    return store;
}

std::size_t find_invalid_utf8(std::string_view text) noexcept {
    const auto* s = reinterpret_cast<const unsigned char*>(text.data());
    const std::size_t n = text.size();
    std::size_t i = 0;
    while (i < n) {
        const unsigned char c = s[i];
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return i;
        }
        if (i + len > n) return i;
        for (std::size_t k = 1; k < len; ++k) {
            if ((s[i + k] & 0xC0) != 0x80) return i;
            cp = (cp << 6) | (s[i + k] & 0x3F);
        }
        // overlong forms, surrogates, out of range
        if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
            (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
            return i;
        }
        i += len;
    }
    return std::string_view::npos;
}

namespace {

bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    });
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

}  // namespace

DocumentStore ingest(std::span<const fs::path> paths) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            for (const auto& entry : fs::recursive_directory_iterator(p)) {
                if (entry.is_regular_file()) files.push_back(entry.path());
            }
        } else if (fs::is_regular_file(p)) {
            files.push_back(p);
        } else {
            throw std::invalid_argument("no such file or directory: '" + p.string() + "'");
        }
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });
    files.erase(std::unique(files.begin(), files.end()), files.end());

    std::vector<std::string> docs;
    for (const auto& file : files) {
        std::string text = read_file(file);
        if (auto bad = find_invalid_utf8(text); bad != std::string_view::npos) {
            throw DecodeError(file.string(), bad);
        }
        std::size_t start = 0;
        while (start <= text.size()) {
            std::size_t end = text.find(kDocumentSeparator, start);
            if (end == std::string::npos) end = text.size();
            std::string_view piece(text.data() + start, end - start);
            if (!is_blank(piece)) docs.emplace_back(piece);
            start = end + 1;
        }
    }
    return make_store(std::move(docs));
}

std::size_t test_count(std::size_t n_documents, double test_fraction) {
    if (!(test_fraction >= 0.0) || test_fraction >= 1.0) {
        throw std::invalid_argument("test_fraction must lie in [0, 1)");
    }
    if (test_fraction == 0.0) return 0;
    auto k = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n_documents) + 0.5));
    return std::clamp<std::size_t>(k, 1, n_documents);
}

std::pair<DocumentStore, DocumentStore> split(const DocumentStore& store, double test_fraction,
                                              std::uint64_t seed) {
    const std::size_t n_test = test_count(store.size(), test_fraction);
    if (n_test > 0 && store.empty()) {
        throw std::invalid_argument("cannot take a test split of an empty store");
    }
    Rng rng(seed);
    const auto perm = seeded_permutation(store.size(), rng);
    std::vector<bool> in_test(store.size(), false);
    for (std::size_t i = 0; i < n_test; ++i) in_test[perm[i]] = true;

    std::vector<std::string> train, test;
    for (std::size_t i = 0; i < store.size(); ++i) {
        (in_test[i] ? test : train).push_back(store.documents[i]);
    }
    return {make_store(std::move(train)), make_store(std::move(test))};
}

std::span<const TokenId> TokenStream::document(std::size_t i) const {
    const std::uint64_t begin = i == 0 ? 0 : doc_boundaries.at(i - 1);
    const std::uint64_t end = doc_boundaries.at(i);
    return std::span<const TokenId>(ids).subspan(begin, end - begin);
}

void TokenStream::validate(std::size_t vocab_size) const {
    std::uint64_t prev = 0;
    for (std::uint64_t b : doc_boundaries) {
        if (b <= prev) throw FormatError("token stream boundaries must be strictly increasing");
        prev = b;
    }
    if (!doc_boundaries.empty() && doc_boundaries.back() != ids.size()) {
        throw FormatError("last token stream boundary must equal the token count");
    }
    if (doc_boundaries.empty() && !ids.empty()) {
        throw FormatError("token stream has tokens but no document boundaries");
    }
    for (TokenId id : ids) {
        if (id >= vocab_size) {
            throw FormatError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                              std::to_string(vocab_size));
        }
    }
}

void TokenStream::append_document(std::span<const TokenId> doc) {
    if (doc.empty()) return;
    ids.insert(ids.end(), doc.begin(), doc.end());
    doc_boundaries.push_back(ids.size());
}

void write_token_stream(const fs::path& path, const TokenStream& stream) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::invalid_argument("cannot write '" + path.string() + "'");
    out.write("XLTS", 4);
    detail::put_le<std::uint8_t>(out, kTokenStreamVersion);
    detail::put_bytes(out, stream.vocab_digest.data(), stream.vocab_digest.size());
    detail::put_le<std::uint64_t>(out, stream.ids.size());
    detail::put_le<std::uint64_t>(out, stream.doc_boundaries.size());
    if constexpr (std::endian::native == std::endian::little) {
        detail::put_bytes(out, stream.ids.data(), stream.ids.size() * sizeof(TokenId));
        detail::put_bytes(out, stream.doc_boundaries.data(), stream.doc_boundaries.size() * sizeof(std::uint64_t));
    } else {
        for (TokenId id : stream.ids) detail::put_le<std::uint32_t>(out, id);
        for (auto b : stream.doc_boundaries) detail::put_le<std::uint64_t>(out, b);
    }
    if (!out) throw Error("write failed for '" + path.string() + "'");
}

TokenStream read_token_stream(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open '" + path.string() + "'");
    char magic[4];
    detail::get_bytes(in, magic, 4);
    if (std::string_view(magic, 4) != "XLTS") throw FormatError("'" + path.string() + "' is not a token stream");
    if (detail::get_le<std::uint8_t>(in) != kTokenStreamVersion) throw FormatError("unsupported token stream version");
    TokenStream s;
    detail::get_bytes(in, s.vocab_digest.data(), s.vocab_digest.size());
    const auto n_ids = detail::get_le<std::uint64_t>(in);
    const auto n_bounds = detail::get_le<std::uint64_t>(in);
    const auto file_size = fs::file_size(path);
    if (n_ids > file_size / 4 || n_bounds > file_size / 8) throw FormatError("token stream header counts exceed file size");
    s.ids.resize(n_ids);
    s.doc_boundaries.resize(n_bounds);
    if constexpr (std::endian::native == std::endian::little) {
        detail::get_bytes(in, s.ids.data(), n_ids * sizeof(TokenId));
        detail::get_bytes(in, s.doc_boundaries.data(), n_bounds * sizeof(std::uint64_t));
    } else {
        for (auto& id : s.ids) id = detail::get_le<std::uint32_t>(in);
        for (auto& b : s.doc_boundaries) b = detail::get_le<std::uint64_t>(in);
    }
    return s;
}

}  // namespace xlab::corpus
