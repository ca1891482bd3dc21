#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xlab/common.hpp"

namespace xlab::corpus {

/// Ordered UTF-8 documents plus a content digest over their canonical
/// serialization: for each document, its byte length as a little-endian u64
/// followed by its bytes.
struct DocumentStore {
    std::vector<std::string> documents;
    Digest source_id{};

    std::size_t size() const noexcept { return documents.size(); }
    bool empty() const noexcept { return documents.empty(); }
};

/// Builds a store from documents already in memory (digest computed here).
DocumentStore make_store(std::vector<std::string> documents);

Digest store_digest(std::span<const std::string> documents);

/// Within one file, a form-feed character separates documents.
inline constexpr char kDocumentSeparator = '\f';

/// Reads files (directories are expanded recursively to their regular
/// files), orders them lexicographically by path, and splits each file into
/// documents. Whitespace-only documents are dropped.
/// Throws DecodeError on invalid UTF-8 and std::invalid_argument on missing
/// paths.
DocumentStore ingest(std::span<const std::filesystem::path> paths);

/// Byte offset of the first invalid UTF-8 sequence, or npos if valid.
std::size_t find_invalid_utf8(std::string_view text) noexcept;

/// Number of test documents for a split: round-half-up of fraction * n, at
/// least one when fraction > 0.
std::size_t test_count(std::size_t n_documents, double test_fraction);

/// Document-level train/test split. The test half is the first
/// test_count(...) entries of seeded_permutation(n, Rng(seed)); both halves
/// keep the original relative document order.
std::pair<DocumentStore, DocumentStore> split(const DocumentStore& store, double test_fraction,
                                              std::uint64_t seed);

/// Token ids with per-document end offsets.
struct TokenStream {
    std::vector<TokenId> ids;
    std::vector<std::uint64_t> doc_boundaries;  // end offset of each document
    Digest vocab_digest{};

    std::size_t size() const noexcept { return ids.size(); }
    std::size_t n_documents() const noexcept { return doc_boundaries.size(); }
    std::span<const TokenId> document(std::size_t i) const;

    /// Throws FormatError if boundaries are malformed or any id >= vocab_size.
    void validate(std::size_t vocab_size) const;
    void append_document(std::span<const TokenId> doc);
};

// "XLTS", u8 version, 32-byte vocab digest, u64 token count,
// u64 boundary count, then u32 ids and u64 boundaries, all little-endian.
inline constexpr std::uint8_t kTokenStreamVersion = 1;

void write_token_stream(const std::filesystem::path& path, const TokenStream& stream);
TokenStream read_token_stream(const std::filesystem::path& path);

}  // namespace xlab::corpus
