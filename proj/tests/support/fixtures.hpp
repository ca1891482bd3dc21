#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xlab/common.hpp"
#include "xlab/corpus.hpp"
#include "xlab/tokenizer.hpp"

namespace xlab::test {

class TempDir {
public:
    TempDir() {
        std::string pattern = (std::filesystem::temp_directory_path() / "xlab-test-XXXXXX").string();
        if (mkdtemp(pattern.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
        path_ = pattern;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << bytes;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// Vocabulary of n pieces ("<unk>", then "▁s1" ... ) with no merges.
inline tokenizer::Vocabulary flat_vocab(std::size_t n) {
    std::vector<std::string> pieces = {std::string(tokenizer::kUnkPiece)};
    for (std::size_t i = 1; i < n; ++i) pieces.push_back(std::string(tokenizer::kWordBegin) + "s" + std::to_string(i));
    return tokenizer::Vocabulary(std::move(pieces), {});
}

/// Order-1 Markov chain over ids 1..V-1: each state moves to one of three
/// successors with probabilities 0.7 / 0.2 / 0.1. Documents of doc_len ids.
inline corpus::TokenStream markov_stream(std::size_t vocab, std::size_t length, std::uint64_t seed,
                                         std::size_t doc_len = 400) {
    Rng rng(seed);
    corpus::TokenStream s;
    std::vector<TokenId> doc;
    TokenId state = 1;
    const std::size_t states = vocab - 1;
    for (std::size_t i = 0; i < length; ++i) {
        const double u = rng.uniform();
        const std::size_t step = u < 0.7 ? 1 : (u < 0.9 ? 3 : 7);
        state = static_cast<TokenId>(1 + ((state - 1) * 5 + step) % states);
        doc.push_back(state);
        if (doc.size() == doc_len || i + 1 == length) {
            s.append_document(doc);
            doc.clear();
        }
    }
    return s;
}

/// Empirical unigram entropy (nats) of a stream.
inline double unigram_entropy(const corpus::TokenStream& s, std::size_t vocab) {
    std::vector<double> counts(vocab, 0.0);
    for (auto id : s.ids) counts[id] += 1.0;
    double h = 0.0;
    for (double c : counts) {
        if (c > 0) {
            const double p = c / static_cast<double>(s.ids.size());
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace xlab::test
