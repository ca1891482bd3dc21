#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xlab {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Errors. Argument problems use std::invalid_argument directly; everything
// else derives from Error so callers can tell lab failures from bugs.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input text is not valid UTF-8.
class DecodeError : public Error {
public:
    DecodeError(std::string file, std::size_t offset);
    const std::string& file() const noexcept { return file_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::string file_;
    std::size_t offset_;
};

/// A loss or gradient went non-finite.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A stored digest does not match recomputed content or configuration.
class DigestError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent on-disk data or configuration.
class FormatError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

/// Progress and warning lines on stderr. XLAB_QUIET=1 silences info lines.
void log_info(std::string_view message);
void log_warning(std::string_view message);

// ---------------------------------------------------------------------------
// SHA-256 digests (OpenSSL-backed).
// ---------------------------------------------------------------------------

using Digest = std::array<std::uint8_t, 32>;

class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(std::span<const std::uint8_t> bytes);
    Sha256& update(std::string_view bytes);
    Sha256& update_u64(std::uint64_t value);  // little-endian
    Digest finish();

private:
    void* ctx_;
};

Digest sha256(std::string_view bytes);
std::string to_hex(const Digest& digest);
Digest digest_from_hex(std::string_view hex);

// ---------------------------------------------------------------------------
// Seeded randomness. The engine is std::mt19937_64 (fully specified by the
// standard); the conversions to uniform/normal variates are done here rather
// than with <random> distributions, whose output is implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, bound); rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t bound);

    /// Standard normal via Box-Muller (one variate per call, no cached spare).
    double normal();

    std::string save() const;
    void restore(const std::string& state);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

/// Fisher-Yates shuffle of [0, n) driven by Rng::below, from the back.
std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng);

/// Sum whose result does not depend on the order of `parts`: the values are
/// sorted before accumulation.
template <typename T>
T order_free_sum(std::span<T> parts) {
    std::sort(parts.begin(), parts.end());
    T total{0};
    for (T v : parts) total += v;
    return total;
}

}  // namespace xlab
