#pragma once

// Shared error taxonomy and content hashing for the dpl library.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dpl {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dimension disagreement between containers that must be congruent.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Input outside the mathematical domain of an operation (e.g. zero-norm
// vector fed to cosine similarity).
class DomainError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// A caller-side precondition was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

// Non-finite value produced or consumed where finiteness is required.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Token sequence longer than the encoder supports.
class LengthError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Raised when model selection has no successful trial to choose from.
class SelectionError : public Error {
public:
    using Error::Error;
};

// Raised when a result table is too incomplete to report.
class ReportError : public Error {
public:
    using Error::Error;
};

// FNV-1a 64-bit. Used for content fingerprints and for deriving named RNG
// streams; not cryptographic.
constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x00000100000001b3ull;

inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = kFnvBasis) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = kFnvBasis) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h = kFnvBasis) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv1a(b, 8, h);
}

}  // namespace dpl
