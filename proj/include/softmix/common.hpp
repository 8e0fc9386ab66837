#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace softmix {

// Error taxonomy. The CLI maps each class to a distinct exit code.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Caller handed us a value that violates a precondition.
struct InputError : Error {
    using Error::Error;
};
// A file or stream does not match its documented format.
struct FormatError : Error {
    using Error::Error;
};
// An internal invariant broke; indicates a bug, not bad input.
struct InternalError : Error {
    using Error::Error;
};
// Optimization produced a non-finite quantity and aborted.
struct NumericalError : Error {
    using Error::Error;
};
// Bad command-line usage.
struct UsageError : Error {
    using Error::Error;
};

// FNV-1a over bytes; used for config checksums and checkpoint blobs.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

std::string to_hex(uint64_t v);

}  // namespace softmix
