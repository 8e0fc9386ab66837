#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "softmix/common.hpp"

namespace softmix {

// Flat key-value run configuration. Loaded from a text file (one
// `key value...` pair per line, '#' comments), then overridden by flags;
// flags win. The checksum of the merged view is stamped into every output.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::string& path);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const;
    std::string require(const std::string& key) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    uint64_t seed() const { return get_u64("seed", 1); }
    std::string out_dir() const { return get("out", "out"); }

    // Sorted `key value` lines; the basis of the config checksum.
    std::string canonical_text() const;
    uint64_t checksum() const { return fnv1a64(canonical_text()); }
    std::string checksum_hex() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace softmix
