#include "softmix/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace softmix {

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config: " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        std::string value;
        std::getline(ls, value);
        size_t start = value.find_first_not_of(" \t");
        size_t end = value.find_last_not_of(" \t\r");
        if (start == std::string::npos)
            throw FormatError(path + ":" + std::to_string(lineno) + ": key '" + key +
                              "' has no value");
        cfg.kv_[key] = value.substr(start, end - start + 1);
    }
    return cfg;
}

std::string RunConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

std::string RunConfig::require(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw UsageError("missing required config key: " + key);
    return it->second;
}

int RunConfig::get_int(const std::string& key, int fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " is not an integer: " + it->second);
    }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " is not a number: " + it->second);
    }
}

uint64_t RunConfig::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " is not an unsigned integer: " + it->second);
    }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "1" || it->second == "true") return true;
    if (it->second == "0" || it->second == "false") return false;
    throw UsageError("config key " + key + " is not a boolean: " + it->second);
}

std::string RunConfig::canonical_text() const {
    // Output locations are wiring, not experiment identity: two runs that
    // differ only in where they write are the same run.
    std::string out;
    for (const auto& [k, v] : kv_) {
        if (k == "out" || k.rfind("paths.", 0) == 0) continue;
        out += k;
        out += ' ';
        out += v;
        out += '\n';
    }
    return out;
}

std::string RunConfig::checksum_hex() const { return to_hex(checksum()); }

}  // namespace softmix
