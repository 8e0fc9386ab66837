#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "softmix/lm.hpp"
#include "softmix/tensor.hpp"

namespace softmix {

// Checkpoints are a text manifest (<stem>.manifest.txt) naming config
// fields, tensor shapes and byte offsets, plus a single blob (<stem>.blob)
// of little-endian float32 in manifest order. Loading verifies shapes and
// an FNV-1a checksum of the whole blob.

struct ManifestTensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    uint64_t offset = 0;  // bytes into the blob
};

struct Checkpoint {
    std::string kind;
    std::vector<std::pair<std::string, std::string>> meta;  // ordered key-value
    std::vector<ManifestTensor> entries;
    std::map<std::string, Tensor> tensors;

    const std::string& meta_value(const std::string& key) const;
    bool has_meta(const std::string& key) const;
    const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(const std::string& stem, const std::string& kind,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors);

Checkpoint read_checkpoint(const std::string& stem);

void save_lm_checkpoint(const MaskedLM& lm, const std::string& stem,
                        const std::vector<std::pair<std::string, std::string>>& extra_meta = {});

MaskedLM load_lm_checkpoint(const std::string& stem);

}  // namespace softmix
