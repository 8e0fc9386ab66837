#include "softmix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace softmix {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32");

namespace {

constexpr const char* kMagic = "softmix-checkpoint";
constexpr int kFormatVersion = 1;

int parse_int(const std::string& s, const std::string& what) {
    try {
        return std::stoi(s);
    } catch (const std::exception&) {
        throw FormatError("bad integer for " + what + ": " + s);
    }
}

uint64_t parse_u64(const std::string& s, const std::string& what, int base = 10) {
    try {
        return std::stoull(s, nullptr, base);
    } catch (const std::exception&) {
        throw FormatError("bad number for " + what + ": " + s);
    }
}

std::string blob_path(const std::string& stem) { return stem + ".blob"; }
std::string manifest_path(const std::string& stem) { return stem + ".manifest.txt"; }

uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open blob: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

}  // namespace

const std::string& Checkpoint::meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    throw FormatError("manifest missing key: " + key);
}

bool Checkpoint::has_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return true;
    return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint missing tensor: " + name);
    return it->second;
}

void write_checkpoint(const std::string& stem, const std::string& kind,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::filesystem::path p(stem);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());

    {
        std::ofstream blob(blob_path(stem), std::ios::binary | std::ios::trunc);
        if (!blob) throw InputError("cannot write blob: " + blob_path(stem));
        std::vector<float> buf;
        for (const auto& [name, t] : tensors) {
            buf.resize(t->v.size());
            for (size_t i = 0; i < t->v.size(); ++i) buf[i] = static_cast<float>(t->v[i]);
            blob.write(reinterpret_cast<const char*>(buf.data()),
                       static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
    }
    uint64_t checksum = file_checksum(blob_path(stem));

    std::ofstream out(manifest_path(stem), std::ios::trunc);
    if (!out) throw InputError("cannot write manifest: " + manifest_path(stem));
    out << kMagic << " " << kFormatVersion << "\n";
    out << "kind " << kind << "\n";
    out << "blob " << std::filesystem::path(blob_path(stem)).filename().string() << "\n";
    out << "blob_checksum " << to_hex(checksum) << "\n";
    for (const auto& [k, v] : meta) out << "meta." << k << " " << v << "\n";
    uint64_t off = 0;
    for (const auto& [name, t] : tensors) {
        out << "tensor " << name << " " << t->rows << " " << t->cols << " " << off << "\n";
        off += t->v.size() * sizeof(float);
    }
}

Checkpoint read_checkpoint(const std::string& stem) {
    std::ifstream in(manifest_path(stem));
    if (!in) throw InputError("cannot open manifest: " + manifest_path(stem));
    Checkpoint cp;
    std::string line;
    std::string blob_name;
    uint64_t want_checksum = 0;
    bool have_checksum = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        auto fail = [&](const std::string& why) {
            throw FormatError("manifest line " + std::to_string(lineno) + ": " + why);
        };
        if (lineno == 1) {
            int ver = 0;
            if (head != kMagic || !(ls >> ver) || ver != kFormatVersion)
                fail("bad header (expected '" + std::string(kMagic) + " 1')");
            continue;
        }
        if (head == "kind") {
            ls >> cp.kind;
        } else if (head == "blob") {
            ls >> blob_name;
        } else if (head == "blob_checksum") {
            std::string hex;
            ls >> hex;
            want_checksum = parse_u64(hex, "blob_checksum", 16);
            have_checksum = true;
        } else if (head.rfind("meta.", 0) == 0) {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            cp.meta.emplace_back(head.substr(5), rest);
        } else if (head == "tensor") {
            ManifestTensor e;
            if (!(ls >> e.name >> e.rows >> e.cols >> e.offset)) fail("bad tensor entry");
            if (e.rows < 0 || e.cols < 0) fail("negative tensor shape");
            cp.entries.push_back(e);
        } else {
            fail("unknown directive '" + head + "'");
        }
    }
    if (cp.kind.empty()) throw FormatError("manifest has no kind");
    if (blob_name.empty() || !have_checksum) throw FormatError("manifest has no blob reference");

    std::filesystem::path bp = std::filesystem::path(manifest_path(stem)).parent_path() / blob_name;
    uint64_t got = file_checksum(bp.string());
    if (got != want_checksum) throw FormatError("blob checksum mismatch for " + bp.string());

    std::ifstream blob(bp, std::ios::binary);
    if (!blob) throw InputError("cannot open blob: " + bp.string());
    blob.seekg(0, std::ios::end);
    uint64_t blob_size = static_cast<uint64_t>(blob.tellg());
    for (const ManifestTensor& e : cp.entries) {
        uint64_t bytes = static_cast<uint64_t>(e.rows) * static_cast<uint64_t>(e.cols) * sizeof(float);
        if (e.offset + bytes > blob_size)
            throw FormatError("tensor " + e.name + " extends past end of blob");
        blob.seekg(static_cast<std::streamoff>(e.offset));
        std::vector<float> buf(static_cast<size_t>(e.rows) * e.cols);
        blob.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
        if (!blob) throw FormatError("short read for tensor " + e.name);
        Tensor t(e.rows, e.cols);
        for (size_t i = 0; i < buf.size(); ++i) t.v[i] = static_cast<double>(buf[i]);
        cp.tensors.emplace(e.name, std::move(t));
    }
    return cp;
}

void save_lm_checkpoint(const MaskedLM& lm, const std::string& stem,
                        const std::vector<std::pair<std::string, std::string>>& extra_meta) {
    std::vector<std::pair<std::string, std::string>> meta;
    const LMConfig& c = lm.config;
    meta.emplace_back("config.d", std::to_string(c.d));
    meta.emplace_back("config.layers", std::to_string(c.layers));
    meta.emplace_back("config.heads", std::to_string(c.heads));
    meta.emplace_back("config.ffn_dim", std::to_string(c.ffn_dim));
    meta.emplace_back("config.vocab_size", std::to_string(c.vocab_size));
    meta.emplace_back("config.max_len", std::to_string(c.max_len));
    meta.emplace_back("config.seed", std::to_string(c.seed));
    meta.emplace_back("config.tied_output", c.tied_output ? "1" : "0");
    meta.emplace_back("vocab.mask_id", std::to_string(lm.vocab.mask_id));
    meta.emplace_back("vocab.pad_id", std::to_string(lm.vocab.pad_id));
    for (int i = 0; i < lm.vocab.size(); ++i) {
        const std::string& tok = lm.vocab.token(i);
        if (tok.find_first_of(" \t\n\r") != std::string::npos)
            throw InternalError("vocabulary token contains whitespace: " + tok);
        meta.emplace_back("vocab.token." + std::to_string(i), tok);
    }
    for (const auto& kv : extra_meta) meta.push_back(kv);
    write_checkpoint(stem, "lm", meta, lm.parameters());
}

MaskedLM load_lm_checkpoint(const std::string& stem) {
    Checkpoint cp = read_checkpoint(stem);
    if (cp.kind != "lm") throw FormatError("checkpoint is not an lm checkpoint");
    LMConfig c;
    c.d = parse_int(cp.meta_value("config.d"), "config.d");
    c.layers = parse_int(cp.meta_value("config.layers"), "config.layers");
    c.heads = parse_int(cp.meta_value("config.heads"), "config.heads");
    c.ffn_dim = parse_int(cp.meta_value("config.ffn_dim"), "config.ffn_dim");
    c.vocab_size = parse_int(cp.meta_value("config.vocab_size"), "config.vocab_size");
    c.max_len = parse_int(cp.meta_value("config.max_len"), "config.max_len");
    c.seed = parse_u64(cp.meta_value("config.seed"), "config.seed");
    c.tied_output = cp.meta_value("config.tied_output") == "1";

    std::vector<std::string> words;
    words.reserve(static_cast<size_t>(c.vocab_size));
    for (int i = 2; i < c.vocab_size; ++i) words.push_back(cp.meta_value("vocab.token." + std::to_string(i)));
    Vocabulary vocab = Vocabulary::build(words);
    if (parse_int(cp.meta_value("vocab.mask_id"), "vocab.mask_id") != vocab.mask_id ||
        parse_int(cp.meta_value("vocab.pad_id"), "vocab.pad_id") != vocab.pad_id)
        throw FormatError("checkpoint vocabulary ids are inconsistent");

    MaskedLM lm = init_masked_lm(c, std::move(vocab));
    for (auto& [name, t] : lm.parameters()) {
        const Tensor& loaded = cp.tensor(name);
        if (!t->same_shape(loaded))
            throw FormatError("checkpoint tensor " + name + " has unexpected shape");
        *t = loaded;
    }
    lm.validate_finite();
    return lm;
}

}  // namespace softmix
