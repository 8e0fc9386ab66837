#include "softmix/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "softmix/rng.hpp"

namespace softmix {

std::string split_regime_name(SplitRegime r) {
    return r == SplitRegime::random_80_10_10 ? "random_80_10_10" : "distinct_y";
}

SplitRegime split_regime_from_name(const std::string& name) {
    if (name == "random_80_10_10") return SplitRegime::random_80_10_10;
    if (name == "distinct_y") return SplitRegime::distinct_y;
    throw InputError("unknown split regime: " + name);
}

const std::vector<Triple>& Split::part(const std::string& name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    throw InputError("unknown split part: " + name);
}

std::vector<Triple> load_triples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open triples: " + path);
    std::vector<Triple> out;
    std::set<Triple> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        Triple t;
        if (!std::getline(ls, t.relation, '\t') || !std::getline(ls, t.x, '\t') ||
            !std::getline(ls, t.y))
            throw FormatError(path + ":" + std::to_string(lineno) +
                              ": expected relation<TAB>x<TAB>y");
        if (t.relation.empty() || t.x.empty() || t.y.empty())
            throw FormatError(path + ":" + std::to_string(lineno) + ": empty field");
        if (t.y.find('\t') != std::string::npos)
            throw FormatError(path + ":" + std::to_string(lineno) + ": too many fields");
        if (!seen.insert(t).second)
            throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate triple");
        out.push_back(std::move(t));
    }
    return out;
}

void write_triples(const std::vector<Triple>& triples, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path);
    for (const Triple& t : triples) out << t.relation << "\t" << t.x << "\t" << t.y << "\n";
}

std::vector<Triple> filter_single_token_y(const std::vector<Triple>& triples,
                                          const Vocabulary& vocab) {
    std::vector<Triple> out;
    for (const Triple& t : triples) {
        std::vector<std::string> toks = split_tokens(t.y);
        if (toks.size() == 1 && vocab.contains(toks[0])) out.push_back(t);
    }
    return out;
}

Split split_random(const std::vector<Triple>& triples, uint64_t seed) {
    if (triples.size() < 10) throw InputError("split_random: need at least 10 triples");
    std::vector<Triple> pool = triples;
    Rng rng(seed ^ 0x5b117);
    rng.shuffle(pool);
    size_t n = pool.size();
    size_t n_train = static_cast<size_t>(0.8 * static_cast<double>(n));
    size_t n_dev = static_cast<size_t>(0.1 * static_cast<double>(n));
    Split s;
    s.regime = SplitRegime::random_80_10_10;
    s.train.assign(pool.begin(), pool.begin() + static_cast<long>(n_train));
    s.dev.assign(pool.begin() + static_cast<long>(n_train),
                 pool.begin() + static_cast<long>(n_train + n_dev));
    s.test.assign(pool.begin() + static_cast<long>(n_train + n_dev), pool.end());
    return s;
}

namespace {

// Greedy mass packing of y-groups into train/dev/test chasing 80-10-10.
// Groups are placed largest-first into the bin with the largest remaining
// deficit; bins that would otherwise stay empty get priority at the end.
void pack_distinct_y(const std::vector<Triple>& triples, Rng& rng, Split& out) {
    std::map<std::string, std::vector<Triple>> by_y;
    for (const Triple& t : triples) by_y[t.y].push_back(t);
    if (by_y.size() < 3) throw InputError("split_distinct_y: need at least 3 distinct y values");

    std::vector<std::string> ys;
    ys.reserve(by_y.size());
    for (auto& [y, g] : by_y) ys.push_back(y);
    rng.shuffle(ys);  // seeded tie-breaking among equal-sized groups
    std::stable_sort(ys.begin(), ys.end(), [&](const std::string& a, const std::string& b) {
        return by_y[a].size() > by_y[b].size();
    });

    const double targets[3] = {0.8, 0.1, 0.1};
    double total = static_cast<double>(triples.size());
    double mass[3] = {0, 0, 0};
    bool used[3] = {false, false, false};
    size_t unused = 3;
    std::vector<std::vector<Triple>*> bins = {&out.train, &out.dev, &out.test};
    for (size_t gi = 0; gi < ys.size(); ++gi) {
        size_t remaining = ys.size() - gi;
        int best = -1;
        double best_deficit = -1e300;
        for (int b = 0; b < 3; ++b) {
            if (remaining <= unused && used[b]) continue;
            double deficit = targets[b] * total - mass[b];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = b;
            }
        }
        auto& grp = by_y[ys[gi]];
        if (!used[best]) {
            used[best] = true;
            --unused;
        }
        for (const Triple& t : grp) bins[static_cast<size_t>(best)]->push_back(t);
        mass[best] += static_cast<double>(grp.size());
    }
}

}  // namespace

Split split_distinct_y(const std::vector<Triple>& triples, uint64_t seed) {
    std::map<std::string, std::vector<Triple>> by_relation;
    for (const Triple& t : triples) by_relation[t.relation].push_back(t);
    Split s;
    s.regime = SplitRegime::distinct_y;
    Rng rng(seed ^ 0xd157);
    for (auto& [rel, group] : by_relation) {
        Rng sub = rng.fork(fnv1a64(rel));
        pack_distinct_y(group, sub, s);
    }
    return s;
}

void write_split(const Split& split, uint64_t seed, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::filesystem::path d(dir);
    write_triples(split.train, (d / "train.tsv").string());
    write_triples(split.dev, (d / "dev.tsv").string());
    write_triples(split.test, (d / "test.tsv").string());
    std::ofstream meta(d / "split_meta.txt", std::ios::trunc);
    meta << "regime " << split_regime_name(split.regime) << "\n";
    meta << "seed " << seed << "\n";
    meta << "n_train " << split.train.size() << "\n";
    meta << "n_dev " << split.dev.size() << "\n";
    meta << "n_test " << split.test.size() << "\n";
}

Split load_split(const std::string& dir) {
    std::filesystem::path d(dir);
    Split s;
    s.train = load_triples((d / "train.tsv").string());
    s.dev = load_triples((d / "dev.tsv").string());
    s.test = load_triples((d / "test.tsv").string());
    std::ifstream meta(d / "split_meta.txt");
    if (!meta) throw InputError("cannot open split metadata in " + dir);
    std::string key, value;
    while (meta >> key >> value)
        if (key == "regime") s.regime = split_regime_from_name(value);
    return s;
}

}  // namespace softmix
