#include "prunerec/recdata.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "prunerec/errors.hpp"
#include "prunerec/rng.hpp"

namespace prunerec {

namespace {

// cluster c owns items [c*n/k, (c+1)*n/k)
int cluster_of(int item, int n_items, int n_clusters) {
    return static_cast<int>(static_cast<std::int64_t>(item) * n_clusters / n_items);
}

std::pair<int, int> cluster_range(int c, int n_items, int n_clusters) {
    const int lo = static_cast<int>(static_cast<std::int64_t>(c) * n_items / n_clusters);
    const int hi = static_cast<int>(static_cast<std::int64_t>(c + 1) * n_items / n_clusters);
    return {lo, hi};
}

std::string pair_key(const SequenceRecord& s) {
    std::string key;
    for (int it : s.history) {
        key += std::to_string(it);
        key += ',';
    }
    key += '>';
    key += std::to_string(s.target);
    return key;
}

void assign_splits(RecDataset& ds) {
    // sequences are kept sorted by timestamp; 8:1:1 by position
    const int n = static_cast<int>(ds.sequences.size());
    const int n_train = n * 8 / 10;
    const int n_valid = (n * 9 / 10) - n_train;
    ds.train_idx.clear();
    ds.valid_idx.clear();
    ds.test_idx.clear();
    for (int i = 0; i < n; ++i) {
        if (i < n_train)
            ds.train_idx.push_back(i);
        else if (i < n_train + n_valid)
            ds.valid_idx.push_back(i);
        else
            ds.test_idx.push_back(i);
    }
}

// Drops valid/test sequences whose (history, target) pair exactly matches a
// train pair. With realistic history lengths this removes nothing, but it
// makes the no-leakage invariant unconditional.
void drop_leaked(RecDataset& ds) {
    const int n = static_cast<int>(ds.sequences.size());
    const int n_train = n * 8 / 10;
    std::unordered_set<std::string> train_pairs;
    for (int i = 0; i < n_train; ++i) train_pairs.insert(pair_key(ds.sequences[i]));
    std::vector<SequenceRecord> kept;
    kept.reserve(ds.sequences.size());
    for (int i = 0; i < n; ++i) {
        if (i >= n_train && train_pairs.count(pair_key(ds.sequences[i]))) continue;
        kept.push_back(std::move(ds.sequences[i]));
    }
    ds.sequences = std::move(kept);
}

}  // namespace

RecDataset generate(const GeneratorConfig& config) {
    if (config.n_items < 1 || config.n_users < 1 || config.n_clusters < 1 ||
        config.h_max < 1 || config.walk_len < 2)
        throw ContractError("generator config: counts out of range");
    if (config.n_clusters > config.n_items)
        throw ContractError("generator config: n_clusters " +
                            std::to_string(config.n_clusters) + " exceeds n_items " +
                            std::to_string(config.n_items));
    if (config.within_cluster_prob <= 0.0 || config.within_cluster_prob > 1.0)
        throw ContractError("generator config: within_cluster_prob must lie in (0, 1]");

    RecDataset ds;
    ds.n_items = config.n_items;
    ds.h_max = config.h_max;
    ds.gen = config;
    Rng rng(config.seed);

    for (int u = 0; u < config.n_users; ++u) {
        std::vector<int> walk;
        walk.reserve(static_cast<std::size_t>(config.walk_len));
        walk.push_back(static_cast<int>(rng.uniform_index(config.n_items)));
        for (int t = 1; t < config.walk_len; ++t) {
            int next;
            if (rng.uniform() < config.within_cluster_prob) {
                const int c = cluster_of(walk.back(), config.n_items, config.n_clusters);
                const auto [lo, hi] = cluster_range(c, config.n_items, config.n_clusters);
                next = lo + static_cast<int>(rng.uniform_index(hi - lo));
            } else {
                next = static_cast<int>(rng.uniform_index(config.n_items));
            }
            walk.push_back(next);
        }
        for (int t = 1; t < config.walk_len; ++t) {
            SequenceRecord rec;
            const int start = std::max(0, t - config.h_max);
            rec.history.assign(walk.begin() + start, walk.begin() + t);
            rec.target = walk[t];
            // round-robin timestamps interleave users so every user's early
            // windows land in train and late windows in valid/test
            rec.timestamp = static_cast<std::int64_t>(t) * config.n_users + u;
            ds.sequences.push_back(std::move(rec));
        }
    }
    std::sort(ds.sequences.begin(), ds.sequences.end(),
              [](const SequenceRecord& a, const SequenceRecord& b) {
                  return a.timestamp < b.timestamp;
              });
    drop_leaked(ds);
    assign_splits(ds);
    return ds;
}

Encoded encode(const RecDataset& dataset, int sequence_index) {
    if (sequence_index < 0 ||
        sequence_index >= static_cast<int>(dataset.sequences.size()))
        throw IndexError("encode: sequence index " + std::to_string(sequence_index) +
                         " out of range");
    const SequenceRecord& rec = dataset.sequences[sequence_index];
    Encoded enc;
    enc.tokens.push_back(dataset.bos_token());
    for (int item : rec.history) enc.tokens.push_back(dataset.item_token(item));
    enc.tokens.push_back(dataset.sep_token());
    enc.target_token = dataset.item_token(rec.target);
    enc.loss_position = static_cast<int>(enc.tokens.size()) - 1;
    return enc;
}

std::vector<int> full_token_sequence(const RecDataset& dataset, int sequence_index) {
    Encoded enc = encode(dataset, sequence_index);
    enc.tokens.push_back(enc.target_token);
    return enc.tokens;
}

std::vector<Batch> batches(const RecDataset& dataset, Split split, int batch_size,
                           std::uint64_t seed) {
    if (batch_size < 1) throw ContractError("batches: batch_size must be >= 1");
    std::vector<int> order = dataset.split_indices(split);
    if (order.empty()) throw ContractError("batches: empty split");
    if (split == Split::Train) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        Batch batch;
        std::size_t max_len = 0;
        std::vector<Encoded> encs;
        for (std::size_t i = start; i < end; ++i) {
            encs.push_back(encode(dataset, order[i]));
            max_len = std::max(max_len, encs.back().tokens.size());
        }
        for (const Encoded& enc : encs) {
            std::vector<int> input = enc.tokens;
            std::vector<int> targets;
            std::vector<int> mask;
            for (std::size_t p = 0; p + 1 < enc.tokens.size(); ++p) {
                targets.push_back(enc.tokens[p + 1]);
                mask.push_back(1);
            }
            targets.push_back(enc.target_token);  // SEP position predicts the target
            mask.push_back(1);
            while (input.size() < max_len) {
                input.push_back(dataset.pad_token());
                targets.push_back(dataset.pad_token());
                mask.push_back(0);
            }
            batch.input_tokens.push_back(std::move(input));
            batch.target_tokens.push_back(std::move(targets));
            batch.loss_mask.push_back(std::move(mask));
        }
        out.push_back(std::move(batch));
    }
    return out;
}

std::vector<int> sample_calibration_indices(const RecDataset& dataset, int b,
                                            std::uint64_t seed) {
    if (b < 1) throw ContractError("calibration: B must be >= 1");
    if (b > static_cast<int>(dataset.train_idx.size()))
        throw ContractError("calibration: B " + std::to_string(b) +
                            " exceeds train split size " +
                            std::to_string(dataset.train_idx.size()));
    std::vector<int> pool = dataset.train_idx;
    Rng rng(seed);
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(b));
    return pool;
}

void save_dataset(const RecDataset& dataset, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    char prob[64];
    std::snprintf(prob, sizeof prob, "%.17g", dataset.gen.within_cluster_prob);
    out << "# prunerec-dataset v1\n";
    out << "# n_items=" << dataset.gen.n_items << " n_users=" << dataset.gen.n_users
        << " n_clusters=" << dataset.gen.n_clusters << " within_cluster_prob=" << prob
        << " h_max=" << dataset.gen.h_max << " walk_len=" << dataset.gen.walk_len
        << " seed=" << dataset.gen.seed << "\n";
    out << "# ratios=8:1:1\n";
    for (const auto& rec : dataset.sequences) {
        out << rec.timestamp << '\t';
        for (std::size_t i = 0; i < rec.history.size(); ++i) {
            if (i) out << ',';
            out << rec.history[i];
        }
        out << '\t' << rec.target << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

RecDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "# prunerec-dataset v1")
        throw IoError("bad dataset header in " + path);
    if (!std::getline(in, line) || line.rfind("# ", 0) != 0)
        throw IoError("missing dataset config line in " + path);

    RecDataset ds;
    {
        std::istringstream hdr(line.substr(2));
        std::string kv;
        while (hdr >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw IoError("malformed header token: " + kv);
            const std::string key = kv.substr(0, eq);
            const std::string val = kv.substr(eq + 1);
            if (key == "n_items")
                ds.gen.n_items = std::stoi(val);
            else if (key == "n_users")
                ds.gen.n_users = std::stoi(val);
            else if (key == "n_clusters")
                ds.gen.n_clusters = std::stoi(val);
            else if (key == "within_cluster_prob")
                ds.gen.within_cluster_prob = std::stod(val);
            else if (key == "h_max")
                ds.gen.h_max = std::stoi(val);
            else if (key == "walk_len")
                ds.gen.walk_len = std::stoi(val);
            else if (key == "seed")
                ds.gen.seed = std::stoull(val);
            else
                throw IoError("unknown dataset header key: " + key);
        }
    }
    if (!std::getline(in, line) || line != "# ratios=8:1:1")
        throw IoError("missing ratios line in " + path);
    ds.n_items = ds.gen.n_items;
    ds.h_max = ds.gen.h_max;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string ts, items, target;
        if (!std::getline(row, ts, '\t') || !std::getline(row, items, '\t') ||
            !std::getline(row, target, '\t'))
            throw IoError("malformed dataset row: " + line);
        SequenceRecord rec;
        rec.timestamp = std::stoll(ts);
        std::istringstream ilist(items);
        std::string item;
        while (std::getline(ilist, item, ',')) rec.history.push_back(std::stoi(item));
        rec.target = std::stoi(target);
        if (rec.history.empty() || static_cast<int>(rec.history.size()) > ds.h_max)
            throw IoError("history length out of range in row: " + line);
        ds.sequences.push_back(std::move(rec));
    }
    for (const auto& rec : ds.sequences) {
        if (rec.target < 0 || rec.target >= ds.n_items)
            throw IoError("item id out of range in " + path);
        for (int it : rec.history)
            if (it < 0 || it >= ds.n_items) throw IoError("item id out of range in " + path);
    }
    if (!std::is_sorted(ds.sequences.begin(), ds.sequences.end(),
                        [](const SequenceRecord& a, const SequenceRecord& b) {
                            return a.timestamp < b.timestamp;
                        }))
        throw IoError("dataset rows not in timestamp order in " + path);
    assign_splits(ds);
    return ds;
}

}  // namespace prunerec
