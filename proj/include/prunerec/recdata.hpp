#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace prunerec {

struct GeneratorConfig {
    int n_items = 500;
    int n_users = 300;
    int n_clusters = 20;
    double within_cluster_prob = 0.9;
    int h_max = 10;     // history cap per sequence
    int walk_len = 51;  // items per user walk; yields walk_len-1 sequences per user
    std::uint64_t seed = 42;
};

struct SequenceRecord {
    std::vector<int> history;  // item ids, length in [1, h_max]
    int target = 0;            // item id
    std::int64_t timestamp = 0;
};

enum class Split { Train, Valid, Test };

// Synthetic sequential-recommendation corpus with a chronological 8:1:1
// split. Token layout: items map to their own ids, then PAD, BOS, SEP.
struct RecDataset {
    int n_items = 0;
    int h_max = 0;
    GeneratorConfig gen;  // provenance, recorded in the file header
    std::vector<SequenceRecord> sequences;
    std::vector<int> train_idx, valid_idx, test_idx;

    int pad_token() const { return n_items; }
    int bos_token() const { return n_items + 1; }
    int sep_token() const { return n_items + 2; }
    int vocab_size() const { return n_items + 3; }
    int item_token(int item) const { return item; }

    const std::vector<int>& split_indices(Split s) const {
        return s == Split::Train ? train_idx : s == Split::Valid ? valid_idx : test_idx;
    }
};

struct Encoded {
    std::vector<int> tokens;  // [BOS, item tokens..., SEP]
    int target_token = 0;
    int loss_position = 0;  // position whose next-token prediction is the target
};

// Markov cluster-walk generator; deterministic per seed.
RecDataset generate(const GeneratorConfig& config);

Encoded encode(const RecDataset& dataset, int sequence_index);

// Input tokens plus the supervised target token appended; the form used for
// perplexity and training slices.
std::vector<int> full_token_sequence(const RecDataset& dataset, int sequence_index);

struct Batch {
    // all rows padded to the widest sequence in the batch
    std::vector<std::vector<int>> input_tokens;
    std::vector<std::vector<int>> target_tokens;  // next-token target per position
    std::vector<std::vector<int>> loss_mask;      // 1 = position contributes to loss
};

// Seeded shuffle for the train split; valid/test preserve dataset order.
std::vector<Batch> batches(const RecDataset& dataset, Split split, int batch_size,
                           std::uint64_t seed);

// Calibration draw: B distinct train sequences, seeded-uniform.
std::vector<int> sample_calibration_indices(const RecDataset& dataset, int b,
                                            std::uint64_t seed);

void save_dataset(const RecDataset& dataset, const std::string& path);
RecDataset load_dataset(const std::string& path);

}  // namespace prunerec
