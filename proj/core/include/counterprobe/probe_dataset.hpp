#pragma once

// Token-level probing datasets: (embedding, depth class) records built from a
// labeled corpus and a per-token embedding matrix, with control-label
// randomization and the CPRB binary format.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "counterprobe/corpus.hpp"

namespace counterprobe::data {

// Row-major float matrix; rows follow corpus order (sample 0 token 0, ...).
struct EmbeddingMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    std::span<const float> row(int r) const {
        return std::span<const float>(values).subspan(static_cast<std::size_t>(r) * cols,
                                                      static_cast<std::size_t>(cols));
    }
};

enum class ControlMode {
    per_record,      // each record gets an independent uniform label
    per_token_type,  // each token id gets one fixed random label
};

// One split of token records. Embeddings are shared with the other split via
// the matrix; records address rows of it.
struct ProbeSplit {
    std::vector<std::uint32_t> row_index;  // into EmbeddingMatrix
    std::vector<int> labels;               // depth classes, < num_classes
    std::vector<int> token_ids;            // kept for per-token-type controls

    std::size_t size() const { return labels.size(); }
};

struct ProbeDataset {
    std::string language;
    int stack = 0;  // counter index, 0-based
    int num_classes = 0;
    bool control = false;
    std::uint64_t seed = 0;
    std::shared_ptr<const EmbeddingMatrix> embeddings;
    ProbeSplit train;
    ProbeSplit val;
    // Validation records whose depth exceeds the training maximum are dropped,
    // not clamped; this counts them.
    std::size_t excluded_out_of_range = 0;
};

// Sequence-level split, then exploded to one record per token. num_classes is
// 1 + the maximum depth seen in the training split.
ProbeDataset build_probe_dataset(std::shared_ptr<const EmbeddingMatrix> embeddings,
                                 const Corpus& corpus, int stack, const SequenceSplit& split,
                                 std::uint64_t seed);
ProbeDataset build_probe_dataset(std::shared_ptr<const EmbeddingMatrix> embeddings,
                                 const Corpus& corpus, int stack, double split_ratio,
                                 std::uint64_t seed);

// Replaces every label (train and validation) with a seeded uniform draw over
// 0..D-1; embeddings untouched. Per-token-type mode assigns one random label
// per token id instead. Throws std::logic_error if already a control.
ProbeDataset randomize_controls(const ProbeDataset& dataset, std::uint64_t seed,
                                ControlMode mode = ControlMode::per_record);

// CPRB: magic "CPRB", u32 version, u32 record count, u32 d_model, u32 D, then
// per record d_model little-endian f32 values and one u16 label.
void save_probe_split(const std::filesystem::path& path, const ProbeDataset& dataset,
                      const ProbeSplit& split);
struct LoadedProbeSplit {
    int d_model = 0;
    int num_classes = 0;
    std::shared_ptr<EmbeddingMatrix> embeddings;  // dense copy, row i = record i
    ProbeSplit split;                             // token_ids empty (not stored)
};
LoadedProbeSplit load_probe_split(const std::filesystem::path& path);

}  // namespace counterprobe::data
