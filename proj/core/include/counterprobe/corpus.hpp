#pragma once

// Training corpora: sampled member strings with per-token valid-next-symbol
// labels and counter depth traces, plus the line-delimited JSON file format.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "counterprobe/lang.hpp"

namespace counterprobe::data {

class CorpusFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonMemberError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Sample {
    std::vector<lang::TokenId> tokens;
    // k-hot rows, T x |alphabet|, row-major; row t marks the symbols that may
    // legally follow the prefix of length t+1. Empty until labels are attached.
    std::vector<std::uint8_t> labels;
    lang::DepthTrace depths;

    int length() const { return static_cast<int>(tokens.size()); }
    bool labeled() const { return !labels.empty(); }
};

struct Corpus {
    std::string language;
    std::uint64_t seed = 0;
    std::vector<Sample> samples;

    std::size_t total_tokens() const {
        std::size_t n = 0;
        for (const auto& s : samples) n += s.tokens.size();
        return n;
    }
};

struct LengthRange {
    int min_len = 2;
    int max_len = 50;
};

// n member strings. Per sample: draw an even target length L uniformly from
// the range, then walk, opening a uniformly chosen pair with probability
// max(0, (L - t - sum(counters)) / (2 (L - t))) — forced open when all
// counters are zero, forced close when the remaining budget equals the open
// count — else closing a uniformly chosen non-empty pair. Sample i draws from
// a generator seeded with mix64(seed, i), so results do not depend on how
// generation work is scheduled.
Corpus sample_corpus(const lang::CounterMachine& machine, int n, LengthRange range,
                     std::uint64_t seed);

// Fills labels and depth traces. Throws NonMemberError if a sequence is not
// accepted by the machine.
Corpus attach_labels(const lang::CounterMachine& machine, Corpus corpus);

// Sequence-level train/validation split: indices shuffled by seed, first
// floor(ratio * n) are training.
struct SequenceSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};
SequenceSplit split_sequences(std::size_t n, double ratio, std::uint64_t seed);

// Line-delimited JSON, UTF-8: a header record followed by one record per
// sequence: {"tokens": "...", "labels": [[...]], "depths": [[...]]}.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace counterprobe::data
