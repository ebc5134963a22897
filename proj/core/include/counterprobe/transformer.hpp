#pragma once

// Single-layer causal encoder trained to predict, per position, the k-hot set
// of symbols that may legally come next. Recognition thresholds the sigmoid
// outputs at 0.5 and demands an exact match with the ground truth at every
// position.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "counterprobe/corpus.hpp"
#include "counterprobe/probe_dataset.hpp"
#include "counterprobe/tensor.hpp"

namespace counterprobe::model {

enum class Positional { sinusoidal, learned };

struct TransformerConfig {
    int d_model = 32;
    int d_ffn = 64;
    int n_layers = 1;
    int n_heads = 4;
    int vocab = 2;
    int max_len = 50;
    float dropout = 0.0f;
    float lr = 5e-3f;
    float rmsprop_rho = 0.99f;
    int epochs = 25;
    int batch = 32;
    std::uint64_t seed = 0;
    Positional positional = Positional::sinusoidal;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

class TransformerModel {
public:
    explicit TransformerModel(TransformerConfig cfg);

    const TransformerConfig& config() const { return cfg_; }

    struct Output {
        nn::Tensor hidden;  // T x d_model, final encoder layer
        nn::Tensor probs;   // T x vocab, sigmoid outputs in (0,1)
    };
    // Throws on overlong sequences and out-of-range token ids.
    Output forward(std::span<const int> tokens, bool train = false, Rng* dropout_rng = nullptr);

    std::vector<nn::Tensor> parameters();
    std::vector<nn::NamedParam> named_parameters();

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

    // Positional rows used by the model (table truncated to max_len).
    const nn::Tensor& positional_table() const { return pos_; }

private:
    TransformerConfig cfg_;
    nn::Tensor embed_;  // vocab x d_model
    nn::Tensor pos_;    // max_len x d_model; a parameter only in learned mode
    struct Layer {
        nn::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        nn::Tensor w1, b1, w2, b2;
        nn::Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    };
    std::vector<Layer> layers_;
    nn::Tensor w_out_;  // vocab x d_model, applied transposed
    nn::Tensor b_out_;  // vocab
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;       // mean squared error over tokens and vocab
    double token_acc = 0.0;  // positions whose thresholded row matches exactly
    double seq_acc = 0.0;    // sequences recognized at every position
};

struct TrainLog {
    std::vector<EpochStats> epochs;
};

// Trains on the given sequence indices (all sequences when empty). The corpus
// must have labels attached. Deterministic given config.seed.
TrainLog train_lm(TransformerModel& model, const data::Corpus& corpus,
                  std::span<const std::size_t> indices = {});

// True iff thresholding probs at 0.5 reproduces the k-hot labels everywhere.
bool recognition_match(std::span<const float> probs, std::span<const std::uint8_t> labels);

bool recognize(TransformerModel& model, const lang::CounterMachine& machine,
               std::span<const int> tokens);

// Fraction of the given sequences recognized; labels must be attached.
double recognition_rate(TransformerModel& model, const data::Corpus& corpus,
                        std::span<const std::size_t> indices);

// Final-layer hidden states for every token, in corpus order, eval mode.
data::EmbeddingMatrix extract_embeddings(TransformerModel& model, const data::Corpus& corpus);

// Positional encoding rows arranged like extract_embeddings output; the
// position-only baseline for probing.
data::EmbeddingMatrix positional_matrix(const TransformerConfig& cfg, const data::Corpus& corpus);

std::string positional_name(Positional p);
Positional parse_positional(std::string_view name);

}  // namespace counterprobe::model
