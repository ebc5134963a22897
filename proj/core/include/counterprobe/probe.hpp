#pragma once

// Probing classifiers: small feed-forward networks trained on frozen
// per-token embeddings to predict counter depths, evaluated against
// randomized-label controls. Selectivity = task accuracy - control accuracy.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "counterprobe/probe_dataset.hpp"
#include "counterprobe/tensor.hpp"

namespace counterprobe::probe {

struct ProbeArch {
    int hidden_layers = 0;  // 0 = linear
    int hidden_width = 128;
    float dropout = 0.2f;
};

struct ProbeTrainConfig {
    int epochs = 10;
    float lr = 1e-3f;
    int batch = 32;
};

// MLP over embeddings: input -> (width, relu, dropout) x layers -> classes.
class ProbeClassifier {
public:
    ProbeClassifier(int input_dim, int classes, ProbeArch arch, std::uint64_t seed);

    nn::Tensor forward(const nn::Tensor& x, bool train, Rng* dropout_rng);
    std::vector<nn::Tensor> parameters();

    int input_dim() const { return input_dim_; }
    int classes() const { return classes_; }
    const ProbeArch& arch() const { return arch_; }

private:
    int input_dim_, classes_;
    ProbeArch arch_;
    std::vector<nn::Tensor> weights_, biases_;
};

// Same stack with a single linear output, trained with mean squared error.
class ProbeRegressor {
public:
    ProbeRegressor(int input_dim, ProbeArch arch, std::uint64_t seed);
    nn::Tensor forward(const nn::Tensor& x, bool train, Rng* dropout_rng);
    std::vector<nn::Tensor> parameters();

private:
    int input_dim_;
    ProbeArch arch_;
    std::vector<nn::Tensor> weights_, biases_;
};

// Gathers split records row_index[i0..i1) into a batch tensor.
nn::Tensor gather_batch(const data::EmbeddingMatrix& embeddings,
                        std::span<const std::uint32_t> rows);

// 10 epochs of Adam on cross-entropy by default; returns per-epoch mean loss.
// Throws for fewer than two classes or an empty split.
std::vector<double> train_probe(ProbeClassifier& classifier, const data::EmbeddingMatrix& embeddings,
                                const data::ProbeSplit& split, int num_classes,
                                const ProbeTrainConfig& cfg, std::uint64_t seed);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::vector<int>> confusion;  // [true][predicted]
};

// Argmax prediction, ties toward the lower class index.
EvalResult evaluate(ProbeClassifier& classifier, const data::EmbeddingMatrix& embeddings,
                    const data::ProbeSplit& split);

std::vector<double> train_regressor(ProbeRegressor& reg, const data::EmbeddingMatrix& embeddings,
                                    const data::ProbeSplit& split, const ProbeTrainConfig& cfg,
                                    std::uint64_t seed);

// Accuracy = fraction of predictions within +-0.5 of the label after rounding.
double evaluate_regressor(ProbeRegressor& reg, const data::EmbeddingMatrix& embeddings,
                          const data::ProbeSplit& split);

struct ProbeResult {
    std::string language;
    int stack = 0;  // 0-based
    int arch_layers = 0;
    double task_acc = 0.0;
    double control_acc = 0.0;
    double selectivity = 0.0;
    int num_classes = 0;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::uint64_t seed = 0;
    std::size_t excluded_out_of_range = 0;
    std::vector<std::vector<int>> confusion;  // task probe, validation split
    std::vector<double> task_losses;          // per epoch
    std::vector<double> control_losses;
};

struct SuiteConfig {
    std::vector<int> arch_layers = {0, 1, 2, 3, 4, 5, 6};
    int hidden_width = 128;
    float dropout = 0.2f;
    ProbeTrainConfig train;
    data::ControlMode control_mode = data::ControlMode::per_record;
    int workers = 0;  // 0 = hardware concurrency
};

// Task and control probes for every (stack, architecture) over shared
// embeddings. Jobs run in parallel; per-job seeds make the output independent
// of the worker count. Results are ordered (stack, arch list position).
std::vector<ProbeResult> run_suite(std::shared_ptr<const data::EmbeddingMatrix> embeddings,
                                   const data::Corpus& corpus, const data::SequenceSplit& split,
                                   const SuiteConfig& cfg, std::uint64_t seed);

}  // namespace counterprobe::probe
