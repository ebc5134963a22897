#include "counterprobe/probe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace counterprobe::probe {

using data::EmbeddingMatrix;
using data::ProbeSplit;
using nn::Tensor;

namespace {

std::vector<Tensor> init_mlp(int input_dim, int output_dim, const ProbeArch& arch,
                             std::uint64_t seed, std::vector<Tensor>& weights,
                             std::vector<Tensor>& biases) {
    Rng rng(mix64(seed, 0x70726f6265ULL));  // "probe"
    weights.clear();
    biases.clear();
    int in = input_dim;
    for (int l = 0; l < arch.hidden_layers; ++l) {
        weights.push_back(nn::xavier_uniform({in, arch.hidden_width}, rng));
        biases.push_back(Tensor::zeros({arch.hidden_width}, true));
        in = arch.hidden_width;
    }
    weights.push_back(nn::xavier_uniform({in, output_dim}, rng));
    biases.push_back(Tensor::zeros({output_dim}, true));
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        params.push_back(weights[i]);
        params.push_back(biases[i]);
    }
    return params;
}

Tensor mlp_forward(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                   const ProbeArch& arch, const Tensor& x, bool train, Rng* dropout_rng) {
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < weights.size(); ++l) {
        h = nn::relu(nn::add_rowvec(nn::matmul(h, weights[l]), biases[l]));
        if (train && arch.dropout > 0.0f) {
            if (dropout_rng == nullptr)
                throw std::invalid_argument("probe forward: dropout requires an rng");
            h = nn::dropout(h, arch.dropout, true, *dropout_rng);
        }
    }
    return nn::add_rowvec(nn::matmul(h, weights.back()), biases.back());
}

}  // namespace

ProbeClassifier::ProbeClassifier(int input_dim, int classes, ProbeArch arch, std::uint64_t seed)
    : input_dim_(input_dim), classes_(classes), arch_(arch) {
    if (classes_ < 2)
        throw std::invalid_argument(
            "degenerate dataset: fewer than two classes; any classifier is trivially perfect");
    init_mlp(input_dim_, classes_, arch_, seed, weights_, biases_);
}

nn::Tensor ProbeClassifier::forward(const Tensor& x, bool train, Rng* dropout_rng) {
    return mlp_forward(weights_, biases_, arch_, x, train, dropout_rng);
}

std::vector<Tensor> ProbeClassifier::parameters() {
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        params.push_back(weights_[i]);
        params.push_back(biases_[i]);
    }
    return params;
}

ProbeRegressor::ProbeRegressor(int input_dim, ProbeArch arch, std::uint64_t seed)
    : input_dim_(input_dim), arch_(arch) {
    init_mlp(input_dim_, 1, arch_, seed, weights_, biases_);
}

nn::Tensor ProbeRegressor::forward(const Tensor& x, bool train, Rng* dropout_rng) {
    return mlp_forward(weights_, biases_, arch_, x, train, dropout_rng);
}

std::vector<Tensor> ProbeRegressor::parameters() {
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        params.push_back(weights_[i]);
        params.push_back(biases_[i]);
    }
    return params;
}

nn::Tensor gather_batch(const EmbeddingMatrix& embeddings, std::span<const std::uint32_t> rows) {
    const int d = embeddings.cols;
    std::vector<float> buf;
    buf.reserve(rows.size() * static_cast<std::size_t>(d));
    for (std::uint32_t r : rows) {
        const auto row = embeddings.row(static_cast<int>(r));
        buf.insert(buf.end(), row.begin(), row.end());
    }
    return Tensor::from_data({static_cast<int>(rows.size()), d}, std::move(buf));
}

namespace {

template <typename Model, typename LossFn>
std::vector<double> train_loop(Model& model, const EmbeddingMatrix& embeddings,
                               const ProbeSplit& split, const ProbeTrainConfig& cfg,
                               std::uint64_t seed, LossFn&& loss_fn) {
    if (split.size() == 0) throw std::invalid_argument("probe training: empty split");
    nn::Adam opt(model.parameters(), cfg.lr);
    Rng dropout_rng(mix64(seed, 0x64726f70ULL));  // "drop"
    std::vector<double> epoch_losses;
    std::vector<std::size_t> order(split.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng(mix64(seed, 0x6f726465ULL, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[order_rng.below(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        std::vector<std::uint32_t> rows;
        std::vector<int> labels;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
            rows.clear();
            labels.clear();
            for (std::size_t i = b0; i < b1; ++i) {
                rows.push_back(split.row_index[order[i]]);
                labels.push_back(split.labels[order[i]]);
            }
            const Tensor x = gather_batch(embeddings, rows);
            const Tensor logits = model.forward(x, true, &dropout_rng);
            const Tensor loss = loss_fn(logits, labels);
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }
    return epoch_losses;
}

}  // namespace

std::vector<double> train_probe(ProbeClassifier& classifier, const EmbeddingMatrix& embeddings,
                                const ProbeSplit& split, int num_classes,
                                const ProbeTrainConfig& cfg, std::uint64_t seed) {
    if (num_classes < 2)
        throw std::invalid_argument(
            "degenerate dataset: fewer than two classes; any classifier is trivially perfect");
    if (num_classes != classifier.classes())
        throw std::invalid_argument("train_probe: classifier/dataset class count mismatch");
    return train_loop(classifier, embeddings, split, cfg, seed,
                      [](const Tensor& logits, const std::vector<int>& labels) {
                          return nn::cross_entropy_mean(logits, labels);
                      });
}

EvalResult evaluate(ProbeClassifier& classifier, const EmbeddingMatrix& embeddings,
                    const ProbeSplit& split) {
    if (embeddings.cols != classifier.input_dim())
        throw std::invalid_argument("evaluate: embedding dimension mismatch");
    nn::NoGradGuard guard;
    const int d_classes = classifier.classes();
    EvalResult res;
    res.confusion.assign(static_cast<std::size_t>(d_classes),
                         std::vector<int>(static_cast<std::size_t>(d_classes), 0));
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t b0 = 0; b0 < split.size(); b0 += kChunk) {
        const std::size_t b1 = std::min(split.size(), b0 + kChunk);
        const Tensor x = gather_batch(
            embeddings, std::span<const std::uint32_t>(split.row_index).subspan(b0, b1 - b0));
        const Tensor logits = classifier.forward(x, false, nullptr);
        const auto lv = logits.data();
        for (std::size_t i = 0; i < b1 - b0; ++i) {
            const float* row = lv.data() + i * static_cast<std::size_t>(d_classes);
            int best = 0;
            for (int j = 1; j < d_classes; ++j)
                if (row[j] > row[best]) best = j;  // ties keep the lower index
            const int truth = split.labels[b0 + i];
            res.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(best)] += 1;
            if (best == truth) ++correct;
        }
    }
    res.accuracy = split.size() == 0
                       ? 0.0
                       : static_cast<double>(correct) / static_cast<double>(split.size());
    return res;
}

std::vector<double> train_regressor(ProbeRegressor& reg, const EmbeddingMatrix& embeddings,
                                    const ProbeSplit& split, const ProbeTrainConfig& cfg,
                                    std::uint64_t seed) {
    return train_loop(reg, embeddings, split, cfg, seed,
                      [](const Tensor& pred, const std::vector<int>& labels) {
                          std::vector<float> targets(labels.begin(), labels.end());
                          return nn::mse_loss(pred, targets);
                      });
}

double evaluate_regressor(ProbeRegressor& reg, const EmbeddingMatrix& embeddings,
                          const ProbeSplit& split) {
    nn::NoGradGuard guard;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t b0 = 0; b0 < split.size(); b0 += kChunk) {
        const std::size_t b1 = std::min(split.size(), b0 + kChunk);
        const Tensor x = gather_batch(
            embeddings, std::span<const std::uint32_t>(split.row_index).subspan(b0, b1 - b0));
        const Tensor pred = reg.forward(x, false, nullptr);
        const auto pv = pred.data();
        for (std::size_t i = 0; i < b1 - b0; ++i)
            if (static_cast<int>(std::lround(pv[i])) == split.labels[b0 + i]) ++correct;
    }
    return split.size() == 0 ? 0.0
                             : static_cast<double>(correct) / static_cast<double>(split.size());
}

std::vector<ProbeResult> run_suite(std::shared_ptr<const EmbeddingMatrix> embeddings,
                                   const data::Corpus& corpus, const data::SequenceSplit& split,
                                   const SuiteConfig& cfg, std::uint64_t seed) {
    if (corpus.samples.empty()) throw std::invalid_argument("run_suite: empty corpus");
    const int stacks = corpus.samples.front().depths.k;
    if (stacks == 0) throw std::invalid_argument("run_suite: corpus has no depth traces");

    // Task dataset plus its control twin, once per stack; shared read-only by jobs.
    std::vector<data::ProbeDataset> task_ds, control_ds;
    for (int s = 0; s < stacks; ++s) {
        task_ds.push_back(data::build_probe_dataset(embeddings, corpus, s, split,
                                                    mix64(seed, 0x64617461ULL, s)));
        control_ds.push_back(
            data::randomize_controls(task_ds.back(), mix64(seed, 0x6374726cULL, s),
                                     cfg.control_mode));
    }

    struct Job {
        int stack;
        int arch_pos;
    };
    std::vector<Job> jobs;
    for (int s = 0; s < stacks; ++s)
        for (std::size_t a = 0; a < cfg.arch_layers.size(); ++a)
            jobs.push_back({s, static_cast<int>(a)});

    std::vector<ProbeResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            const Job job = jobs[j];
            const int layers = cfg.arch_layers[static_cast<std::size_t>(job.arch_pos)];
            const ProbeArch arch{layers, cfg.hidden_width, cfg.dropout};
            const data::ProbeDataset& task = task_ds[static_cast<std::size_t>(job.stack)];
            const data::ProbeDataset& control = control_ds[static_cast<std::size_t>(job.stack)];
            const std::uint64_t job_seed =
                mix64(seed, static_cast<std::uint64_t>(job.stack),
                      static_cast<std::uint64_t>(layers));

            ProbeResult r;
            r.language = corpus.language;
            r.stack = job.stack;
            r.arch_layers = layers;
            r.num_classes = task.num_classes;
            r.n_train = task.train.size();
            r.n_val = task.val.size();
            r.seed = job_seed;
            r.excluded_out_of_range = task.excluded_out_of_range;

            ProbeClassifier task_probe(embeddings->cols, task.num_classes, arch,
                                       mix64(job_seed, 0));
            r.task_losses = train_probe(task_probe, *embeddings, task.train, task.num_classes,
                                        cfg.train, mix64(job_seed, 1));
            auto task_eval = evaluate(task_probe, *embeddings, task.val);
            r.task_acc = task_eval.accuracy;
            r.confusion = std::move(task_eval.confusion);

            ProbeClassifier control_probe(embeddings->cols, control.num_classes, arch,
                                          mix64(job_seed, 2));
            r.control_losses = train_probe(control_probe, *embeddings, control.train,
                                           control.num_classes, cfg.train, mix64(job_seed, 3));
            r.control_acc = evaluate(control_probe, *embeddings, control.val).accuracy;
            r.selectivity = r.task_acc - r.control_acc;

            results[static_cast<std::size_t>(job.stack) * cfg.arch_layers.size() +
                    static_cast<std::size_t>(job.arch_pos)] = std::move(r);
        }
    };

    int workers = cfg.workers > 0 ? cfg.workers
                                  : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return results;
}

}  // namespace counterprobe::probe
