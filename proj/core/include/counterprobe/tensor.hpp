#pragma once

// Minimal dense f32 tensors (rank 1 and 2) with reverse-mode automatic
// differentiation, plus the parameter initializers, optimizers, and the
// checkpoint format used by the models in this project.
//
// A Tensor is a cheap handle to a graph node. Ops record backward closures
// only while gradient mode is enabled and some input requires a gradient;
// NoGradGuard turns recording off for inference paths. A graph is confined
// to one thread; independent graphs may run concurrently.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "counterprobe/rng.hpp"

namespace counterprobe::nn {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Node {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated on first use
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // accumulates into parents' grads

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float v);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return rank() == 2 ? node_->shape.at(1) : 1; }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<float> data() { return node_->value; }
    std::span<const float> data() const { return node_->value; }
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }

    float item() const {
        if (numel() != 1) throw ShapeError("item() on tensor with numel != 1");
        return node_->value[0];
    }
    float at(int i, int j) const { return node_->value[static_cast<std::size_t>(i) * cols() + j]; }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }

    std::shared_ptr<Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;
    friend Tensor wrap_node(std::shared_ptr<Node> n);
};

Tensor wrap_node(std::shared_ptr<Node> n);

// ---- gradient mode ----

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, float s);
Tensor add_rowvec(const Tensor& a, const Tensor& bias);  // bias shape {cols}
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Rows of softmax(a + mask). Mask entries are 0 (keep) or -inf (drop); no
// gradient flows through the mask and dropped positions get output 0 and
// gradient exactly 0. A mask may be shared across calls.
Tensor softmax_masked(const Tensor& a, const Tensor& mask);
Tensor causal_mask(int t);  // {t,t}, 0 on j<=i, -inf above the diagonal

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Training mode samples a keep mask from rng and scales by 1/(1-rate);
// eval mode (train == false) or rate == 0 is the identity.
Tensor dropout(const Tensor& a, float rate, bool train, Rng& rng);

Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor row_slice(const Tensor& a, int r0, int r1);
Tensor col_slice(const Tensor& a, int c0, int c1);
Tensor concat_cols(std::span<const Tensor> parts);

// Scalar losses.
Tensor squared_error_sum(const Tensor& pred, std::span<const float> target);
Tensor mse_loss(const Tensor& pred, std::span<const float> target);
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> labels);
Tensor sum(const Tensor& a);

// Reverse-mode sweep from a scalar; accumulates into .grad of everything
// reachable, gradients summing over multiple uses.
void backward(const Tensor& loss);

// ---- initializers ----

// Uniform in ±sqrt(6 / (fan_in + fan_out)); fans default to the shape dims.
Tensor xavier_uniform(std::vector<int> shape, Rng& rng, int fan_in = -1, int fan_out = -1);

// Fixed absolute positional table: row t holds interleaved
// sin(t / 10000^(2i/d)), cos(t / 10000^(2i/d)).
Tensor sinusoidal_positions(int max_len, int d_model);

// ---- optimizers ----

class Optimizer {
public:
    virtual ~Optimizer() = default;
    explicit Optimizer(std::vector<Tensor> params) : params_(std::move(params)) {}
    virtual void step() = 0;
    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }
    const std::vector<Tensor>& params() const { return params_; }

protected:
    std::vector<Tensor> params_;
};

// acc = rho * acc + (1 - rho) * g^2 ; p -= lr * g / sqrt(acc + eps)
class RmsProp : public Optimizer {
public:
    RmsProp(std::vector<Tensor> params, float lr, float rho = 0.99f, float eps = 1e-8f);
    void step() override;

private:
    float lr_, rho_, eps_;
    std::vector<std::vector<float>> acc_;
};

// Bias-corrected Adam.
class Adam : public Optimizer {
public:
    Adam(std::vector<Tensor> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
         float eps = 1e-8f);
    void step() override;

private:
    float lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// ---- checkpoints ----
// CPWT: magic "CPWT", u32 version, u32 count, then per parameter:
// u32 name length, name bytes, u32 ndim, u32 dims..., f32 payload. Little-endian.

struct NamedParam {
    std::string name;
    Tensor tensor;
};

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedParam> params);

// Shapes of the given params must match the file; values are overwritten.
void load_checkpoint(const std::filesystem::path& path, std::span<NamedParam> params);

}  // namespace counterprobe::nn
