#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <vector>

#include "counterprobe/ioutil.hpp"
#include "counterprobe/rng.hpp"
#include "counterprobe/tensor.hpp"

using namespace counterprobe;
using nn::Tensor;

namespace {

// ---- double-precision reference ops for the finite-difference oracle ----

using Md = std::vector<double>;

Md ref_matmul(const Md& a, const Md& b, int m, int p, int n) {
    Md c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < p; ++l)
            for (int j = 0; j < n; ++j)
                c[static_cast<std::size_t>(i) * n + j] +=
                    a[static_cast<std::size_t>(i) * p + l] * b[static_cast<std::size_t>(l) * n + j];
    return c;
}

Md ref_relu(const Md& a) {
    Md r = a;
    for (auto& v : r) v = v > 0 ? v : 0;
    return r;
}

Md ref_sigmoid(const Md& a) {
    Md r = a;
    for (auto& v : r) v = 1.0 / (1.0 + std::exp(-v));
    return r;
}

Md ref_add_rowvec(const Md& a, const Md& b, int m, int n) {
    Md r = a;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) r[static_cast<std::size_t>(i) * n + j] += b[static_cast<std::size_t>(j)];
    return r;
}

Md ref_softmax_causal(const Md& a, int t) {
    Md y(static_cast<std::size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i) {
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) mx = std::max(mx, a[static_cast<std::size_t>(i) * t + j]);
        double denom = 0;
        for (int j = 0; j <= i; ++j) denom += std::exp(a[static_cast<std::size_t>(i) * t + j] - mx);
        for (int j = 0; j <= i; ++j)
            y[static_cast<std::size_t>(i) * t + j] =
                std::exp(a[static_cast<std::size_t>(i) * t + j] - mx) / denom;
    }
    return y;
}

Md ref_layer_norm(const Md& a, const Md& g, const Md& b, int m, int n, double eps = 1e-5) {
    Md y(a.size());
    for (int i = 0; i < m; ++i) {
        double mean = 0;
        for (int j = 0; j < n; ++j) mean += a[static_cast<std::size_t>(i) * n + j];
        mean /= n;
        double var = 0;
        for (int j = 0; j < n; ++j) {
            const double d = a[static_cast<std::size_t>(i) * n + j] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j)
            y[static_cast<std::size_t>(i) * n + j] =
                g[static_cast<std::size_t>(j)] * (a[static_cast<std::size_t>(i) * n + j] - mean) * is +
                b[static_cast<std::size_t>(j)];
    }
    return y;
}

double ref_dot(const Md& a, const Md& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double ref_sse(const Md& pred, const Md& target) {
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s;
}

double ref_ce_mean(const Md& logits, const std::vector<int>& labels, int m, int d) {
    double loss = 0;
    for (int i = 0; i < m; ++i) {
        double mx = -1e300;
        for (int j = 0; j < d; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(i) * d + j]);
        double denom = 0;
        for (int j = 0; j < d; ++j)
            denom += std::exp(logits[static_cast<std::size_t>(i) * d + j] - mx);
        loss += std::log(denom) -
                (logits[static_cast<std::size_t>(i) * d + labels[static_cast<std::size_t>(i)]] - mx);
    }
    return loss / m;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (float& v : t.data()) v = static_cast<float>(lo + (hi - lo) * rng.real01());
    return t;
}

Md to_double(const Tensor& t) {
    return Md(t.data().begin(), t.data().end());
}

// Central finite differences of a double-precision reference against the f32
// autodiff gradients. Entries where both are below 1e-6 count as agreeing.
struct GradCheck {
    double max_rel = 0.0;
    double p95_rel = 0.0;
};

GradCheck check_grads(std::vector<Tensor> inputs,
                      const std::function<double(const std::vector<Md>&)>& f_ref,
                      const Tensor& loss, double h = 1e-4) {
    nn::backward(loss);
    std::vector<Md> vals;
    vals.reserve(inputs.size());
    for (auto& t : inputs) vals.push_back(to_double(t));
    std::vector<double> rels;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        REQUIRE(inputs[i].grad().size() == inputs[i].numel());
        const auto g = inputs[i].grad();
        for (std::size_t j = 0; j < vals[i].size(); ++j) {
            const double orig = vals[i][j];
            vals[i][j] = orig + h;
            const double fp = f_ref(vals);
            vals[i][j] = orig - h;
            const double fm = f_ref(vals);
            vals[i][j] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double ad = g[j];
            const double denom = std::max(std::abs(fd), std::abs(ad));
            rels.push_back(denom < 1e-6 ? 0.0 : std::abs(fd - ad) / denom);
        }
    }
    std::sort(rels.begin(), rels.end());
    GradCheck r;
    r.max_rel = rels.back();
    r.p95_rel = rels[static_cast<std::size_t>(0.95 * static_cast<double>(rels.size() - 1))];
    return r;
}

}  // namespace

TEST_CASE("elementwise op values") {
    const Tensor x = Tensor::from_data({1, 2}, {-1.0f, 2.0f});
    CHECK(nn::relu(x).data()[0] == 0.0f);
    CHECK(nn::relu(x).data()[1] == 2.0f);

    // masked position gets probability exactly 0
    const Tensor scores = Tensor::from_data({1, 2}, {0.0f, 0.0f});
    const Tensor mask =
        Tensor::from_data({1, 2}, {0.0f, -std::numeric_limits<float>::infinity()});
    const Tensor soft = nn::softmax_masked(scores, mask);
    CHECK(soft.data()[0] == 1.0f);
    CHECK(soft.data()[1] == 0.0f);

    // layer norm of a constant row is zero before affine
    const Tensor c = Tensor::from_data({1, 4}, {3.0f, 3.0f, 3.0f, 3.0f});
    const Tensor g1 = Tensor::from_data({4}, {1, 1, 1, 1});
    const Tensor b0 = Tensor::zeros({4});
    for (float v : nn::layer_norm(c, g1, b0).data()) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("softmax rows sum to one, masked entries exactly zero") {
    Rng rng(11);
    for (int t : {1, 3, 7}) {
        const Tensor scores = random_tensor({t, t}, rng, false, -3, 3);
        const Tensor y = nn::softmax_masked(scores, nn::causal_mask(t));
        for (int i = 0; i < t; ++i) {
            double s = 0;
            for (int j = 0; j < t; ++j) {
                const float v = y.at(i, j);
                if (j > i) CHECK(v == 0.0f);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("gradient of a scalar product is the other factor") {
    const Tensor x = Tensor::from_data({1}, {3.0f}, true);
    const Tensor y = Tensor::from_data({1}, {-5.0f}, true);
    nn::backward(nn::mul(x, y));
    CHECK(x.grad()[0] == -5.0f);
    CHECK(y.grad()[0] == 3.0f);
}

TEST_CASE("gradients sum over multiple uses") {
    const Tensor x = Tensor::from_data({1}, {2.0f}, true);
    nn::backward(nn::add(x, x));
    CHECK(x.grad()[0] == 2.0f);
}

TEST_CASE("backward rejects non-scalar losses") {
    const Tensor x = Tensor::from_data({1, 2}, {1.0f, 2.0f}, true);
    CHECK_THROWS_AS(nn::backward(nn::relu(x)), nn::ShapeError);
}

TEST_CASE("masked attention logits receive exactly zero gradient") {
    const Tensor scores = Tensor::from_data({2, 2}, {0.3f, 0.9f, -0.2f, 0.4f}, true);
    const Tensor y = nn::softmax_masked(scores, nn::causal_mask(2));
    Rng rng(3);
    const Tensor r = random_tensor({2, 2}, rng, false);
    nn::backward(nn::sum(nn::mul(y, r)));
    CHECK(scores.grad()[1] == 0.0f);  // position (0,1) is above the diagonal
    CHECK(scores.grad()[0] == 0.0f);  // row 0 softmax over one element is constant
}

TEST_CASE("matmul gradients vs finite differences") {
    Rng rng(101);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 5}, rng);
    const Tensor r = random_tensor({3, 5}, rng, false);
    const Tensor loss = nn::sum(nn::mul(nn::matmul(a, b), r));
    const Md rd = to_double(r);
    auto f = [&](const std::vector<Md>& in) {
        return ref_dot(ref_matmul(in[0], in[1], 3, 4, 5), rd);
    };
    const auto res = check_grads({a, b}, f, loss);
    CHECK(res.max_rel < 1e-3);
}

TEST_CASE("elementwise and broadcast gradients vs finite differences") {
    Rng rng(102);
    const Tensor a = random_tensor({4, 6}, rng);
    const Tensor b = random_tensor({4, 6}, rng);
    const Tensor c = random_tensor({4, 6}, rng);
    const Tensor bias = random_tensor({6}, rng);
    const Tensor r = random_tensor({4, 6}, rng, false);
    // composite: (a*b - 0.7c + bias) . r
    const Tensor out = nn::add_rowvec(nn::sub(nn::mul(a, b), nn::scale(c, 0.7f)), bias);
    const Tensor loss = nn::sum(nn::mul(out, r));
    const Md rd = to_double(r);
    auto f = [&](const std::vector<Md>& in) {
        Md t(in[0].size());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = in[0][i] * in[1][i] - 0.7 * in[2][i];
        return ref_dot(ref_add_rowvec(t, in[3], 4, 6), rd);
    };
    const auto res = check_grads({a, b, c, bias}, f, loss);
    CHECK(res.max_rel < 1e-3);
}

TEST_CASE("activation gradients vs finite differences") {
    Rng rng(103);
    // keep relu inputs away from the kink
    Tensor a = Tensor::zeros({5, 5}, true);
    for (float& v : a.data()) {
        const double u = rng.real01();
        v = static_cast<float>(u < 0.5 ? -(0.2 + u) : (0.2 + u));
    }
    const Tensor r = random_tensor({5, 5}, rng, false);
    const Md rd = to_double(r);
    {
        const Tensor loss = nn::sum(nn::mul(nn::relu(a), r));
        auto f = [&](const std::vector<Md>& in) { return ref_dot(ref_relu(in[0]), rd); };
        CHECK(check_grads({a}, f, loss).max_rel < 1e-3);
    }
    {
        const Tensor b = random_tensor({5, 5}, rng, true, -2, 2);
        const Tensor loss = nn::sum(nn::mul(nn::sigmoid(b), r));
        auto f = [&](const std::vector<Md>& in) { return ref_dot(ref_sigmoid(in[0]), rd); };
        CHECK(check_grads({b}, f, loss).max_rel < 1e-3);
    }
}

TEST_CASE("masked softmax gradients vs finite differences") {
    Rng rng(104);
    const int t = 6;
    const Tensor scores = random_tensor({t, t}, rng, true, -2, 2);
    const Tensor r = random_tensor({t, t}, rng, false);
    const Md rd = to_double(r);
    const Tensor loss = nn::sum(nn::mul(nn::softmax_masked(scores, nn::causal_mask(t)), r));
    auto f = [&](const std::vector<Md>& in) { return ref_dot(ref_softmax_causal(in[0], t), rd); };
    CHECK(check_grads({scores}, f, loss).max_rel < 1e-3);
}

TEST_CASE("layer_norm gradients vs finite differences") {
    Rng rng(105);
    const Tensor a = random_tensor({4, 6}, rng, true, -2, 2);
    const Tensor g = random_tensor({6}, rng, true, 0.5, 1.5);
    const Tensor b = random_tensor({6}, rng, true, -0.5, 0.5);
    const Tensor r = random_tensor({4, 6}, rng, false);
    const Md rd = to_double(r);
    const Tensor loss = nn::sum(nn::mul(nn::layer_norm(a, g, b), r));
    auto f = [&](const std::vector<Md>& in) {
        return ref_dot(ref_layer_norm(in[0], in[1], in[2], 4, 6), rd);
    };
    CHECK(check_grads({a, g, b}, f, loss).max_rel < 1e-3);
}

TEST_CASE("embedding gather/scatter gradients") {
    Rng rng(106);
    const Tensor table = random_tensor({5, 3}, rng);
    const std::vector<int> ids = {2, 0, 4, 2};  // repeated row accumulates
    const Tensor r = random_tensor({4, 3}, rng, false);
    const Md rd = to_double(r);
    const Tensor loss = nn::sum(nn::mul(nn::embedding(table, ids), r));
    auto f = [&](const std::vector<Md>& in) {
        Md gathered;
        for (int id : ids)
            for (int j = 0; j < 3; ++j) gathered.push_back(in[0][static_cast<std::size_t>(id) * 3 + j]);
        return ref_dot(gathered, rd);
    };
    CHECK(check_grads({table}, f, loss).max_rel < 1e-3);
    CHECK_THROWS_AS((void)nn::embedding(table, std::vector<int>{7}), nn::ShapeError);
}

TEST_CASE("slicing and concatenation gradients vs finite differences") {
    Rng rng(107);
    const Tensor a = random_tensor({6, 8}, rng);
    const Tensor r = random_tensor({3, 8}, rng, false);
    const Md rd = to_double(r);
    // rows 1..4 of a, split into two column halves and swapped back together
    const Tensor rows = nn::row_slice(a, 1, 4);
    const std::vector<Tensor> parts = {nn::col_slice(rows, 4, 8), nn::col_slice(rows, 0, 4)};
    const Tensor loss = nn::sum(nn::mul(nn::concat_cols(parts), r));
    auto f = [&](const std::vector<Md>& in) {
        Md out;
        for (int i = 1; i < 4; ++i) {
            for (int j = 4; j < 8; ++j) out.push_back(in[0][static_cast<std::size_t>(i) * 8 + j]);
            for (int j = 0; j < 4; ++j) out.push_back(in[0][static_cast<std::size_t>(i) * 8 + j]);
        }
        return ref_dot(out, rd);
    };
    CHECK(check_grads({a}, f, loss).max_rel < 1e-3);
}

TEST_CASE("cross entropy gradients vs finite differences") {
    Rng rng(108);
    const Tensor x = random_tensor({6, 4}, rng);
    const Tensor w = random_tensor({4, 5}, rng);
    const std::vector<int> labels = {0, 3, 2, 4, 1, 2};
    const Tensor loss = nn::cross_entropy_mean(nn::matmul(x, w), labels);
    auto f = [&](const std::vector<Md>& in) {
        return ref_ce_mean(ref_matmul(in[0], in[1], 6, 4, 5), labels, 6, 5);
    };
    CHECK(check_grads({x, w}, f, loss).max_rel < 1e-3);
}

TEST_CASE("two-layer network gradients match central finite differences") {
    // the full composite: relu and sigmoid variants over 10 seeds
    for (int seed = 0; seed < 10; ++seed) {
        const bool use_relu = seed % 2 == 0;
        // resample until relu pre-activations stay away from the kink
        for (std::uint64_t attempt = static_cast<std::uint64_t>(seed);; attempt += 101) {
            Rng rng(mix64(attempt, 77));
            const int batch = 8, d_in = 6, d_hidden = 16, d_out = 4;
            const Tensor x = random_tensor({batch, d_in}, rng);
            const Tensor w1 = random_tensor({d_in, d_hidden}, rng, true, -0.6, 0.6);
            const Tensor b1 = random_tensor({d_hidden}, rng, true, -0.2, 0.2);
            const Tensor w2 = random_tensor({d_hidden, d_out}, rng, true, -0.6, 0.6);
            const Tensor b2 = random_tensor({d_out}, rng, true, -0.2, 0.2);
            std::vector<float> target;
            for (int i = 0; i < batch * d_out; ++i)
                target.push_back(static_cast<float>(rng.real01()));

            if (use_relu) {
                const Md pre = ref_add_rowvec(
                    ref_matmul(to_double(x), to_double(w1), batch, d_in, d_hidden), to_double(b1),
                    batch, d_hidden);
                double min_abs = 1e300;
                for (double v : pre) min_abs = std::min(min_abs, std::abs(v));
                if (min_abs < 5e-3) continue;
            }

            const Tensor h1 = nn::add_rowvec(nn::matmul(x, w1), b1);
            const Tensor act = use_relu ? nn::relu(h1) : nn::sigmoid(h1);
            const Tensor pred = nn::add_rowvec(nn::matmul(act, w2), b2);
            const Tensor loss = nn::mse_loss(pred, target);

            const Md target_d(target.begin(), target.end());
            auto f = [&](const std::vector<Md>& in) {
                const Md h = ref_add_rowvec(ref_matmul(in[0], in[1], batch, d_in, d_hidden), in[2],
                                            batch, d_hidden);
                const Md a = use_relu ? ref_relu(h) : ref_sigmoid(h);
                const Md p = ref_add_rowvec(ref_matmul(a, in[3], batch, d_hidden, d_out), in[4],
                                            batch, d_out);
                return ref_sse(p, target_d) / static_cast<double>(p.size());
            };
            const auto res = check_grads({x, w1, b1, w2, b2}, f, loss);
            CHECK(res.max_rel < 1e-3);
            CHECK(res.p95_rel < 1e-4);
            break;
        }
    }
}

TEST_CASE("dropout") {
    Rng rng(9);
    const Tensor x = random_tensor({20, 20}, rng, true, 0.5, 1.5);
    Rng drop_rng(42);
    SUBCASE("eval mode is the identity") {
        const Tensor y = nn::dropout(x, 0.5f, false, drop_rng);
        CHECK(y.node().get() == x.node().get());
    }
    SUBCASE("training mode zeroes and rescales") {
        const float rate = 0.25f;
        const Tensor y = nn::dropout(x, rate, true, drop_rng);
        std::size_t zeros = 0;
        const auto xv = x.data();
        const auto yv = y.data();
        for (std::size_t i = 0; i < yv.size(); ++i) {
            if (yv[i] == 0.0f) {
                ++zeros;
            } else {
                CHECK(yv[i] == doctest::Approx(xv[i] / (1.0f - rate)));
            }
        }
        const double frac = static_cast<double>(zeros) / static_cast<double>(yv.size());
        CHECK(frac > 0.15);
        CHECK(frac < 0.35);
        // gradient is the applied mask
        nn::backward(nn::sum(y));
        for (std::size_t i = 0; i < yv.size(); ++i)
            CHECK(x.grad()[i] == (yv[i] == 0.0f ? 0.0f : doctest::Approx(1.0f / (1.0f - rate))));
    }
    SUBCASE("same seed, same mask") {
        Rng r1(7), r2(7);
        const Tensor y1 = nn::dropout(x, 0.5f, true, r1);
        const Tensor y2 = nn::dropout(x, 0.5f, true, r2);
        CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
    }
}

TEST_CASE("rmsprop step matches the hand-computed update") {
    // one step on f(w) = w^2 at w=1: grad 2, acc 0.1*4, w -> 0.68377
    Tensor w = Tensor::from_data({1}, {1.0f}, true);
    nn::RmsProp opt({w}, 0.1f, 0.9f, 1e-8f);
    const Tensor loss = nn::mul(w, w);
    opt.zero_grad();
    nn::backward(loss);
    opt.step();
    CHECK(w.data()[0] == doctest::Approx(0.6837722f).epsilon(1e-4));

    // zero gradient leaves parameters unchanged
    opt.zero_grad();
    opt.step();
    CHECK(w.data()[0] == doctest::Approx(0.6837722f).epsilon(1e-4));
}

TEST_CASE("adam first step has magnitude ~= lr regardless of gradient scale") {
    for (float g : {0.01f, 1.0f, 250.0f}) {
        Tensor w = Tensor::from_data({1}, {0.0f}, true);
        nn::Adam opt({w}, 0.001f);
        w.grad_mut()[0] = g;
        opt.step();
        CHECK(std::abs(w.data()[0] + 0.001f) < 1e-5f);  // step is -lr * sign(g)
    }
}

TEST_CASE("xavier initialization bounds and determinism") {
    Rng rng(21);
    const Tensor t = nn::xavier_uniform({4, 4}, rng);
    const float bound = std::sqrt(6.0f / 8.0f);
    for (float v : t.data()) {
        CHECK(v <= bound);
        CHECK(v >= -bound);
    }
    Rng r1(5), r2(5);
    const Tensor a = nn::xavier_uniform({3, 7}, r1);
    const Tensor b = nn::xavier_uniform({3, 7}, r2);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("sinusoidal positions start with the sin0/cos0 pattern") {
    const Tensor p = nn::sinusoidal_positions(10, 8);
    for (int i = 0; i < 8; i += 2) {
        CHECK(p.at(0, i) == 0.0f);
        CHECK(p.at(0, i + 1) == 1.0f);
    }
    CHECK(p.at(1, 0) == doctest::Approx(std::sin(1.0)));
}

TEST_CASE("checkpoint round trip and error cases") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "counterprobe_test.cpwt";
    Rng rng(31);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({5}, rng);
    const std::vector<nn::NamedParam> saved = {{"a", a}, {"b", b}};
    nn::save_checkpoint(path, saved);

    Tensor a2 = Tensor::zeros({3, 4}, true);
    Tensor b2 = Tensor::zeros({5}, true);
    std::vector<nn::NamedParam> loaded = {{"a", a2}, {"b", b2}};
    nn::load_checkpoint(path, loaded);
    CHECK(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    CHECK(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));

    Tensor wrong = Tensor::zeros({4, 3}, true);
    std::vector<nn::NamedParam> bad_shape = {{"a", wrong}, {"b", b2}};
    CHECK_THROWS_AS(nn::load_checkpoint(path, bad_shape), IoError);

    std::vector<nn::NamedParam> bad_name = {{"a", a2}, {"c", b2}};
    CHECK_THROWS_AS(nn::load_checkpoint(path, bad_name), IoError);
    fs::remove(path);
}

TEST_CASE("no-grad mode skips graph construction") {
    const Tensor x = Tensor::from_data({1}, {2.0f}, true);
    nn::NoGradGuard guard;
    const Tensor y = nn::mul(x, x);
    CHECK(!y.requires_grad());
}
