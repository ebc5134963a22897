#include "counterprobe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include "counterprobe/ioutil.hpp"

namespace counterprobe::nn {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::shared_ptr<Node> new_node(std::vector<int> shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0f);
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

void require_2d(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " requires a rank-2 tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Attaches parents and a backward closure when recording is on.
void attach(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
            std::function<void()> fn) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (!any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

// ---- raw kernels (row-major) ----

// C[m,n] += A[m,p] * B[p,n]
void gemm_nn(const float* a, const float* b, float* c, int m, int p, int n) {
    for (int i = 0; i < m; ++i) {
        float* ci = c + static_cast<std::size_t>(i) * n;
        const float* ai = a + static_cast<std::size_t>(i) * p;
        for (int l = 0; l < p; ++l) {
            const float ail = ai[l];
            const float* bl = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<std::size_t>(i) * n;
        float* ci = c + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const float* bj = b + static_cast<std::size_t>(j) * n;
            float acc = 0.0f;
            for (int l = 0; l < n; ++l) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

// C[p,n] += A[m,p]^T * B[m,n]
void gemm_tn(const float* a, const float* b, float* c, int p, int m, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<std::size_t>(i) * p;
        const float* bi = b + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < p; ++l) {
            const float ail = ai[l];
            float* cl = c + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) cl[j] += ail * bi[j];
        }
    }
}

}  // namespace

Tensor wrap_node(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = new_node(std::move(shape));
    n->requires_grad = requires_grad;  // grad mode gates op recording, not leaves
    return wrap_node(std::move(n));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    auto n = new_node(std::move(shape));
    if (data.size() != n->value.size())
        throw ShapeError("from_data: " + std::to_string(data.size()) + " values for shape " +
                         shape_str(n->shape));
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return wrap_node(std::move(n));
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.rows(), p = a.cols(), n = b.cols();
    if (b.rows() != p)
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    auto out = new_node({m, n});
    gemm_nn(a.data().data(), b.data().data(), out->value.data(), m, p, n);
    auto an = a.node(), bn = b.node();
    auto on = out.get();
    attach(out, {an, bn}, [an, bn, on, m, p, n] {
        if (an->requires_grad) {
            an->ensure_grad();
            gemm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, p);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            gemm_tn(an->value.data(), on->grad.data(), bn->grad.data(), p, m, n);
        }
    });
    return wrap_node(out);
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int m = a.rows(), n = a.cols();
    auto out = new_node({n, m});
    const auto src = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->value[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on, m, n] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                an->grad[static_cast<std::size_t>(i) * n + j] +=
                    on->grad[static_cast<std::size_t>(j) * m + i];
    });
    return wrap_node(out);
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* what, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, what);
    auto out = new_node(a.shape());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = fwd(av[i], bv[i]);
    auto an = a.node(), bn = b.node();
    auto on = out.get();
    attach(out, {an, bn}, [an, bn, on, bwd] {
        const std::size_t n = on->value.size();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            float da = 0, db = 0;
            bwd(an->value[i], bn->value[i], on->grad[i], da, db);
            if (an->requires_grad) an->grad[i] += da;
            if (bn->requires_grad) bn->grad[i] += db;
        }
    });
    return wrap_node(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float, float, float g, float& da, float& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_same_shape(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float x, float y, float g, float& da, float& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor scale(const Tensor& a, float s) {
    auto out = new_node(a.shape());
    const auto av = a.data();
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] * s;
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on, s] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
    });
    return wrap_node(out);
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
    require_2d(a, "add_rowvec");
    if (bias.rank() != 1 || bias.rows() != a.cols())
        throw ShapeError("add_rowvec: bias " + shape_str(bias.shape()) + " vs " +
                         shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    auto out = new_node(a.shape());
    const auto av = a.data();
    const auto bv = bias.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->value[static_cast<std::size_t>(i) * n + j] =
                av[static_cast<std::size_t>(i) * n + j] + bv[static_cast<std::size_t>(j)];
    auto an = a.node(), bn = bias.node();
    auto on = out.get();
    attach(out, {an, bn}, [an, bn, on, m, n] {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    bn->grad[static_cast<std::size_t>(j)] +=
                        on->grad[static_cast<std::size_t>(i) * n + j];
        }
    });
    return wrap_node(out);
}

Tensor relu(const Tensor& a) {
    auto out = new_node(a.shape());
    const auto av = a.data();
    for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = av[i] > 0.0f ? av[i] : 0.0f;
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            if (an->value[i] > 0.0f) an->grad[i] += on->grad[i];
    });
    return wrap_node(out);
}

Tensor sigmoid(const Tensor& a) {
    auto out = new_node(a.shape());
    const auto av = a.data();
    for (std::size_t i = 0; i < out->value.size(); ++i)
        out->value[i] = 1.0f / (1.0f + std::exp(-av[i]));
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            const float y = on->value[i];
            an->grad[i] += on->grad[i] * y * (1.0f - y);
        }
    });
    return wrap_node(out);
}

Tensor softmax_masked(const Tensor& a, const Tensor& mask) {
    require_2d(a, "softmax_masked");
    require_same_shape(a, mask, "softmax_masked");
    const int m = a.rows(), n = a.cols();
    auto out = new_node(a.shape());
    const auto av = a.data();
    const auto mv = mask.data();
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < n; ++j)
            if (!std::isinf(mv[off + j])) mx = std::max(mx, av[off + j]);
        float denom = 0.0f;
        for (int j = 0; j < n; ++j) {
            if (std::isinf(mv[off + j])) {
                out->value[off + j] = 0.0f;
            } else {
                const float e = std::exp(av[off + j] - mx);
                out->value[off + j] = e;
                denom += e;
            }
        }
        if (denom > 0.0f)
            for (int j = 0; j < n; ++j) out->value[off + j] /= denom;
    }
    auto an = a.node(), mn = mask.node();
    auto on = out.get();
    attach(out, {an, mn}, [an, on, m, n] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * n;
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += on->grad[off + j] * on->value[off + j];
            for (int j = 0; j < n; ++j)
                an->grad[off + j] += on->value[off + j] * (on->grad[off + j] - dot);
        }
    });
    return wrap_node(out);
}

Tensor causal_mask(int t) {
    thread_local std::map<int, Tensor> cache;
    auto it = cache.find(t);
    if (it != cache.end()) return it->second;
    const float ninf = -std::numeric_limits<float>::infinity();
    std::vector<float> v(static_cast<std::size_t>(t) * t, 0.0f);
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) v[static_cast<std::size_t>(i) * t + j] = ninf;
    Tensor m = Tensor::from_data({t, t}, std::move(v));
    cache.emplace(t, m);
    return m;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps) {
    require_2d(a, "layer_norm");
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.rows() != a.cols() || beta.rows() != a.cols())
        throw ShapeError("layer_norm: affine params must have shape {cols}");
    const int m = a.rows(), n = a.cols();
    auto out = new_node(a.shape());
    auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(m));
    const auto av = a.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        float mean = 0.0f;
        for (int j = 0; j < n; ++j) mean += av[off + j];
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (int j = 0; j < n; ++j) {
            const float d = av[off + j] - mean;
            var += d * d;
        }
        var /= static_cast<float>(n);
        const float is = 1.0f / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < n; ++j) {
            const float xh = (av[off + j] - mean) * is;
            (*xhat)[off + j] = xh;
            out->value[off + j] = gv[j] * xh + bv[j];
        }
    }
    auto an = a.node(), gn = gamma.node(), bn = beta.node();
    auto on = out.get();
    attach(out, {an, gn, bn}, [an, gn, bn, on, xhat, inv_std, m, n] {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (an->requires_grad) an->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * n;
            if (gn->requires_grad || bn->requires_grad) {
                for (int j = 0; j < n; ++j) {
                    if (gn->requires_grad) gn->grad[j] += on->grad[off + j] * (*xhat)[off + j];
                    if (bn->requires_grad) bn->grad[j] += on->grad[off + j];
                }
            }
            if (!an->requires_grad) continue;
            // dxhat = dy * gamma; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
            for (int j = 0; j < n; ++j) {
                const float dxh = on->grad[off + j] * gn->value[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * (*xhat)[off + j];
            }
            mean_dxhat /= static_cast<float>(n);
            mean_dxhat_xhat /= static_cast<float>(n);
            const float is = (*inv_std)[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
                const float dxh = on->grad[off + j] * gn->value[j];
                an->grad[off + j] += is * (dxh - mean_dxhat - (*xhat)[off + j] * mean_dxhat_xhat);
            }
        }
    });
    return wrap_node(out);
}

Tensor dropout(const Tensor& a, float rate, bool train, Rng& rng) {
    if (rate < 0.0f || rate >= 1.0f)
        throw std::invalid_argument("dropout rate must be in [0,1)");
    if (!train || rate == 0.0f) return a;
    const float keep = 1.0f - rate;
    const float inv_keep = 1.0f / keep;
    auto out = new_node(a.shape());
    auto mask = std::make_shared<std::vector<float>>(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out->value.size(); ++i) {
        const float m = rng.real01() < keep ? inv_keep : 0.0f;
        (*mask)[i] = m;
        out->value[i] = av[i] * m;
    }
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on, mask] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * (*mask)[i];
    });
    return wrap_node(out);
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_2d(table, "embedding");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ShapeError("embedding: token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
    auto out = new_node({static_cast<int>(ids.size()), d});
    const auto tv = table.data();
    for (std::size_t t = 0; t < ids.size(); ++t)
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[t]) * d, d,
                    out->value.data() + t * static_cast<std::size_t>(d));
    auto tn = table.node();
    auto on = out.get();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    attach(out, {tn}, [tn, on, d, ids_copy = std::move(ids_copy)] {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t t = 0; t < ids_copy.size(); ++t) {
            float* dst = tn->grad.data() + static_cast<std::size_t>(ids_copy[t]) * d;
            const float* src = on->grad.data() + t * static_cast<std::size_t>(d);
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return wrap_node(out);
}

Tensor row_slice(const Tensor& a, int r0, int r1) {
    require_2d(a, "row_slice");
    if (r0 < 0 || r1 > a.rows() || r0 >= r1) throw ShapeError("row_slice: bad range");
    const int n = a.cols();
    auto out = new_node({r1 - r0, n});
    std::copy_n(a.data().data() + static_cast<std::size_t>(r0) * n, out->value.size(),
                out->value.data());
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on, r0, n] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        float* dst = an->grad.data() + static_cast<std::size_t>(r0) * n;
        for (std::size_t i = 0; i < on->grad.size(); ++i) dst[i] += on->grad[i];
    });
    return wrap_node(out);
}

Tensor col_slice(const Tensor& a, int c0, int c1) {
    require_2d(a, "col_slice");
    if (c0 < 0 || c1 > a.cols() || c0 >= c1) throw ShapeError("col_slice: bad range");
    const int m = a.rows(), n = a.cols(), w = c1 - c0;
    auto out = new_node({m, w});
    const auto av = a.data();
    for (int i = 0; i < m; ++i)
        std::copy_n(av.data() + static_cast<std::size_t>(i) * n + c0, w,
                    out->value.data() + static_cast<std::size_t>(i) * w);
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on, m, n, c0, w] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int i = 0; i < m; ++i) {
            float* dst = an->grad.data() + static_cast<std::size_t>(i) * n + c0;
            const float* src = on->grad.data() + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return wrap_node(out);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    auto out = new_node({m, total});
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> widths;
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        const auto pv = p.data();
        for (int i = 0; i < m; ++i)
            std::copy_n(pv.data() + static_cast<std::size_t>(i) * w, w,
                        out->value.data() + static_cast<std::size_t>(i) * total + c0);
        parents.push_back(p.node());
        widths.push_back(w);
        c0 += w;
    }
    auto on = out.get();
    auto parents_copy = parents;
    attach(out, std::move(parents), [parents = std::move(parents_copy), widths, on, m, total] {
        int off = 0;
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
            const int w = widths[pi];
            auto& p = parents[pi];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    float* dst = p->grad.data() + static_cast<std::size_t>(i) * w;
                    const float* src = on->grad.data() + static_cast<std::size_t>(i) * total + off;
                    for (int j = 0; j < w; ++j) dst[j] += src[j];
                }
            }
            off += w;
        }
    });
    return wrap_node(out);
}

Tensor squared_error_sum(const Tensor& pred, std::span<const float> target) {
    if (pred.numel() != target.size())
        throw ShapeError("squared_error_sum: target size mismatch");
    auto out = new_node({1});
    const auto pv = pred.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = static_cast<double>(pv[i]) - target[i];
        acc += d * d;
    }
    out->value[0] = static_cast<float>(acc);
    auto pn = pred.node();
    auto on = out.get();
    std::vector<float> tcopy(target.begin(), target.end());
    attach(out, {pn}, [pn, on, tcopy = std::move(tcopy)] {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        const float g = on->grad[0];
        for (std::size_t i = 0; i < pn->value.size(); ++i)
            pn->grad[i] += 2.0f * (pn->value[i] - tcopy[i]) * g;
    });
    return wrap_node(out);
}

Tensor mse_loss(const Tensor& pred, std::span<const float> target) {
    return scale(squared_error_sum(pred, target), 1.0f / static_cast<float>(pred.numel()));
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int> labels) {
    require_2d(logits, "cross_entropy_mean");
    const int m = logits.rows(), d = logits.cols();
    if (static_cast<int>(labels.size()) != m)
        throw ShapeError("cross_entropy_mean: label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= d) throw ShapeError("cross_entropy_mean: label out of range");
    auto out = new_node({1});
    auto probs = std::make_shared<std::vector<float>>(logits.numel());
    const auto lv = logits.data();
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        float mx = lv[off];
        for (int j = 1; j < d; ++j) mx = std::max(mx, lv[off + j]);
        double denom = 0.0;
        for (int j = 0; j < d; ++j) denom += std::exp(static_cast<double>(lv[off + j] - mx));
        const double log_denom = std::log(denom);
        loss += log_denom - static_cast<double>(lv[off + labels[i]] - mx);
        for (int j = 0; j < d; ++j)
            (*probs)[off + j] =
                static_cast<float>(std::exp(static_cast<double>(lv[off + j] - mx)) / denom);
    }
    out->value[0] = static_cast<float>(loss / m);
    auto ln = logits.node();
    auto on = out.get();
    std::vector<int> lcopy(labels.begin(), labels.end());
    attach(out, {ln}, [ln, on, probs, lcopy = std::move(lcopy), m, d] {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const float g = on->grad[0] / static_cast<float>(m);
        for (int i = 0; i < m; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) {
                const float onehot = j == lcopy[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
                ln->grad[off + j] += ((*probs)[off + j] - onehot) * g;
            }
        }
    });
    return wrap_node(out);
}

Tensor sum(const Tensor& a) {
    auto out = new_node({1});
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    out->value[0] = static_cast<float>(acc);
    auto an = a.node();
    auto on = out.get();
    attach(out, {an}, [an, on] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[0];
    });
    return wrap_node(out);
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss");
    if (!loss.requires_grad()) return;

    // Post-order DFS, then replay reversed: every node runs before its parents.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->ensure_grad();  // nodes with no incoming gradient contribute zeros
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

Tensor xavier_uniform(std::vector<int> shape, Rng& rng, int fan_in, int fan_out) {
    if (fan_in < 0) fan_in = shape.at(0);
    if (fan_out < 0) fan_out = shape.size() >= 2 ? shape.at(1) : shape.at(0);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (float& v : t.data()) v = static_cast<float>((rng.real01() * 2.0 - 1.0) * bound);
    return t;
}

Tensor sinusoidal_positions(int max_len, int d_model) {
    if (d_model % 2 != 0) throw ShapeError("sinusoidal_positions needs even d_model");
    Tensor t = Tensor::zeros({max_len, d_model});
    auto v = t.data();
    for (int pos = 0; pos < max_len; ++pos) {
        for (int i = 0; i < d_model / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / d_model);
            v[static_cast<std::size_t>(pos) * d_model + 2 * i] =
                static_cast<float>(std::sin(pos * freq));
            v[static_cast<std::size_t>(pos) * d_model + 2 * i + 1] =
                static_cast<float>(std::cos(pos * freq));
        }
    }
    return t;
}

RmsProp::RmsProp(std::vector<Tensor> params, float lr, float rho, float eps)
    : Optimizer(std::move(params)), lr_(lr), rho_(rho), eps_(eps) {
    for (const auto& p : params_) acc_.emplace_back(p.numel(), 0.0f);
}

void RmsProp::step() {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi];
        auto g = p.grad_mut();
        auto val = p.data();
        auto& acc = acc_[pi];
        for (std::size_t i = 0; i < val.size(); ++i) {
            acc[i] = rho_ * acc[i] + (1.0f - rho_) * g[i] * g[i];
            val[i] -= lr_ * g[i] / std::sqrt(acc[i] + eps_);
        }
    }
}

Adam::Adam(std::vector<Tensor> params, float lr, float beta1, float beta2, float eps)
    : Optimizer(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
    }
}

void Adam::step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi];
        auto g = p.grad_mut();
        auto val = p.data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

// ---- CPWT checkpoints ----

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedParam> params) {
    atomic_write(path, [&](std::ostream& out) {
        write_magic(out, "CPWT");
        write_le<std::uint32_t>(out, kCheckpointVersion);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
        for (const auto& p : params) {
            write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
            out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            const auto& shape = p.tensor.shape();
            write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
            for (int d : shape) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
            for (float v : p.tensor.data()) write_le<float>(out, v);
        }
    });
}

void load_checkpoint(const std::filesystem::path& path, std::span<NamedParam> params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    expect_magic(in, "CPWT");
    const auto version = read_le<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version mismatch: file has " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
    const auto count = read_le<std::uint32_t>(in);
    if (count != params.size())
        throw IoError("checkpoint holds " + std::to_string(count) + " parameters, expected " +
                      std::to_string(params.size()));
    std::unordered_map<std::string, NamedParam*> by_name;
    for (auto& p : params) by_name[p.name] = &p;
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = read_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw IoError("truncated checkpoint parameter name");
        const auto ndim = read_le<std::uint32_t>(in);
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < ndim; ++i)
            shape.push_back(static_cast<int>(read_le<std::uint32_t>(in)));
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("unexpected checkpoint parameter '" + name + "'");
        Tensor& t = it->second->tensor;
        if (t.shape() != shape) throw IoError("shape mismatch for checkpoint parameter '" + name + "'");
        for (float& v : t.data()) v = read_le<float>(in);
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw IoError("checkpoint is missing parameter '" + by_name.begin()->first + "'");
}

}  // namespace counterprobe::nn
