#pragma once

// Reverse-mode automatic differentiation over dense 64-bit tensors.
//
// Design: tensors are shared buffers (value + optional grad); a Tape records
// one backward closure per primitive op, run in reverse order by backward().
// Parameters outlive tapes — a fresh Tape is built per training step while
// leaf tensors accumulate gradients until an optimizer consumes them.
// Dense products go through Eigen; everything else is explicit loops.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "b2r/rng.hpp"
#include "b2r/util.hpp"

namespace b2r::nn {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // sized like value iff requires_grad
    bool requires_grad = false;
    std::string name; // diagnostics only
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? "x" : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad, std::string name = "") {
        std::size_t n = 1;
        for (std::size_t s : shape) {
            n *= s;
        }
        require(!shape.empty() && n == values.size(), "tensor '", name, "': shape ",
                shape_str(shape), " does not match ", values.size(), " values");
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(values);
        t.d_->requires_grad = requires_grad;
        t.d_->name = std::move(name);
        if (requires_grad) {
            t.d_->grad.assign(t.d_->value.size(), 0.0);
        }
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad,
                        std::string name = "") {
        std::size_t n = 1;
        for (std::size_t s : shape) {
            n *= s;
        }
        return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad,
                    std::move(name));
    }

    explicit operator bool() const { return static_cast<bool>(d_); }
    bool same_buffer(const Tensor& other) const { return d_ == other.d_; }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t size() const { return d_->value.size(); }
    bool requires_grad() const { return d_->requires_grad; }
    const std::string& name() const { return d_->name; }

    // All ops treat tensors as matrices: 1-D [n] reads as a single row.
    std::size_t rows() const {
        require(d_->shape.size() <= 2, "tensor '", d_->name, "': rank ", d_->shape.size(),
                " not supported");
        return d_->shape.size() == 2 ? d_->shape[0] : 1;
    }
    std::size_t cols() const {
        require(d_->shape.size() <= 2, "tensor '", d_->name, "': rank ", d_->shape.size(),
                " not supported");
        return d_->shape.back();
    }

    std::vector<double>& value() { return d_->value; }
    const std::vector<double>& value() const { return d_->value; }
    std::vector<double>& grad() {
        require(d_->requires_grad, "tensor '", d_->name, "': no gradient buffer");
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        require(d_->requires_grad, "tensor '", d_->name, "': no gradient buffer");
        return d_->grad;
    }

    double scalar() const {
        require(size() == 1, "tensor '", d_->name, "': scalar() on shape ", shape_str(d_->shape));
        return d_->value[0];
    }

    void zero_grad() {
        if (d_->requires_grad) {
            std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
        }
    }

private:
    std::shared_ptr<TensorData> d_;
};

inline void zero_grads(const std::vector<Tensor>& params) {
    for (Tensor p : params) {
        p.zero_grad();
    }
}

inline void require_finite(const Tensor& t, const std::string& context) {
    for (double v : t.value()) {
        require(std::isfinite(v), context, ": non-finite value in tensor '", t.name(), "'");
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

inline CMap as_mat(const Tensor& t) {
    return CMap(t.value().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
inline Map as_mat_mut(Tensor& t) {
    return Map(t.value().data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}
inline Map grad_mat(Tensor& t) {
    return Map(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}
inline CMap grad_cmat(const Tensor& t) {
    return CMap(t.grad().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
} // namespace detail

class Tape {
public:
    // ---- dense product -----------------------------------------------------

    Tensor matmul(Tensor a, Tensor b) {
        require(a.cols() == b.rows(), "matmul: inner dims disagree, ", shape_str(a.shape()),
                " x ", shape_str(b.shape()));
        Tensor out = make_out({a.rows(), b.cols()}, a.requires_grad() || b.requires_grad());
        detail::as_mat_mut(out).noalias() = detail::as_mat(a) * detail::as_mat(b);
        if (out.requires_grad()) {
            record([a, b, out]() mutable {
                auto g = detail::grad_cmat(out);
                if (a.requires_grad()) {
                    detail::grad_mat(a).noalias() += g * detail::as_mat(b).transpose();
                }
                if (b.requires_grad()) {
                    detail::grad_mat(b).noalias() += detail::as_mat(a).transpose() * g;
                }
            });
        }
        return out;
    }

    // ---- elementwise -------------------------------------------------------

    Tensor add(Tensor a, Tensor b) { return binary(a, b, /*sub=*/false); }
    Tensor sub(Tensor a, Tensor b) { return binary(a, b, /*sub=*/true); }

    Tensor mul(Tensor a, Tensor b) {
        require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
                shape_str(b.shape()));
        Tensor out = make_out(a.shape(), a.requires_grad() || b.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = a.value()[i] * b.value()[i];
        }
        if (out.requires_grad()) {
            record([a, b, out]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double g = out.grad()[i];
                    if (a.requires_grad()) {
                        a.grad()[i] += g * b.value()[i];
                    }
                    if (b.requires_grad()) {
                        b.grad()[i] += g * a.value()[i];
                    }
                }
            });
        }
        return out;
    }

    // broadcast a row vector v ([n] or [1,n]) across the rows of a ([m,n])
    Tensor add_rowvec(Tensor a, Tensor v) { return rowvec(a, v, /*multiply=*/false); }
    Tensor mul_rowvec(Tensor a, Tensor v) { return rowvec(a, v, /*multiply=*/true); }

    Tensor scale(Tensor a, double c) {
        Tensor out = make_out(a.shape(), a.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = a.value()[i] * c;
        }
        if (out.requires_grad()) {
            record([a, out, c]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    a.grad()[i] += out.grad()[i] * c;
                }
            });
        }
        return out;
    }

    Tensor add_const(Tensor a, double c) {
        Tensor out = make_out(a.shape(), a.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = a.value()[i] + c;
        }
        if (out.requires_grad()) {
            record([a, out]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    a.grad()[i] += out.grad()[i];
                }
            });
        }
        return out;
    }

    Tensor exp(Tensor a) {
        Tensor out = make_out(a.shape(), a.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = std::exp(a.value()[i]);
        }
        if (out.requires_grad()) {
            record([a, out]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    a.grad()[i] += out.grad()[i] * out.value()[i];
                }
            });
        }
        return out;
    }

    Tensor gelu(Tensor a) {
        Tensor out = make_out(a.shape(), a.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = a.value()[i];
            out.value()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
        }
        if (out.requires_grad()) {
            record([a, out]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double x = a.value()[i];
                    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    const double pdf = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
                    a.grad()[i] += out.grad()[i] * (cdf + x * pdf);
                }
            });
        }
        return out;
    }

    // subgradient: pass-through strictly inside (lo, hi), zero outside
    Tensor clamp(Tensor a, double lo, double hi) {
        require(lo < hi, "clamp: lo ", lo, " >= hi ", hi);
        Tensor out = make_out(a.shape(), a.requires_grad());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = std::clamp(a.value()[i], lo, hi);
        }
        if (out.requires_grad()) {
            record([a, out, lo, hi]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    const double x = a.value()[i];
                    if (x > lo && x < hi) {
                        a.grad()[i] += out.grad()[i];
                    }
                }
            });
        }
        return out;
    }

    // compensated total so the result is insensitive to summation order
    Tensor sum(Tensor a) {
        Tensor out = make_out({1}, a.requires_grad());
        KahanSum s;
        for (double v : a.value()) {
            s.add(v);
        }
        out.value()[0] = s.value();
        if (out.requires_grad()) {
            record([a, out]() mutable {
                const double g = out.grad()[0];
                for (std::size_t i = 0; i < a.size(); ++i) {
                    a.grad()[i] += g;
                }
            });
        }
        return out;
    }

    // ---- normalization -----------------------------------------------------

    Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps = 1e-5) {
        const std::size_t m = x.rows();
        const std::size_t n = x.cols();
        require(gain.size() == n && bias.size() == n, "layer_norm: gain ",
                shape_str(gain.shape()), " / bias ", shape_str(bias.shape()),
                " do not match row width ", n);
        Tensor out = make_out(x.shape(),
                              x.requires_grad() || gain.requires_grad() || bias.requires_grad());
        auto xhat = std::make_shared<std::vector<double>>(m * n);
        auto inv_std = std::make_shared<std::vector<double>>(m);
        for (std::size_t r = 0; r < m; ++r) {
            const double* xr = x.value().data() + r * n;
            double mu = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                mu += xr[j];
            }
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                var += (xr[j] - mu) * (xr[j] - mu);
            }
            var /= static_cast<double>(n);
            const double istd = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = istd;
            for (std::size_t j = 0; j < n; ++j) {
                const double xh = (xr[j] - mu) * istd;
                (*xhat)[r * n + j] = xh;
                out.value()[r * n + j] = gain.value()[j] * xh + bias.value()[j];
            }
        }
        if (out.requires_grad()) {
            record([x, gain, bias, out, xhat, inv_std, m, n]() mutable {
                for (std::size_t r = 0; r < m; ++r) {
                    const double* g = out.grad().data() + r * n;
                    const double* xh = xhat->data() + r * n;
                    double mean_dxhat = 0.0;
                    double mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxhat = g[j] * gain.value()[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(n);
                    mean_dxhat_xhat /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxhat = g[j] * gain.value()[j];
                        if (x.requires_grad()) {
                            x.grad()[r * n + j] +=
                                (*inv_std)[r] * (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                        if (gain.requires_grad()) {
                            gain.grad()[j] += g[j] * xh[j];
                        }
                        if (bias.requires_grad()) {
                            bias.grad()[j] += g[j];
                        }
                    }
                }
            });
        }
        return out;
    }

    // ---- softmax -----------------------------------------------------------

    Tensor softmax(Tensor x) { return softmax_masked(x, {}); }

    // additive_mask: per-element additive logits (0 keeps, -inf forbids);
    // empty means no mask. Every row must keep at least one entry.
    Tensor softmax_masked(Tensor x, const std::vector<double>& additive_mask) {
        const std::size_t m = x.rows();
        const std::size_t n = x.cols();
        require(additive_mask.empty() || additive_mask.size() == x.size(),
                "softmax: mask length ", additive_mask.size(), " != tensor size ", x.size());
        Tensor out = make_out(x.shape(), x.requires_grad());
        for (std::size_t r = 0; r < m; ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                const double logit =
                    x.value()[r * n + j] + (additive_mask.empty() ? 0.0 : additive_mask[r * n + j]);
                mx = std::max(mx, logit);
            }
            require(std::isfinite(mx), "softmax: row ", r, " is fully masked");
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double logit =
                    x.value()[r * n + j] + (additive_mask.empty() ? 0.0 : additive_mask[r * n + j]);
                const double e = std::exp(logit - mx);
                out.value()[r * n + j] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) {
                out.value()[r * n + j] /= z;
            }
        }
        if (out.requires_grad()) {
            record([x, out, m, n]() mutable {
                for (std::size_t r = 0; r < m; ++r) {
                    const double* y = out.value().data() + r * n;
                    const double* g = out.grad().data() + r * n;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dot += y[j] * g[j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        x.grad()[r * n + j] += y[j] * (g[j] - dot);
                    }
                }
            });
        }
        return out;
    }

    // ---- dropout -----------------------------------------------------------

    // Inverted dropout: kept entries scale by 1/(1-p). Mask is drawn from the
    // caller's stream, so identical seeds give identical masks.
    Tensor dropout(Tensor x, double p, Rng& rng) {
        require(p >= 0.0 && p < 1.0, "dropout: p = ", p, " outside [0, 1)");
        if (p == 0.0) {
            return x;
        }
        const double keep_scale = 1.0 / (1.0 - p);
        auto mask = std::make_shared<std::vector<double>>(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            (*mask)[i] = (rng.uniform01() < p) ? 0.0 : keep_scale;
        }
        Tensor out = make_out(x.shape(), x.requires_grad());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out.value()[i] = x.value()[i] * (*mask)[i];
        }
        if (out.requires_grad()) {
            record([x, out, mask]() mutable {
                for (std::size_t i = 0; i < x.size(); ++i) {
                    x.grad()[i] += out.grad()[i] * (*mask)[i];
                }
            });
        }
        return out;
    }

    // ---- gather / scatter / layout -----------------------------------------

    Tensor gather_rows(Tensor x, const std::vector<std::size_t>& indices) {
        const std::size_t n = x.cols();
        for (std::size_t idx : indices) {
            require(idx < x.rows(), "gather_rows: index ", idx, " out of range for ",
                    shape_str(x.shape()));
        }
        Tensor out = make_out({indices.size(), n}, x.requires_grad());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(x.value().data() + indices[i] * n, n, out.value().data() + i * n);
        }
        if (out.requires_grad()) {
            record([x, out, indices, n]() mutable {
                for (std::size_t i = 0; i < indices.size(); ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        x.grad()[indices[i] * n + j] += out.grad()[i * n + j];
                    }
                }
            });
        }
        return out;
    }

    // Embedding lookup is a row gather over the embedding table; repeated
    // indices scatter-add their gradients into the same row.
    Tensor embed_lookup(Tensor table, const std::vector<std::size_t>& indices) {
        return gather_rows(table, indices);
    }

    // out[dst[i], :] = x[i, :]; untouched rows stay zero. dst must be unique.
    Tensor scatter_rows(Tensor x, const std::vector<std::size_t>& dst, std::size_t out_rows) {
        const std::size_t n = x.cols();
        require(dst.size() == x.rows(), "scatter_rows: ", dst.size(), " destinations for ",
                x.rows(), " rows");
        std::vector<std::uint8_t> seen(out_rows, 0);
        for (std::size_t d : dst) {
            require(d < out_rows, "scatter_rows: destination ", d, " out of range ", out_rows);
            require(!seen[d], "scatter_rows: duplicate destination row ", d);
            seen[d] = 1;
        }
        Tensor out = make_out({out_rows, n}, x.requires_grad());
        for (std::size_t i = 0; i < dst.size(); ++i) {
            std::copy_n(x.value().data() + i * n, n, out.value().data() + dst[i] * n);
        }
        if (out.requires_grad()) {
            record([x, out, dst, n]() mutable {
                for (std::size_t i = 0; i < dst.size(); ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        x.grad()[i * n + j] += out.grad()[dst[i] * n + j];
                    }
                }
            });
        }
        return out;
    }

    Tensor slice_rows(Tensor x, std::size_t start, std::size_t count) {
        require(start + count <= x.rows(), "slice_rows: [", start, ", ", start + count,
                ") exceeds ", shape_str(x.shape()));
        const std::size_t n = x.cols();
        Tensor out = make_out({count, n}, x.requires_grad());
        std::copy_n(x.value().data() + start * n, count * n, out.value().data());
        if (out.requires_grad()) {
            record([x, out, start, n, count]() mutable {
                for (std::size_t i = 0; i < count * n; ++i) {
                    x.grad()[start * n + i] += out.grad()[i];
                }
            });
        }
        return out;
    }

    Tensor concat_rows(Tensor a, Tensor b) {
        require(a.cols() == b.cols(), "concat_rows: widths differ, ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
        const std::size_t n = a.cols();
        Tensor out = make_out({a.rows() + b.rows(), n}, a.requires_grad() || b.requires_grad());
        std::copy(a.value().begin(), a.value().end(), out.value().begin());
        std::copy(b.value().begin(), b.value().end(), out.value().begin() + a.size());
        if (out.requires_grad()) {
            record([a, b, out]() mutable {
                if (a.requires_grad()) {
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        a.grad()[i] += out.grad()[i];
                    }
                }
                if (b.requires_grad()) {
                    for (std::size_t i = 0; i < b.size(); ++i) {
                        b.grad()[i] += out.grad()[a.size() + i];
                    }
                }
            });
        }
        return out;
    }

    // ---- rotary position encoding -------------------------------------------

    // Rotates consecutive pairs within each head chunk by angle pos * theta_i,
    // theta_i = base^(-2i / head_dim). head_dim = 0 treats the whole row as
    // one chunk. Rotations are orthogonal, so the backward pass rotates the
    // incoming gradient by the opposite angle.
    Tensor apply_rope(Tensor x, const std::vector<int>& positions, double base = 10000.0,
                      std::size_t head_dim = 0) {
        const std::size_t m = x.rows();
        const std::size_t n = x.cols();
        const std::size_t hd = head_dim == 0 ? n : head_dim;
        require(positions.size() == m, "apply_rope: ", positions.size(), " positions for ", m,
                " rows");
        require(hd % 2 == 0, "apply_rope: head dim ", hd, " must be even");
        require(n % hd == 0, "apply_rope: row width ", n, " not a multiple of head dim ", hd);
        require(base > 0.0, "apply_rope: base ", base, " must be positive");

        auto thetas = std::make_shared<std::vector<double>>(hd / 2);
        for (std::size_t i = 0; i < hd / 2; ++i) {
            (*thetas)[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        }
        Tensor out = make_out(x.shape(), x.requires_grad());
        auto rotate = [&](const std::vector<double>& src, std::vector<double>& dst, double sign) {
            for (std::size_t r = 0; r < m; ++r) {
                const double p = static_cast<double>(positions[r]);
                for (std::size_t h = 0; h < n / hd; ++h) {
                    for (std::size_t i = 0; i < hd / 2; ++i) {
                        const double angle = sign * p * (*thetas)[i];
                        const double c = std::cos(angle);
                        const double s = std::sin(angle);
                        const std::size_t i0 = r * n + h * hd + 2 * i;
                        const double x0 = src[i0];
                        const double x1 = src[i0 + 1];
                        dst[i0] = x0 * c - x1 * s;
                        dst[i0 + 1] = x0 * s + x1 * c;
                    }
                }
            }
        };
        rotate(x.value(), out.value(), +1.0);
        if (out.requires_grad()) {
            record([x, out, positions, thetas, m, n, hd]() mutable {
                for (std::size_t r = 0; r < m; ++r) {
                    const double p = static_cast<double>(positions[r]);
                    for (std::size_t h = 0; h < n / hd; ++h) {
                        for (std::size_t i = 0; i < hd / 2; ++i) {
                            const double angle = p * (*thetas)[i];
                            const double c = std::cos(angle);
                            const double s = std::sin(angle);
                            const std::size_t i0 = r * n + h * hd + 2 * i;
                            const double g0 = out.grad()[i0];
                            const double g1 = out.grad()[i0 + 1];
                            x.grad()[i0] += g0 * c + g1 * s;
                            x.grad()[i0 + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            });
        }
        return out;
    }

    // ---- fused causal attention ----------------------------------------------

    // q, k, v: [n_windows * window_len, d]; rows are windows stacked in order.
    // Query row i attends to key rows j <= i within the same window, skipping
    // rows where key_valid is 0 (left padding). Padded query rows output zero.
    Tensor causal_attention(Tensor q, Tensor k, Tensor v, std::size_t n_windows,
                            std::size_t window_len, std::size_t n_heads,
                            const std::vector<std::uint8_t>& key_valid) {
        const std::size_t rows = n_windows * window_len;
        const std::size_t d = q.cols();
        require(q.shape() == k.shape() && q.shape() == v.shape(),
                "causal_attention: q ", shape_str(q.shape()), ", k ", shape_str(k.shape()),
                ", v ", shape_str(v.shape()), " must match");
        require(q.rows() == rows, "causal_attention: ", q.rows(), " rows != ", n_windows, " x ",
                window_len);
        require(d % n_heads == 0, "causal_attention: width ", d, " not divisible by ", n_heads,
                " heads");
        require(key_valid.size() == rows, "causal_attention: key_valid length ",
                key_valid.size(), " != ", rows);

        const std::size_t dh = d / n_heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool needs_grad = q.requires_grad() || k.requires_grad() || v.requires_grad();
        Tensor out = make_out(q.shape(), needs_grad);

        // attention weights kept for the backward pass: one L x L matrix per
        // (window, head)
        auto probs = std::make_shared<std::vector<detail::RowMat>>();
        probs->reserve(n_windows * n_heads);

        for (std::size_t w = 0; w < n_windows; ++w) {
            const std::size_t r0 = w * window_len;
            for (std::size_t h = 0; h < n_heads; ++h) {
                auto Q = detail::as_mat(q).block(r0, h * dh, window_len, dh);
                auto K = detail::as_mat(k).block(r0, h * dh, window_len, dh);
                auto V = detail::as_mat(v).block(r0, h * dh, window_len, dh);
                detail::RowMat S = (Q * K.transpose()) * inv_sqrt_dh;
                detail::RowMat P = detail::RowMat::Zero(window_len, window_len);
                for (std::size_t i = 0; i < window_len; ++i) {
                    if (!key_valid[r0 + i]) {
                        continue; // padded query: zero attention, zero output
                    }
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j <= i; ++j) {
                        if (key_valid[r0 + j]) {
                            mx = std::max(mx, S(i, j));
                        }
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        if (key_valid[r0 + j]) {
                            P(i, j) = std::exp(S(i, j) - mx);
                            z += P(i, j);
                        }
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        P(i, j) /= z;
                    }
                }
                detail::as_mat_mut(out).block(r0, h * dh, window_len, dh).noalias() = P * V;
                if (needs_grad) {
                    probs->push_back(std::move(P));
                }
            }
        }

        if (needs_grad) {
            record([q, k, v, out, probs, n_windows, window_len, n_heads, dh,
                    inv_sqrt_dh]() mutable {
                for (std::size_t w = 0; w < n_windows; ++w) {
                    const std::size_t r0 = w * window_len;
                    for (std::size_t h = 0; h < n_heads; ++h) {
                        const detail::RowMat& P = (*probs)[w * n_heads + h];
                        auto Q = detail::as_mat(q).block(r0, h * dh, window_len, dh);
                        auto K = detail::as_mat(k).block(r0, h * dh, window_len, dh);
                        auto V = detail::as_mat(v).block(r0, h * dh, window_len, dh);
                        auto gO = detail::grad_cmat(out).block(r0, h * dh, window_len, dh);

                        if (v.requires_grad()) {
                            detail::grad_mat(v).block(r0, h * dh, window_len, dh).noalias() +=
                                P.transpose() * gO;
                        }
                        detail::RowMat dP = gO * V.transpose();
                        detail::RowMat dS = P.cwiseProduct(dP);
                        const Eigen::VectorXd row_dot = dS.rowwise().sum();
                        for (Eigen::Index i = 0; i < dS.rows(); ++i) {
                            for (Eigen::Index j = 0; j < dS.cols(); ++j) {
                                dS(i, j) -= P(i, j) * row_dot(i);
                            }
                        }
                        dS *= inv_sqrt_dh;
                        if (q.requires_grad()) {
                            detail::grad_mat(q).block(r0, h * dh, window_len, dh).noalias() +=
                                dS * K;
                        }
                        if (k.requires_grad()) {
                            detail::grad_mat(k).block(r0, h * dh, window_len, dh).noalias() +=
                                dS.transpose() * Q;
                        }
                    }
                }
            });
        }
        return out;
    }

    // ---- reverse sweep -------------------------------------------------------

    void backward(Tensor root) {
        require(root.size() == 1, "backward: root must be scalar, got ",
                shape_str(root.shape()));
        require(root.requires_grad(), "backward: root does not require grad");
        require(!ran_, "backward: tape already consumed");
        ran_ = true;
        root.grad()[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            (*it)();
        }
    }

    std::size_t num_ops() const { return ops_.size(); }

private:
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

    std::vector<std::function<void()>> ops_;
    bool ran_ = false;

    static Tensor make_out(std::vector<std::size_t> shape, bool requires_grad) {
        return Tensor::zeros(std::move(shape), requires_grad);
    }

    void record(std::function<void()> op) { ops_.push_back(std::move(op)); }

    Tensor binary(Tensor a, Tensor b, bool is_sub) {
        require(a.shape() == b.shape(), is_sub ? "sub" : "add", ": shape mismatch ",
                shape_str(a.shape()), " vs ", shape_str(b.shape()));
        Tensor out = make_out(a.shape(), a.requires_grad() || b.requires_grad());
        const double sign = is_sub ? -1.0 : 1.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out.value()[i] = a.value()[i] + sign * b.value()[i];
        }
        if (out.requires_grad()) {
            record([a, b, out, sign]() mutable {
                for (std::size_t i = 0; i < out.size(); ++i) {
                    if (a.requires_grad()) {
                        a.grad()[i] += out.grad()[i];
                    }
                    if (b.requires_grad()) {
                        b.grad()[i] += sign * out.grad()[i];
                    }
                }
            });
        }
        return out;
    }

    Tensor rowvec(Tensor a, Tensor v, bool multiply) {
        const std::size_t m = a.rows();
        const std::size_t n = a.cols();
        require(v.rows() == 1 && v.cols() == n, multiply ? "mul_rowvec" : "add_rowvec",
                ": vector ", shape_str(v.shape()), " does not broadcast over ",
                shape_str(a.shape()));
        Tensor out = make_out(a.shape(), a.requires_grad() || v.requires_grad());
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                out.value()[r * n + j] = multiply ? a.value()[r * n + j] * v.value()[j]
                                                  : a.value()[r * n + j] + v.value()[j];
            }
        }
        if (out.requires_grad()) {
            record([a, v, out, m, n, multiply]() mutable {
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = out.grad()[r * n + j];
                        if (a.requires_grad()) {
                            a.grad()[r * n + j] += multiply ? g * v.value()[j] : g;
                        }
                        if (v.requires_grad()) {
                            v.grad()[j] += multiply ? g * a.value()[r * n + j] : g;
                        }
                    }
                }
            });
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckIssue {
    std::string param;
    std::size_t coord = 0;
    double analytic = 0.0;
    double fd = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::vector<GradCheckIssue> failures;
    bool passed = true;
};

// Central finite differences against reverse-mode gradients. `loss_fn` must
// rebuild the graph from the given Tape and return a scalar; it must be a
// deterministic function of the parameter values (fix any dropout streams).
// Relative error uses max(1, |analytic|, |fd|) as denominator, so coordinates
// with tiny gradients are judged on absolute error.
template <typename LossFn>
GradCheckReport gradient_check(LossFn&& loss_fn, const std::vector<Tensor>& params, double h,
                               double tol) {
    require(h > 0.0, "gradient_check: step h must be positive, got ", h);
    zero_grads(params);
    {
        Tape tape;
        Tensor loss = loss_fn(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        analytic.push_back(p.grad());
    }

    auto eval = [&]() {
        Tape tape;
        return loss_fn(tape).scalar();
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p.value()[i];
            p.value()[i] = saved + h;
            const double f_plus = eval();
            p.value()[i] = saved - h;
            const double f_minus = eval();
            p.value()[i] = saved;

            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
            report.max_rel_error = std::max(report.max_rel_error, rel);
            ++report.coords_checked;
            if (rel > tol) {
                report.failures.push_back(GradCheckIssue{
                    p.name().empty() ? str("param", pi) : p.name(), i, a, fd, rel});
                report.passed = false;
            }
        }
    }
    return report;
}

} // namespace b2r::nn
