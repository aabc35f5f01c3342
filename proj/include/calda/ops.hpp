#pragma once

#include <algorithm>
#include <cmath>

#include "calda/tensor.hpp"

namespace calda {

// Primitive differentiable operations. Each forward has a matching backward
// that returns d(loss)/d(input) given d(loss)/d(output), under the chain rule.
// All functions are pure; gradients are computed manually (no tape).

enum class Padding { Same, Valid };

// y[i,j] = sum_k x[i,k] * w[k,j] + b[j]
inline Tensor affine_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "affine: bad ranks");
    check(x.shape[1] == w.shape[0], "affine: inner extents disagree");
    check(w.shape[1] == b.shape[0], "affine: bias extent disagrees");
    const std::size_t batch = x.shape[0], in = x.shape[1], out = w.shape[1];
    Tensor y({batch, out});
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = &x.data[i * in];
        double* yi = &y.data[i * out];
        for (std::size_t j = 0; j < out; ++j) yi[j] = b.data[j];
        for (std::size_t k = 0; k < in; ++k) {
            const double xv = xi[k];
            const double* wk = &w.data[k * out];
            for (std::size_t j = 0; j < out; ++j) yi[j] += xv * wk[j];
        }
    }
    return y;
}

struct AffineGrads {
    Tensor dx, dw, db;
};

inline AffineGrads affine_backward(const Tensor& x, const Tensor& w, const Tensor& g) {
    check(g.rank() == 2 && g.shape[0] == x.shape[0] && g.shape[1] == w.shape[1],
          "affine_backward: output grad shape mismatch");
    const std::size_t batch = x.shape[0], in = x.shape[1], out = w.shape[1];
    AffineGrads grads{Tensor({batch, in}), Tensor({in, out}), Tensor({out})};
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = &x.data[i * in];
        const double* gi = &g.data[i * out];
        double* dxi = &grads.dx.data[i * in];
        for (std::size_t j = 0; j < out; ++j) grads.db.data[j] += gi[j];
        for (std::size_t k = 0; k < in; ++k) {
            const double* wk = &w.data[k * out];
            double* dwk = &grads.dw.data[k * out];
            double acc = 0.0;
            for (std::size_t j = 0; j < out; ++j) {
                acc += gi[j] * wk[j];
                dwk[j] += gi[j] * xi[k];
            }
            dxi[k] = acc;
        }
    }
    return grads;
}

inline std::size_t conv1d_pad_left(std::size_t width) { return (width - 1) / 2; }

// Cross-correlation over the time axis. Same padding keeps time_out = time,
// with the extra zero on the right for even widths; valid gives
// time_out = time - width + 1.
inline Tensor conv1d_forward(const Tensor& x, const Tensor& kernels, const Tensor& bias,
                             Padding padding) {
    check(x.rank() == 3 && kernels.rank() == 3 && bias.rank() == 1, "conv1d: bad ranks");
    const std::size_t batch = x.shape[0], ch_in = x.shape[1], time = x.shape[2];
    const std::size_t ch_out = kernels.shape[0], width = kernels.shape[2];
    check(kernels.shape[1] == ch_in, "conv1d: kernel input-channel mismatch");
    check(bias.shape[0] == ch_out, "conv1d: bias extent mismatch");
    if (padding == Padding::Valid)
        check(width <= time, "conv1d: width exceeds time under valid padding");

    const std::size_t time_out = padding == Padding::Same ? time : time - width + 1;
    // offset of x index relative to output index t: x_t = t + w - pad_left
    const std::ptrdiff_t pad = padding == Padding::Same
                                   ? static_cast<std::ptrdiff_t>(conv1d_pad_left(width))
                                   : 0;
    Tensor y({batch, ch_out, time_out});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < ch_out; ++o) {
            double* yo = &y.data[(b * ch_out + o) * time_out];
            for (std::size_t t = 0; t < time_out; ++t) yo[t] = bias.data[o];
            for (std::size_t c = 0; c < ch_in; ++c) {
                const double* xc = &x.data[(b * ch_in + c) * time];
                const double* kc = &kernels.data[(o * ch_in + c) * width];
                for (std::size_t w = 0; w < width; ++w) {
                    const double kv = kc[w];
                    if (kv == 0.0) continue;
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(w) - pad;
                    const std::size_t t_lo =
                        off < 0 ? static_cast<std::size_t>(-off) : 0;
                    const std::size_t t_hi = std::min(
                        time_out,
                        off > static_cast<std::ptrdiff_t>(time) ? std::size_t{0}
                            : static_cast<std::size_t>(static_cast<std::ptrdiff_t>(time) - off));
                    for (std::size_t t = t_lo; t < t_hi; ++t)
                        yo[t] += kv * xc[static_cast<std::size_t>(
                                      static_cast<std::ptrdiff_t>(t) + off)];
                }
            }
        }
    }
    return y;
}

struct Conv1dGrads {
    Tensor dx, dkernels, dbias;
};

inline Conv1dGrads conv1d_backward(const Tensor& x, const Tensor& kernels, const Tensor& g,
                                   Padding padding) {
    const std::size_t batch = x.shape[0], ch_in = x.shape[1], time = x.shape[2];
    const std::size_t ch_out = kernels.shape[0], width = kernels.shape[2];
    const std::size_t time_out = padding == Padding::Same ? time : time - width + 1;
    check(g.rank() == 3 && g.shape[0] == batch && g.shape[1] == ch_out &&
              g.shape[2] == time_out,
          "conv1d_backward: output grad shape mismatch");
    const std::ptrdiff_t pad = padding == Padding::Same
                                   ? static_cast<std::ptrdiff_t>(conv1d_pad_left(width))
                                   : 0;
    Conv1dGrads grads{Tensor(x.shape), Tensor(kernels.shape), Tensor({ch_out})};
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < ch_out; ++o) {
            const double* go = &g.data[(b * ch_out + o) * time_out];
            for (std::size_t t = 0; t < time_out; ++t) grads.dbias.data[o] += go[t];
            for (std::size_t c = 0; c < ch_in; ++c) {
                const double* xc = &x.data[(b * ch_in + c) * time];
                const double* kc = &kernels.data[(o * ch_in + c) * width];
                double* dxc = &grads.dx.data[(b * ch_in + c) * time];
                double* dkc = &grads.dkernels.data[(o * ch_in + c) * width];
                for (std::size_t w = 0; w < width; ++w) {
                    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(w) - pad;
                    const std::size_t t_lo =
                        off < 0 ? static_cast<std::size_t>(-off) : 0;
                    const std::size_t t_hi = std::min(
                        time_out,
                        off > static_cast<std::ptrdiff_t>(time) ? std::size_t{0}
                            : static_cast<std::size_t>(static_cast<std::ptrdiff_t>(time) - off));
                    const double kv = kc[w];
                    double dk = 0.0;
                    for (std::size_t t = t_lo; t < t_hi; ++t) {
                        const std::size_t xt = static_cast<std::size_t>(
                            static_cast<std::ptrdiff_t>(t) + off);
                        dk += go[t] * xc[xt];
                        dxc[xt] += go[t] * kv;
                    }
                    dkc[w] += dk;
                }
            }
        }
    }
    return grads;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& g) {
    check_same_shape(x, g, "relu_backward");
    Tensor dx(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = x.data[i] > 0.0 ? g.data[i] : 0.0;
    return dx;
}

// Per-channel arithmetic mean over time; length-agnostic by construction.
inline Tensor global_avg_pool(const Tensor& x) {
    check(x.rank() == 3, "global_avg_pool: expected [batch, ch, time]");
    const std::size_t batch = x.shape[0], ch = x.shape[1], time = x.shape[2];
    check(time >= 1, "global_avg_pool: time extent must be >= 1");
    Tensor y({batch, ch});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            const double* xc = &x.data[(b * ch + c) * time];
            double acc = 0.0;
            for (std::size_t t = 0; t < time; ++t) acc += xc[t];
            y.at(b, c) = acc / static_cast<double>(time);
        }
    return y;
}

inline Tensor gap_backward(const std::vector<std::size_t>& input_shape, const Tensor& g) {
    check(input_shape.size() == 3, "gap_backward: expected rank-3 input shape");
    const std::size_t batch = input_shape[0], ch = input_shape[1], time = input_shape[2];
    check(g.rank() == 2 && g.shape[0] == batch && g.shape[1] == ch,
          "gap_backward: output grad shape mismatch");
    Tensor dx(input_shape);
    const double inv = 1.0 / static_cast<double>(time);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            const double gv = g.at(b, c) * inv;
            double* dxc = &dx.data[(b * ch + c) * time];
            for (std::size_t t = 0; t < time; ++t) dxc[t] = gv;
        }
    return dx;
}

// Row-wise log-softmax with max subtraction for stability.
inline Tensor log_softmax(const Tensor& x) {
    check(x.rank() == 2, "log_softmax: expected [batch, classes]");
    check(x.all_finite(), "log_softmax: non-finite input");
    const std::size_t batch = x.shape[0], classes = x.shape[1];
    Tensor y(x.shape);
    for (std::size_t i = 0; i < batch; ++i) {
        const double* xi = &x.data[i * classes];
        double* yi = &y.data[i * classes];
        double mx = xi[0];
        for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, xi[j]);
        double lse = 0.0;
        for (std::size_t j = 0; j < classes; ++j) lse += std::exp(xi[j] - mx);
        lse = std::log(lse);
        for (std::size_t j = 0; j < classes; ++j) yi[j] = xi[j] - mx - lse;
    }
    return y;
}

// d loss/d logits given d loss/d log_probs: g - softmax * sum(g) per row.
inline Tensor log_softmax_backward(const Tensor& log_probs, const Tensor& g) {
    check_same_shape(log_probs, g, "log_softmax_backward");
    const std::size_t batch = log_probs.shape[0], classes = log_probs.shape[1];
    Tensor dx(log_probs.shape);
    for (std::size_t i = 0; i < batch; ++i) {
        const double* li = &log_probs.data[i * classes];
        const double* gi = &g.data[i * classes];
        double* di = &dx.data[i * classes];
        double gsum = 0.0;
        for (std::size_t j = 0; j < classes; ++j) gsum += gi[j];
        for (std::size_t j = 0; j < classes; ++j) di[j] = gi[j] - std::exp(li[j]) * gsum;
    }
    return dx;
}

inline double norm2(const double* v, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += v[i] * v[i];
    return std::sqrt(acc);
}

// a.b / (|a||b|). A zero-norm embedding indicates a dead contrastive head,
// so it is an error rather than defined as 0.
inline double cosine_similarity(const double* a, const double* b, std::size_t n) {
    const double na = norm2(a, n), nb = norm2(b, n);
    check(na > 0.0 && nb > 0.0, "cosine_similarity: zero-norm input");
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += a[i] * b[i];
    return dot / (na * nb);
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    check(a.rank() == 1 && b.rank() == 1 && a.shape[0] == b.shape[0],
          "cosine_similarity: expected equal-length vectors");
    return cosine_similarity(a.data.data(), b.data.data(), a.shape[0]);
}

// Accumulate gradients of s = sim(a, b) into da and db, scaled by g.
inline void cosine_similarity_backward(const double* a, const double* b, std::size_t n,
                                       double g, double* da, double* db) {
    const double na = norm2(a, n), nb = norm2(b, n);
    check(na > 0.0 && nb > 0.0, "cosine_similarity_backward: zero-norm input");
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += a[i] * b[i];
    const double s = dot / (na * nb);
    for (std::size_t i = 0; i < n; ++i) {
        da[i] += g * (b[i] / (na * nb) - s * a[i] / (na * na));
        db[i] += g * (a[i] / (na * nb) - s * b[i] / (nb * nb));
    }
}

}  // namespace calda
