#include "fedseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define FEDSEG_USE_AVX2 1
#endif

namespace fedseg {
namespace {

// ---- Dense kernels ----------------------------------------------------------
// Reductions use a fixed accumulation order per build (lane sums combined in
// ascending lane index), so results are reproducible run to run and do not
// depend on the thread count.

inline void axpy(float* dst, const float* src, float w, int len) {
    int i = 0;
#ifdef FEDSEG_USE_AVX2
    const __m256 vw = _mm256_set1_ps(w);
    for (; i + 8 <= len; i += 8) {
        __m256 d = _mm256_loadu_ps(dst + i);
        __m256 s = _mm256_loadu_ps(src + i);
        _mm256_storeu_ps(dst + i, _mm256_fmadd_ps(vw, s, d));
    }
#endif
    for (; i < len; ++i) dst[i] += w * src[i];
}

inline double dot(const float* a, const float* b, int len) {
    int i = 0;
#ifdef FEDSEG_USE_AVX2
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    for (; i + 16 <= len; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    for (; i + 8 <= len; i += 8)
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    float lanes0[8], lanes1[8];
    _mm256_storeu_ps(lanes0, acc0);
    _mm256_storeu_ps(lanes1, acc1);
    double sum = 0.0;
    for (int k = 0; k < 8; ++k) sum += static_cast<double>(lanes0[k]);
    for (int k = 0; k < 8; ++k) sum += static_cast<double>(lanes1[k]);
#else
    double sum = 0.0;
#endif
    for (; i < len; ++i) sum += static_cast<double>(a[i]) * b[i];
    return sum;
}

// dst[y, x] += w * src[y + dy, x + dx] over the in-bounds overlap of two HxW
// planes. Out-of-bounds source reads are zero padding, i.e. skipped.
inline void axpy_shift(float* dst, const float* src, float w, int dy, int dx, int H, int W) {
    const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
    const int len = x1 - x0;
    if (len <= 0) return;
    for (int y = y0; y < y1; ++y)
        axpy(dst + static_cast<std::size_t>(y) * W + x0,
             src + static_cast<std::size_t>(y + dy) * W + (x0 + dx), w, len);
}

// sum over valid (y, x) of a[y, x] * b[y + dy, x + dx].
inline double dot_shift(const float* a, const float* b, int dy, int dx, int H, int W) {
    const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
    const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
    const int len = x1 - x0;
    if (len <= 0) return 0.0;
    double sum = 0.0;
    for (int y = y0; y < y1; ++y)
        sum += dot(a + static_cast<std::size_t>(y) * W + x0,
                   b + static_cast<std::size_t>(y + dy) * W + (x0 + dx), len);
    return sum;
}

void check_tracked(const Tensor& t, const char* op, const char* role) {
    if (t.requires_grad && t.id < 0)
        throw UsageError(std::string(op) + ": " + role +
                         " requires grad but is not tracked on the tape");
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw ConfigError(std::string(op) + ": " + detail);
}

}  // namespace

// ---- Shape / Tensor ----------------------------------------------------------

std::string Shape::str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
}

Tensor Tensor::zeros(Shape s, bool requires_grad) {
    return from_data(s, std::vector<float>(s.numel(), 0.0f), requires_grad);
}

Tensor Tensor::full(Shape s, float value, bool requires_grad) {
    return from_data(s, std::vector<float>(s.numel(), value), requires_grad);
}

Tensor Tensor::from_data(Shape s, std::vector<float> data, bool requires_grad) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
        throw ConfigError("tensor shape must be positive, got " + s.str());
    if (data.size() != s.numel())
        throw ConfigError("tensor data size " + std::to_string(data.size()) +
                          " does not match shape " + s.str());
    Tensor t;
    t.shape = s;
    t.requires_grad = requires_grad;
    t.data_ = std::make_shared<std::vector<float>>(std::move(data));
    return t;
}

Tensor Tensor::scalar(float value) {
    return from_data({1, 1, 1, 1}, {value}, false);
}

float* Tensor::mutable_data() {
    if (!data_) throw UsageError("mutable_data on an empty tensor");
    if (data_.use_count() != 1)
        throw UsageError("mutable_data on shared tensor storage");
    return data_->data();
}

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape.str());
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (float v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- GradientStore / Tape ----------------------------------------------------

const std::vector<float>* GradientStore::find(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size()) return nullptr;
    const auto& g = grads_[static_cast<std::size_t>(id)];
    return g.empty() ? nullptr : &g;
}

std::vector<float> GradientStore::get(int id, std::size_t numel) const {
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size())
        throw UsageError("gradient requested for untracked tensor id " + std::to_string(id));
    const auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) return std::vector<float>(numel, 0.0f);
    if (g.size() != numel)
        throw UsageError("gradient size mismatch for id " + std::to_string(id));
    return g;
}

std::vector<float>& GradientStore::ensure(int id, std::size_t numel) {
    if (id < 0 || static_cast<std::size_t>(id) >= grads_.size())
        throw UsageError("gradient store has no slot for id " + std::to_string(id));
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(numel, 0.0f);
    return g;
}

void GradientStore::add(int id, std::size_t numel, const float* src, float scale) {
    auto& g = ensure(id, numel);
    if (scale == 1.0f)
        axpy(g.data(), src, 1.0f, static_cast<int>(numel));
    else
        axpy(g.data(), src, scale, static_cast<int>(numel));
}

void Tape::track_leaf(Tensor& t) {
    if (!t.requires_grad) throw UsageError("track_leaf on a tensor without requires_grad");
    if (t.id >= 0) throw UsageError("track_leaf on an already tracked tensor");
    t.id = alloc_id();
}

GradientStore Tape::backward(const Tensor& loss) const {
    if (loss.id < 0 || loss.id >= next_id_)
        throw UsageError("backward root is not tracked on this tape");
    if (loss.numel() != 1) throw UsageError("backward root must be a scalar");
    GradientStore gs(static_cast<std::size_t>(next_id_));
    gs.ensure(loss.id, 1)[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        const auto* gout = gs.find(it->out_id);
        if (!gout) continue;  // not on a path to the root
        it->back(*gout, gs);
    }
    return gs;
}

// ---- Ops ----------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, Tape* tape) {
    const Shape is = input.shape, ws = weight.shape, bs = bias.shape;
    const int Cout = ws.n, Cin = ws.c, kh = ws.h, kw = ws.w;
    if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3))
        shape_error("conv2d", "kernel sides must be 1 or 3, got " + ws.str());
    if (is.c != Cin)
        shape_error("conv2d", "input channels " + std::to_string(is.c) +
                                  " do not match weight " + ws.str());
    if (bs.n != 1 || bs.c != Cout || bs.h != 1 || bs.w != 1)
        shape_error("conv2d", "bias shape " + bs.str() + " must be (1, " +
                                  std::to_string(Cout) + ", 1, 1)");
    const int N = is.n, H = is.h, W = is.w;
    const int ph = kh / 2, pw = kw / 2;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    Tensor out = Tensor::zeros({N, Cout, H, W});
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        const float* wp = weight.data();
        const float* bp = bias.data();
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Cout; ++co) {
                float* o = op + (static_cast<std::size_t>(n) * Cout + co) * plane;
                std::fill(o, o + plane, bp[co]);
                for (int ci = 0; ci < Cin; ++ci) {
                    const float* in_pl = ip + (static_cast<std::size_t>(n) * Cin + ci) * plane;
                    const float* wk = wp + ((static_cast<std::size_t>(co) * Cin + ci) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx)
                            axpy_shift(o, in_pl, wk[ky * kw + kx], ky - ph, kx - pw, H, W);
                }
            }
        }
    }

    const bool rg = input.requires_grad || weight.requires_grad || bias.requires_grad;
    out.requires_grad = rg;
    if (tape && rg) {
        check_tracked(input, "conv2d", "input");
        check_tracked(weight, "conv2d", "weight");
        check_tracked(bias, "conv2d", "bias");
        out.id = tape->alloc_id();
        Tensor in_c = input, w_c = weight;
        const int out_id = out.id;
        tape->record("conv2d", out_id, [in_c, w_c, N, Cout, Cin, kh, kw, ph, pw, H, W, plane,
                                        in_id = input.id, w_id = weight.id, b_id = bias.id,
                                        in_rg = input.requires_grad, w_rg = weight.requires_grad,
                                        b_rg = bias.requires_grad](
                                           const std::vector<float>& gout, GradientStore& gs) {
            if (in_rg) {
                auto& gin = gs.ensure(in_id, in_c.numel());
                const float* wp = w_c.data();
                for (int n = 0; n < N; ++n)
                    for (int ci = 0; ci < Cin; ++ci) {
                        float* d = gin.data() + (static_cast<std::size_t>(n) * Cin + ci) * plane;
                        for (int co = 0; co < Cout; ++co) {
                            const float* g =
                                gout.data() + (static_cast<std::size_t>(n) * Cout + co) * plane;
                            const float* wk =
                                wp + ((static_cast<std::size_t>(co) * Cin + ci) * kh) * kw;
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx)
                                    axpy_shift(d, g, wk[ky * kw + kx], ph - ky, pw - kx, H, W);
                        }
                    }
            }
            if (w_rg) {
                auto& gw = gs.ensure(w_id, w_c.numel());
                const float* ip = in_c.data();
                for (int co = 0; co < Cout; ++co)
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                double acc = 0.0;
                                for (int n = 0; n < N; ++n) {
                                    const float* g =
                                        gout.data() +
                                        (static_cast<std::size_t>(n) * Cout + co) * plane;
                                    const float* in_pl =
                                        ip + (static_cast<std::size_t>(n) * Cin + ci) * plane;
                                    acc += dot_shift(g, in_pl, ky - ph, kx - pw, H, W);
                                }
                                gw[((static_cast<std::size_t>(co) * Cin + ci) * kh + ky) * kw +
                                   kx] += static_cast<float>(acc);
                            }
            }
            if (b_rg) {
                auto& gb = gs.ensure(b_id, static_cast<std::size_t>(Cout));
                for (int co = 0; co < Cout; ++co) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const float* g =
                            gout.data() + (static_cast<std::size_t>(n) * Cout + co) * plane;
                        for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    }
                    gb[co] += static_cast<float>(acc);
                }
            }
        });
    }
    return out;
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, BnStats& stats,
                  BnMode mode, float momentum, float eps, Tape* tape) {
    const Shape is = input.shape;
    const int N = is.n, C = is.c, H = is.h, W = is.w;
    if (gamma.shape != Shape{1, C, 1, 1} || beta.shape != Shape{1, C, 1, 1})
        shape_error("batch_norm", "gamma/beta must be (1, " + std::to_string(C) + ", 1, 1)");
    if (stats.mean.size() != static_cast<std::size_t>(C) ||
        stats.var.size() != static_cast<std::size_t>(C))
        shape_error("batch_norm", "running stats size does not match channels");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t per_ch = static_cast<std::size_t>(N) * plane;

    std::vector<float> mean_c(C), inv_c(C);
    if (mode == BnMode::Train) {
        if (per_ch < 2)
            throw DegenerateBatchError(
                "batch_norm train mode needs at least 2 values per channel, got " +
                std::to_string(per_ch));
        const float* ip = input.data();
        for (int c = 0; c < C; ++c) {
            double sum = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = ip + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            const double mu = sum / static_cast<double>(per_ch);
            double ssq = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = ip + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mu;
                    ssq += d * d;
                }
            }
            const double var_b = ssq / static_cast<double>(per_ch);
            const double var_u = ssq / static_cast<double>(per_ch - 1);
            mean_c[c] = static_cast<float>(mu);
            inv_c[c] = static_cast<float>(1.0 / std::sqrt(var_b + eps));
            stats.mean[c] = static_cast<float>((1.0 - momentum) * stats.mean[c] + momentum * mu);
            stats.var[c] = static_cast<float>((1.0 - momentum) * stats.var[c] + momentum * var_u);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean_c[c] = stats.mean[c];
            const float v = std::max(stats.var[c], 0.0f);
            inv_c[c] = 1.0f / std::sqrt(v + eps);
        }
    }

    Tensor xhat = Tensor::zeros(is);
    Tensor out = Tensor::zeros(is);
    {
        float* xh = xhat.mutable_data();
        float* op = out.mutable_data();
        const float* ip = input.data();
        const float* gp = gamma.data();
        const float* bp = beta.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                const float mu = mean_c[c], inv = inv_c[c], g = gp[c], b = bp[c];
                for (std::size_t i = 0; i < plane; ++i) {
                    const float h = (ip[base + i] - mu) * inv;
                    xh[base + i] = h;
                    op[base + i] = g * h + b;
                }
            }
    }

    const bool rg = input.requires_grad || gamma.requires_grad || beta.requires_grad;
    out.requires_grad = rg;
    if (tape && rg) {
        check_tracked(input, "batch_norm", "input");
        check_tracked(gamma, "batch_norm", "gamma");
        check_tracked(beta, "batch_norm", "beta");
        out.id = tape->alloc_id();
        Tensor xh_c = xhat, g_c = gamma;
        tape->record("batch_norm", out.id,
                     [xh_c, g_c, inv_c, mode, N, C, plane, per_ch, in_id = input.id,
                      g_id = gamma.id, b_id = beta.id, in_rg = input.requires_grad,
                      g_rg = gamma.requires_grad, b_rg = beta.requires_grad](
                         const std::vector<float>& gout, GradientStore& gs) {
                         const float* xh = xh_c.data();
                         const float* gp = g_c.data();
                         for (int c = 0; c < C; ++c) {
                             double s_g = 0.0, s_gx = 0.0;
                             for (int n = 0; n < N; ++n) {
                                 const std::size_t base =
                                     (static_cast<std::size_t>(n) * C + c) * plane;
                                 for (std::size_t i = 0; i < plane; ++i) {
                                     const double g = gout[base + i];
                                     s_g += g;
                                     s_gx += g * xh[base + i];
                                 }
                             }
                             if (g_rg) gs.ensure(g_id, C)[c] += static_cast<float>(s_gx);
                             if (b_rg) gs.ensure(b_id, C)[c] += static_cast<float>(s_g);
                             if (in_rg) {
                                 auto& gin = gs.ensure(in_id, xh_c.numel());
                                 const double inv = inv_c[c], gam = gp[c];
                                 const double m = static_cast<double>(per_ch);
                                 for (int n = 0; n < N; ++n) {
                                     const std::size_t base =
                                         (static_cast<std::size_t>(n) * C + c) * plane;
                                     for (std::size_t i = 0; i < plane; ++i) {
                                         const double g = gam * gout[base + i];
                                         double dx;
                                         if (mode == BnMode::Train)
                                             dx = inv * (g - gam * s_g / m -
                                                         xh[base + i] * gam * s_gx / m);
                                         else
                                             dx = inv * g;
                                         gin[base + i] += static_cast<float>(dx);
                                     }
                                 }
                             }
                         }
                     });
    }
    return out;
}

Tensor relu(const Tensor& input, Tape* tape) {
    Tensor out = Tensor::zeros(input.shape);
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        const std::size_t n = input.numel();
        for (std::size_t i = 0; i < n; ++i) op[i] = ip[i] > 0.0f ? ip[i] : 0.0f;
    }
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "relu", "input");
        out.id = tape->alloc_id();
        Tensor in_c = input;
        tape->record("relu", out.id,
                     [in_c, in_id = input.id](const std::vector<float>& gout, GradientStore& gs) {
                         auto& gin = gs.ensure(in_id, in_c.numel());
                         const float* ip = in_c.data();
                         for (std::size_t i = 0; i < gout.size(); ++i)
                             if (ip[i] > 0.0f) gin[i] += gout[i];
                     });
    }
    return out;
}

Tensor max_pool2(const Tensor& input, Tape* tape) {
    const Shape is = input.shape;
    if (is.h % 2 != 0 || is.w % 2 != 0)
        shape_error("max_pool2", "spatial size must be even, got " + is.str());
    const int N = is.n, C = is.c, H = is.h, W = is.w, Ho = H / 2, Wo = W / 2;
    Tensor out = Tensor::zeros({N, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::uint32_t>>(out.numel());
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        std::size_t o = 0;
        for (int nc = 0; nc < N * C; ++nc) {
            const float* pl = ip + static_cast<std::size_t>(nc) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int x = 0; x < Wo; ++x, ++o) {
                    std::uint32_t best = static_cast<std::uint32_t>((2 * y) * W + 2 * x);
                    float bv = pl[best];
                    const int offs[3] = {(2 * y) * W + 2 * x + 1, (2 * y + 1) * W + 2 * x,
                                         (2 * y + 1) * W + 2 * x + 1};
                    for (int k = 0; k < 3; ++k) {
                        const float v = pl[offs[k]];
                        if (v > bv) {
                            bv = v;
                            best = static_cast<std::uint32_t>(offs[k]);
                        }
                    }
                    op[o] = bv;
                    (*arg)[o] = static_cast<std::uint32_t>(nc) * H * W + best;
                }
        }
    }
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "max_pool2", "input");
        out.id = tape->alloc_id();
        const std::size_t in_numel = input.numel();
        tape->record("max_pool2", out.id,
                     [arg, in_numel, in_id = input.id](const std::vector<float>& gout,
                                                       GradientStore& gs) {
                         auto& gin = gs.ensure(in_id, in_numel);
                         for (std::size_t i = 0; i < gout.size(); ++i)
                             gin[(*arg)[i]] += gout[i];
                     });
    }
    return out;
}

Tensor upsample_nearest2(const Tensor& input, Tape* tape) {
    const Shape is = input.shape;
    const int N = is.n, C = is.c, H = is.h, W = is.w;
    Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        for (int nc = 0; nc < N * C; ++nc) {
            const float* pl = ip + static_cast<std::size_t>(nc) * H * W;
            float* o = op + static_cast<std::size_t>(nc) * 4 * H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const float v = pl[y * W + x];
                    const std::size_t b = static_cast<std::size_t>(2 * y) * (2 * W) + 2 * x;
                    o[b] = v;
                    o[b + 1] = v;
                    o[b + 2 * W] = v;
                    o[b + 2 * W + 1] = v;
                }
        }
    }
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "upsample_nearest2", "input");
        out.id = tape->alloc_id();
        const std::size_t in_numel = input.numel();
        tape->record("upsample_nearest2", out.id,
                     [N, C, H, W, in_numel, in_id = input.id](const std::vector<float>& gout,
                                                              GradientStore& gs) {
                         auto& gin = gs.ensure(in_id, in_numel);
                         for (int nc = 0; nc < N * C; ++nc) {
                             const float* g = gout.data() + static_cast<std::size_t>(nc) * 4 * H * W;
                             float* d = gin.data() + static_cast<std::size_t>(nc) * H * W;
                             for (int y = 0; y < H; ++y)
                                 for (int x = 0; x < W; ++x) {
                                     const std::size_t b =
                                         static_cast<std::size_t>(2 * y) * (2 * W) + 2 * x;
                                     d[y * W + x] +=
                                         g[b] + g[b + 1] + g[b + 2 * W] + g[b + 2 * W + 1];
                                 }
                         }
                     });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape) {
    const Shape as = a.shape, bs = b.shape;
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        shape_error("concat_channels", "mismatched shapes " + as.str() + " and " + bs.str());
    const int N = as.n, Ca = as.c, Cb = bs.c, H = as.h, W = as.w;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out = Tensor::zeros({N, Ca + Cb, H, W});
    {
        float* op = out.mutable_data();
        const float* ap = a.data();
        const float* bp = b.data();
        for (int n = 0; n < N; ++n) {
            std::memcpy(op + static_cast<std::size_t>(n) * (Ca + Cb) * plane,
                        ap + static_cast<std::size_t>(n) * Ca * plane,
                        sizeof(float) * Ca * plane);
            std::memcpy(op + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                        bp + static_cast<std::size_t>(n) * Cb * plane,
                        sizeof(float) * Cb * plane);
        }
    }
    const bool rg = a.requires_grad || b.requires_grad;
    out.requires_grad = rg;
    if (tape && rg) {
        check_tracked(a, "concat_channels", "first input");
        check_tracked(b, "concat_channels", "second input");
        out.id = tape->alloc_id();
        const std::size_t a_numel = a.numel(), b_numel = b.numel();
        tape->record("concat_channels", out.id,
                     [N, Ca, Cb, plane, a_numel, b_numel, a_id = a.id, b_id = b.id,
                      a_rg = a.requires_grad, b_rg = b.requires_grad](
                         const std::vector<float>& gout, GradientStore& gs) {
                         if (a_rg) {
                             auto& ga = gs.ensure(a_id, a_numel);
                             for (int n = 0; n < N; ++n)
                                 axpy(ga.data() + static_cast<std::size_t>(n) * Ca * plane,
                                      gout.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane,
                                      1.0f, static_cast<int>(Ca * plane));
                         }
                         if (b_rg) {
                             auto& gb = gs.ensure(b_id, b_numel);
                             for (int n = 0; n < N; ++n)
                                 axpy(gb.data() + static_cast<std::size_t>(n) * Cb * plane,
                                      gout.data() +
                                          (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                                      1.0f, static_cast<int>(Cb * plane));
                         }
                     });
    }
    return out;
}

Tensor sigmoid(const Tensor& input, Tape* tape) {
    Tensor out = Tensor::zeros(input.shape);
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        const std::size_t n = input.numel();
        for (std::size_t i = 0; i < n; ++i) op[i] = 1.0f / (1.0f + std::exp(-ip[i]));
    }
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "sigmoid", "input");
        out.id = tape->alloc_id();
        Tensor out_c = out;
        tape->record("sigmoid", out.id,
                     [out_c, in_id = input.id](const std::vector<float>& gout, GradientStore& gs) {
                         auto& gin = gs.ensure(in_id, out_c.numel());
                         const float* y = out_c.data();
                         for (std::size_t i = 0; i < gout.size(); ++i)
                             gin[i] += gout[i] * y[i] * (1.0f - y[i]);
                     });
    }
    return out;
}

Tensor bce_loss(const Tensor& prob_map, const Tensor& target_mask, Tape* tape) {
    if (!(prob_map.shape == target_mask.shape))
        shape_error("bce_loss", "prediction shape " + prob_map.shape.str() +
                                    " does not match target " + target_mask.shape.str());
    const std::size_t n = prob_map.numel();
    const float lo = kBceClamp, hi = 1.0f - kBceClamp;
    const float* pp = prob_map.data();
    const float* tp = target_mask.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const float y = tp[i];
        if (y != 0.0f && y != 1.0f)
            throw DataError("bce_loss target value " + std::to_string(y) +
                            " at index " + std::to_string(i) + " is not 0 or 1");
        const double p = std::clamp(pp[i], lo, hi);
        acc -= y != 0.0f ? std::log(p) : std::log(1.0 - p);
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    out.requires_grad = prob_map.requires_grad;
    if (tape && prob_map.requires_grad) {
        check_tracked(prob_map, "bce_loss", "prediction");
        out.id = tape->alloc_id();
        Tensor p_c = prob_map, t_c = target_mask;
        tape->record("bce_loss", out.id,
                     [p_c, t_c, n, lo, hi, p_id = prob_map.id](const std::vector<float>& gout,
                                                               GradientStore& gs) {
                         auto& gin = gs.ensure(p_id, n);
                         const float* pp = p_c.data();
                         const float* tp = t_c.data();
                         const double g0 = static_cast<double>(gout[0]) / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                             // Zero slope outside the clamp window, matching the
                             // flat forward value there.
                             if (pp[i] < lo || pp[i] > hi) continue;
                             const double p = pp[i];
                             gin[i] += static_cast<float>(g0 * (p - tp[i]) / (p * (1.0 - p)));
                         }
                     });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    if (!(a.shape == b.shape))
        shape_error("add", "mismatched shapes " + a.shape.str() + " and " + b.shape.str());
    const std::size_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape);
    {
        float* op = out.mutable_data();
        const float* ap = a.data();
        const float* bp = b.data();
        for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
    }
    const bool rg = a.requires_grad || b.requires_grad;
    out.requires_grad = rg;
    if (tape && rg) {
        check_tracked(a, "add", "first input");
        check_tracked(b, "add", "second input");
        out.id = tape->alloc_id();
        tape->record("add", out.id,
                     [n, a_id = a.id, b_id = b.id, a_rg = a.requires_grad,
                      b_rg = b.requires_grad](const std::vector<float>& gout, GradientStore& gs) {
                         if (a_rg) gs.add(a_id, n, gout.data());
                         if (b_rg) gs.add(b_id, n, gout.data());
                     });
    }
    return out;
}

Tensor scale(const Tensor& input, float factor, Tape* tape) {
    const std::size_t n = input.numel();
    Tensor out = Tensor::zeros(input.shape);
    {
        float* op = out.mutable_data();
        const float* ip = input.data();
        for (std::size_t i = 0; i < n; ++i) op[i] = factor * ip[i];
    }
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "scale", "input");
        out.id = tape->alloc_id();
        tape->record("scale", out.id,
                     [n, factor, in_id = input.id](const std::vector<float>& gout,
                                                   GradientStore& gs) {
                         gs.add(in_id, n, gout.data(), factor);
                     });
    }
    return out;
}

Tensor sum_all(const Tensor& input, Tape* tape) {
    const std::size_t n = input.numel();
    const float* ip = input.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += ip[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    out.requires_grad = input.requires_grad;
    if (tape && input.requires_grad) {
        check_tracked(input, "sum_all", "input");
        out.id = tape->alloc_id();
        tape->record("sum_all", out.id,
                     [n, in_id = input.id](const std::vector<float>& gout, GradientStore& gs) {
                         auto& gin = gs.ensure(in_id, n);
                         for (std::size_t i = 0; i < n; ++i) gin[i] += gout[0];
                     });
    }
    return out;
}

}  // namespace fedseg
