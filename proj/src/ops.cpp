#include "longiseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>

#include "autodiff_internal.hpp"
#include "longiseg/kernels.hpp"
#include "longiseg/threading.hpp"

namespace longiseg {

namespace {

namespace lk = longiseg::kernels;

using detail::attach;
using detail::new_node;
using detail::NodePtr;

void require(bool cond, const std::string& msg) {
    if (!cond)
        throw ShapeError(msg);
}

template <typename T>
void check_rank5(const char* op, const Tensor<T>& x) {
    require(x.defined() && x.shape().size() == 5,
            std::string(op) + ": expected a rank-5 N×C×D×H×W tensor, got " +
                (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
}

/// Chunked elementwise loop so big maps use every worker; chunks are
/// contiguous, keeping results identical at any worker count.
template <typename Fn>
void for_chunks(std::int64_t n, Fn&& fn) {
    parallel_for(n, [&](std::int64_t b, std::int64_t e) { fn(b, e); });
}

// ------------------------------------------------------------------ conv3d

struct Conv3dDims {
    std::int64_t N, Cin, D, H, W, Cout, k, outD, outH, outW;
    int s, p;
    std::int64_t in_spatial() const { return D * H * W; }
    std::int64_t out_spatial() const { return outD * outH * outW; }
};

std::int64_t conv_out_extent(std::int64_t in, int k, int s, int p) {
    return (in + 2 * std::int64_t(p) - k) / s + 1;
}

template <typename T>
Conv3dDims conv3d_dims(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                       int padding) {
    check_rank5("conv3d", x);
    require(w.defined() && w.shape().size() == 5,
            "conv3d: weight must be rank-5 C_out×C_in×k×k×k, got " +
                (w.defined() ? shape_str(w.shape()) : std::string("undefined")));
    require(stride >= 1, "conv3d: stride must be >= 1");
    require(padding >= 0, "conv3d: padding must be >= 0");
    Conv3dDims d;
    d.N = x.dim(0);
    d.Cin = x.dim(1);
    d.D = x.dim(2);
    d.H = x.dim(3);
    d.W = x.dim(4);
    d.Cout = w.dim(0);
    d.k = w.dim(2);
    d.s = stride;
    d.p = padding;
    require(w.dim(1) == d.Cin, "conv3d: weight expects C_in=" + std::to_string(w.dim(1)) +
                                   ", input has C_in=" + std::to_string(d.Cin));
    require(w.dim(3) == d.k && w.dim(4) == d.k,
            "conv3d: kernel must be cubic, got " + shape_str(w.shape()));
    for (std::int64_t extent : {d.D, d.H, d.W})
        require(extent + 2 * padding >= d.k,
                "conv3d: spatial extent " + std::to_string(extent) + " + 2*padding " +
                    std::to_string(padding) + " is smaller than kernel " + std::to_string(d.k));
    if (b.defined())
        require(b.shape() == Shape{d.Cout}, "conv3d: bias must have shape (" +
                                                std::to_string(d.Cout) + "), got " +
                                                shape_str(b.shape()));
    d.outD = conv_out_extent(d.D, int(d.k), stride, padding);
    d.outH = conv_out_extent(d.H, int(d.k), stride, padding);
    d.outW = conv_out_extent(d.W, int(d.k), stride, padding);
    return d;
}

template <typename T>
Tensor<T> conv3d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                      int padding) {
    const Conv3dDims dd = conv3d_dims(x, w, b, stride, padding);
    auto out = new_node<T>({dd.N, dd.Cout, dd.outD, dd.outH, dd.outW});

    const T* X = x.data().data();
    const T* Wt = w.data().data();
    const T* B = b.defined() ? b.data().data() : nullptr;
    T* O = out->value.data();

    // Forward: per (n, c_out) output slab, accumulate shifted input rows.
    // The stride-1 inner loop is a contiguous axpy; strided paths stay scalar.
    parallel_for(dd.N * dd.Cout, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const std::int64_t n = idx / dd.Cout;
            const std::int64_t co = idx % dd.Cout;
            T* obase = O + idx * dd.out_spatial();
            if (B)
                std::fill(obase, obase + dd.out_spatial(), B[co]);
            for (std::int64_t ci = 0; ci < dd.Cin; ++ci) {
                const T* xbase = X + (n * dd.Cin + ci) * dd.in_spatial();
                for (std::int64_t kd = 0; kd < dd.k; ++kd)
                    for (std::int64_t kh = 0; kh < dd.k; ++kh)
                        for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                            const T wv = Wt[(((co * dd.Cin + ci) * dd.k + kd) * dd.k + kh) * dd.k + kw];
                            for (std::int64_t od = 0; od < dd.outD; ++od) {
                                const std::int64_t id = od * dd.s + kd - dd.p;
                                if (id < 0 || id >= dd.D)
                                    continue;
                                for (std::int64_t oh = 0; oh < dd.outH; ++oh) {
                                    const std::int64_t ih = oh * dd.s + kh - dd.p;
                                    if (ih < 0 || ih >= dd.H)
                                        continue;
                                    const T* xrow = xbase + (id * dd.H + ih) * dd.W;
                                    T* orow = obase + (od * dd.outH + oh) * dd.outW;
                                    if (dd.s == 1) {
                                        const std::int64_t lo = std::max<std::int64_t>(0, dd.p - kw);
                                        const std::int64_t hi =
                                            std::min(dd.outW - 1, dd.W - 1 + dd.p - kw);
                                        if (lo <= hi)
                                            lk::axpy(orow + lo, xrow + (lo + kw - dd.p), wv,
                                                     std::size_t(hi - lo + 1));
                                    } else {
                                        for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                                            const std::int64_t iw = ow * dd.s + kw - dd.p;
                                            if (iw >= 0 && iw < dd.W)
                                                orow[ow] += wv * xrow[iw];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    });

    auto* xn = x.raw();
    auto* wn = w.raw();
    auto* bn = b.defined() ? b.raw() : nullptr;
    auto* on = out.get();
    std::vector<NodePtr<T>> parents = {x.node(), w.node()};
    if (b.defined())
        parents.push_back(b.node());

    auto backward = [xn, wn, bn, on, dd]() {
        const T* GO = on->grad.data();
        const T* X = xn->value.data();
        const T* Wt = wn->value.data();

        if (xn->requires_grad) {
            T* XG = xn->grad_ref().data();
            // Gather form of the forward loop: same shifts, roles of the
            // rows swapped, one owner per (n, c_in) slab.
            parallel_for(dd.N * dd.Cin, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t idx = b0; idx < e0; ++idx) {
                    const std::int64_t n = idx / dd.Cin;
                    const std::int64_t ci = idx % dd.Cin;
                    T* dxbase = XG + idx * dd.in_spatial();
                    for (std::int64_t co = 0; co < dd.Cout; ++co) {
                        const T* gobase = GO + (n * dd.Cout + co) * dd.out_spatial();
                        for (std::int64_t kd = 0; kd < dd.k; ++kd)
                            for (std::int64_t kh = 0; kh < dd.k; ++kh)
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    const T wv =
                                        Wt[(((co * dd.Cin + ci) * dd.k + kd) * dd.k + kh) * dd.k + kw];
                                    for (std::int64_t od = 0; od < dd.outD; ++od) {
                                        const std::int64_t id = od * dd.s + kd - dd.p;
                                        if (id < 0 || id >= dd.D)
                                            continue;
                                        for (std::int64_t oh = 0; oh < dd.outH; ++oh) {
                                            const std::int64_t ih = oh * dd.s + kh - dd.p;
                                            if (ih < 0 || ih >= dd.H)
                                                continue;
                                            T* dxrow = dxbase + (id * dd.H + ih) * dd.W;
                                            const T* gorow = gobase + (od * dd.outH + oh) * dd.outW;
                                            if (dd.s == 1) {
                                                const std::int64_t lo =
                                                    std::max<std::int64_t>(0, dd.p - kw);
                                                const std::int64_t hi =
                                                    std::min(dd.outW - 1, dd.W - 1 + dd.p - kw);
                                                if (lo <= hi)
                                                    lk::axpy(dxrow + (lo + kw - dd.p), gorow + lo, wv,
                                                             std::size_t(hi - lo + 1));
                                            } else {
                                                for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                                                    const std::int64_t iw = ow * dd.s + kw - dd.p;
                                                    if (iw >= 0 && iw < dd.W)
                                                        dxrow[iw] += wv * gorow[ow];
                                                }
                                            }
                                        }
                                    }
                                }
                    }
                }
            });
        }

        if (wn->requires_grad) {
            T* WG = wn->grad_ref().data();
            // One owner per c_out: every weight element is a sum of row dot
            // products, accumulated in double.
            parallel_for(dd.Cout, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t co = b0; co < e0; ++co)
                    for (std::int64_t ci = 0; ci < dd.Cin; ++ci)
                        for (std::int64_t kd = 0; kd < dd.k; ++kd)
                            for (std::int64_t kh = 0; kh < dd.k; ++kh)
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    double acc = 0.0;
                                    for (std::int64_t n = 0; n < dd.N; ++n) {
                                        const T* gobase = GO + (n * dd.Cout + co) * dd.out_spatial();
                                        const T* xbase = X + (n * dd.Cin + ci) * dd.in_spatial();
                                        for (std::int64_t od = 0; od < dd.outD; ++od) {
                                            const std::int64_t id = od * dd.s + kd - dd.p;
                                            if (id < 0 || id >= dd.D)
                                                continue;
                                            for (std::int64_t oh = 0; oh < dd.outH; ++oh) {
                                                const std::int64_t ih = oh * dd.s + kh - dd.p;
                                                if (ih < 0 || ih >= dd.H)
                                                    continue;
                                                const T* xrow = xbase + (id * dd.H + ih) * dd.W;
                                                const T* gorow =
                                                    gobase + (od * dd.outH + oh) * dd.outW;
                                                if (dd.s == 1) {
                                                    const std::int64_t lo =
                                                        std::max<std::int64_t>(0, dd.p - kw);
                                                    const std::int64_t hi =
                                                        std::min(dd.outW - 1, dd.W - 1 + dd.p - kw);
                                                    if (lo <= hi)
                                                        acc += double(lk::dot(
                                                            gorow + lo, xrow + (lo + kw - dd.p),
                                                            std::size_t(hi - lo + 1)));
                                                } else {
                                                    for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                                                        const std::int64_t iw = ow * dd.s + kw - dd.p;
                                                        if (iw >= 0 && iw < dd.W)
                                                            acc += double(gorow[ow]) * double(xrow[iw]);
                                                    }
                                                }
                                            }
                                        }
                                    }
                                    WG[(((co * dd.Cin + ci) * dd.k + kd) * dd.k + kh) * dd.k + kw] +=
                                        T(acc);
                                }
            });
        }

        if (bn && bn->requires_grad) {
            T* BG = bn->grad_ref().data();
            for (std::int64_t co = 0; co < dd.Cout; ++co) {
                double acc = 0.0;
                for (std::int64_t n = 0; n < dd.N; ++n)
                    acc += lk::sum(GO + (n * dd.Cout + co) * dd.out_spatial(),
                                   std::size_t(dd.out_spatial()));
                BG[co] += T(acc);
            }
        }
    };
    return attach("conv3d", std::move(out), std::move(parents), std::move(backward));
}

// -------------------------------------------------------- conv_transpose3d

template <typename T>
Conv3dDims conv_transpose3d_dims(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                 int stride, int padding) {
    check_rank5("conv_transpose3d", x);
    require(w.defined() && w.shape().size() == 5,
            "conv_transpose3d: weight must be rank-5 C_in×C_out×k×k×k, got " +
                (w.defined() ? shape_str(w.shape()) : std::string("undefined")));
    require(stride >= 1, "conv_transpose3d: stride must be >= 1");
    require(padding >= 0, "conv_transpose3d: padding must be >= 0");
    Conv3dDims d;
    d.N = x.dim(0);
    d.Cin = x.dim(1);
    d.D = x.dim(2);
    d.H = x.dim(3);
    d.W = x.dim(4);
    d.Cout = w.dim(1);
    d.k = w.dim(2);
    d.s = stride;
    d.p = padding;
    require(w.dim(0) == d.Cin, "conv_transpose3d: weight expects C_in=" + std::to_string(w.dim(0)) +
                                   ", input has C_in=" + std::to_string(d.Cin));
    require(w.dim(3) == d.k && w.dim(4) == d.k,
            "conv_transpose3d: kernel must be cubic, got " + shape_str(w.shape()));
    if (b.defined())
        require(b.shape() == Shape{d.Cout}, "conv_transpose3d: bias must have shape (" +
                                                std::to_string(d.Cout) + "), got " +
                                                shape_str(b.shape()));
    d.outD = (d.D - 1) * stride - 2 * padding + d.k;
    d.outH = (d.H - 1) * stride - 2 * padding + d.k;
    d.outW = (d.W - 1) * stride - 2 * padding + d.k;
    require(d.outD > 0 && d.outH > 0 && d.outW > 0,
            "conv_transpose3d: output extent is non-positive for input " + shape_str(x.shape()));
    return d;
}

template <typename T>
Tensor<T> conv_transpose3d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                int stride, int padding) {
    const Conv3dDims dd = conv_transpose3d_dims(x, w, b, stride, padding);
    auto out = new_node<T>({dd.N, dd.Cout, dd.outD, dd.outH, dd.outW});

    const T* X = x.data().data();
    const T* Wt = w.data().data();
    const T* B = b.defined() ? b.data().data() : nullptr;
    T* O = out->value.data();

    // Forward scatter: each input voxel contributes to a k³ output patch.
    parallel_for(dd.N * dd.Cout, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const std::int64_t n = idx / dd.Cout;
            const std::int64_t co = idx % dd.Cout;
            T* obase = O + idx * dd.out_spatial();
            if (B)
                std::fill(obase, obase + dd.out_spatial(), B[co]);
            for (std::int64_t ci = 0; ci < dd.Cin; ++ci) {
                const T* xbase = X + (n * dd.Cin + ci) * dd.in_spatial();
                for (std::int64_t kd = 0; kd < dd.k; ++kd)
                    for (std::int64_t kh = 0; kh < dd.k; ++kh)
                        for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                            const T wv = Wt[(((ci * dd.Cout + co) * dd.k + kd) * dd.k + kh) * dd.k + kw];
                            for (std::int64_t id = 0; id < dd.D; ++id) {
                                const std::int64_t od = id * dd.s + kd - dd.p;
                                if (od < 0 || od >= dd.outD)
                                    continue;
                                for (std::int64_t ih = 0; ih < dd.H; ++ih) {
                                    const std::int64_t oh = ih * dd.s + kh - dd.p;
                                    if (oh < 0 || oh >= dd.outH)
                                        continue;
                                    const T* xrow = xbase + (id * dd.H + ih) * dd.W;
                                    T* orow = obase + (od * dd.outH + oh) * dd.outW;
                                    if (dd.s == 1) {
                                        const std::int64_t lo = std::max<std::int64_t>(0, dd.p - kw);
                                        const std::int64_t hi =
                                            std::min(dd.W - 1, dd.outW - 1 + dd.p - kw);
                                        if (lo <= hi)
                                            lk::axpy(orow + (lo + kw - dd.p), xrow + lo, wv,
                                                     std::size_t(hi - lo + 1));
                                    } else {
                                        for (std::int64_t iw = 0; iw < dd.W; ++iw) {
                                            const std::int64_t ow = iw * dd.s + kw - dd.p;
                                            if (ow >= 0 && ow < dd.outW)
                                                orow[ow] += wv * xrow[iw];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    });

    auto* xn = x.raw();
    auto* wn = w.raw();
    auto* bn = b.defined() ? b.raw() : nullptr;
    auto* on = out.get();
    std::vector<NodePtr<T>> parents = {x.node(), w.node()};
    if (b.defined())
        parents.push_back(b.node());

    auto backward = [xn, wn, bn, on, dd]() {
        const T* GO = on->grad.data();
        const T* X = xn->value.data();
        const T* Wt = wn->value.data();

        if (xn->requires_grad) {
            T* XG = xn->grad_ref().data();
            // The adjoint of scatter is gather: dx = conv of the output
            // gradient with the same kernel.
            parallel_for(dd.N * dd.Cin, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t idx = b0; idx < e0; ++idx) {
                    const std::int64_t n = idx / dd.Cin;
                    const std::int64_t ci = idx % dd.Cin;
                    T* dxbase = XG + idx * dd.in_spatial();
                    for (std::int64_t co = 0; co < dd.Cout; ++co) {
                        const T* gobase = GO + (n * dd.Cout + co) * dd.out_spatial();
                        for (std::int64_t kd = 0; kd < dd.k; ++kd)
                            for (std::int64_t kh = 0; kh < dd.k; ++kh)
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    const T wv =
                                        Wt[(((ci * dd.Cout + co) * dd.k + kd) * dd.k + kh) * dd.k + kw];
                                    for (std::int64_t id = 0; id < dd.D; ++id) {
                                        const std::int64_t od = id * dd.s + kd - dd.p;
                                        if (od < 0 || od >= dd.outD)
                                            continue;
                                        for (std::int64_t ih = 0; ih < dd.H; ++ih) {
                                            const std::int64_t oh = ih * dd.s + kh - dd.p;
                                            if (oh < 0 || oh >= dd.outH)
                                                continue;
                                            T* dxrow = dxbase + (id * dd.H + ih) * dd.W;
                                            const T* gorow = gobase + (od * dd.outH + oh) * dd.outW;
                                            if (dd.s == 1) {
                                                const std::int64_t lo =
                                                    std::max<std::int64_t>(0, dd.p - kw);
                                                const std::int64_t hi =
                                                    std::min(dd.W - 1, dd.outW - 1 + dd.p - kw);
                                                if (lo <= hi)
                                                    lk::axpy(dxrow + lo, gorow + (lo + kw - dd.p), wv,
                                                             std::size_t(hi - lo + 1));
                                            } else {
                                                for (std::int64_t iw = 0; iw < dd.W; ++iw) {
                                                    const std::int64_t ow = iw * dd.s + kw - dd.p;
                                                    if (ow >= 0 && ow < dd.outW)
                                                        dxrow[iw] += wv * gorow[ow];
                                                }
                                            }
                                        }
                                    }
                                }
                    }
                }
            });
        }

        if (wn->requires_grad) {
            T* WG = wn->grad_ref().data();
            parallel_for(dd.Cin, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t ci = b0; ci < e0; ++ci)
                    for (std::int64_t co = 0; co < dd.Cout; ++co)
                        for (std::int64_t kd = 0; kd < dd.k; ++kd)
                            for (std::int64_t kh = 0; kh < dd.k; ++kh)
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    double acc = 0.0;
                                    for (std::int64_t n = 0; n < dd.N; ++n) {
                                        const T* xbase = X + (n * dd.Cin + ci) * dd.in_spatial();
                                        const T* gobase = GO + (n * dd.Cout + co) * dd.out_spatial();
                                        for (std::int64_t id = 0; id < dd.D; ++id) {
                                            const std::int64_t od = id * dd.s + kd - dd.p;
                                            if (od < 0 || od >= dd.outD)
                                                continue;
                                            for (std::int64_t ih = 0; ih < dd.H; ++ih) {
                                                const std::int64_t oh = ih * dd.s + kh - dd.p;
                                                if (oh < 0 || oh >= dd.outH)
                                                    continue;
                                                const T* xrow = xbase + (id * dd.H + ih) * dd.W;
                                                const T* gorow =
                                                    gobase + (od * dd.outH + oh) * dd.outW;
                                                if (dd.s == 1) {
                                                    const std::int64_t lo =
                                                        std::max<std::int64_t>(0, dd.p - kw);
                                                    const std::int64_t hi =
                                                        std::min(dd.W - 1, dd.outW - 1 + dd.p - kw);
                                                    if (lo <= hi)
                                                        acc += double(lk::dot(
                                                            xrow + lo, gorow + (lo + kw - dd.p),
                                                            std::size_t(hi - lo + 1)));
                                                } else {
                                                    for (std::int64_t iw = 0; iw < dd.W; ++iw) {
                                                        const std::int64_t ow = iw * dd.s + kw - dd.p;
                                                        if (ow >= 0 && ow < dd.outW)
                                                            acc += double(xrow[iw]) * double(gorow[ow]);
                                                    }
                                                }
                                            }
                                        }
                                    }
                                    WG[(((ci * dd.Cout + co) * dd.k + kd) * dd.k + kh) * dd.k + kw] +=
                                        T(acc);
                                }
            });
        }

        if (bn && bn->requires_grad) {
            T* BG = bn->grad_ref().data();
            for (std::int64_t co = 0; co < dd.Cout; ++co) {
                double acc = 0.0;
                for (std::int64_t n = 0; n < dd.N; ++n)
                    acc += lk::sum(GO + (n * dd.Cout + co) * dd.out_spatial(),
                                   std::size_t(dd.out_spatial()));
                BG[co] += T(acc);
            }
        }
    };
    return attach("conv_transpose3d", std::move(out), std::move(parents), std::move(backward));
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding) {
    return conv3d_impl(x, w, b, stride, padding);
}

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
    return conv_transpose3d_impl(x, w, b, stride, padding);
}

// ------------------------------------------------------------ instance_norm

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        double eps) {
    require(x.defined() && x.shape().size() >= 3,
            "instance_norm: expected at least rank-3 N×C×spatial input, got " +
                (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    const std::int64_t N = x.dim(0);
    const std::int64_t C = x.dim(1);
    std::int64_t M = 1;
    for (std::size_t i = 2; i < x.shape().size(); ++i)
        M *= x.shape()[i];
    require(gamma.defined() && gamma.shape() == Shape{C},
            "instance_norm: gamma must have shape (" + std::to_string(C) + ")");
    require(beta.defined() && beta.shape() == Shape{C},
            "instance_norm: beta must have shape (" + std::to_string(C) + ")");

    auto out = new_node<T>(x.shape());
    const T* X = x.data().data();
    const T* G = gamma.data().data();
    const T* Bt = beta.data().data();
    T* O = out->value.data();

    // Per-row statistics in double; saved for the backward pass.
    auto mus = std::make_shared<std::vector<double>>(std::size_t(N * C));
    auto invs = std::make_shared<std::vector<double>>(std::size_t(N * C));

    parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const std::int64_t c = idx % C;
            const T* row = X + idx * M;
            T* orow = O + idx * M;
            const double mu = lk::sum(row, std::size_t(M)) / double(M);
            const double var = lk::sumsq_diff(row, mu, std::size_t(M)) / double(M);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*mus)[std::size_t(idx)] = mu;
            (*invs)[std::size_t(idx)] = inv;
            const T g = G[c];
            const T bt = Bt[c];
            for (std::int64_t i = 0; i < M; ++i)
                orow[i] = g * T((double(row[i]) - mu) * inv) + bt;
        }
    });

    auto* xn = x.raw();
    auto* gn = gamma.raw();
    auto* bn = beta.raw();
    auto* on = out.get();

    auto backward = [xn, gn, bn, on, mus, invs, N, C, M]() {
        const T* GO = on->grad.data();
        const T* X = xn->value.data();
        const T* G = gn->value.data();
        T* XG = xn->requires_grad ? xn->grad_ref().data() : nullptr;
        T* GG = gn->requires_grad ? gn->grad_ref().data() : nullptr;
        T* BG = bn->requires_grad ? bn->grad_ref().data() : nullptr;

        // One owner per channel: gamma/beta gradients sum over the batch.
        parallel_for(C, [&](std::int64_t b0, std::int64_t e0) {
            for (std::int64_t c = b0; c < e0; ++c) {
                double gsum = 0.0, bsum = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const std::int64_t idx = n * C + c;
                    const T* row = X + idx * M;
                    const T* dy = GO + idx * M;
                    const double mu = (*mus)[std::size_t(idx)];
                    const double inv = (*invs)[std::size_t(idx)];
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t i = 0; i < M; ++i) {
                        const double xh = (double(row[i]) - mu) * inv;
                        s1 += double(dy[i]);
                        s2 += double(dy[i]) * xh;
                    }
                    bsum += s1;
                    gsum += s2;
                    if (XG) {
                        const double gi = double(G[c]) * inv;
                        const double m1 = s1 / double(M);
                        const double m2 = s2 / double(M);
                        T* dx = XG + idx * M;
                        for (std::int64_t i = 0; i < M; ++i) {
                            const double xh = (double(row[i]) - mu) * inv;
                            dx[i] += T(gi * (double(dy[i]) - m1 - xh * m2));
                        }
                    }
                }
                if (GG)
                    GG[c] += T(gsum);
                if (BG)
                    BG[c] += T(bsum);
            }
        });
    };
    return attach("instance_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
                  std::move(backward));
}

// ------------------------------------------------------------- activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    require(x.defined(), "relu: undefined input");
    auto out = new_node<T>(x.shape());
    const std::int64_t n = x.numel();
    const T* X = x.data().data();
    T* O = out->value.data();
    for_chunks(n, [&](std::int64_t b, std::int64_t e) { lk::relu(O + b, X + b, std::size_t(e - b)); });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, n]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* X = xn->value.data();
        const T* GO = on->grad.data();
        parallel_for(n, [&](std::int64_t b, std::int64_t e) {
            lk::relu_backward(XG + b, X + b, GO + b, std::size_t(e - b));
        });
    };
    return attach("relu", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    require(x.defined(), "sigmoid: undefined input");
    auto out = new_node<T>(x.shape());
    const std::int64_t n = x.numel();
    const T* X = x.data().data();
    T* O = out->value.data();
    for_chunks(n, [&](std::int64_t b, std::int64_t e) {
        for (std::int64_t i = b; i < e; ++i)
            O[i] = T(1.0 / (1.0 + std::exp(-double(X[i]))));
    });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, n]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* O = on->value.data();
        const T* GO = on->grad.data();
        parallel_for(n, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t i = b; i < e; ++i) {
                const double y = double(O[i]);
                XG[i] += T(double(GO[i]) * y * (1.0 - y));
            }
        });
    };
    return attach("sigmoid", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& x) {
    require(x.defined() && x.shape().size() >= 2,
            "softmax_channel: expected at least rank-2 N×C×... input");
    const std::int64_t N = x.dim(0);
    const std::int64_t C = x.dim(1);
    std::int64_t M = 1;
    for (std::size_t i = 2; i < x.shape().size(); ++i)
        M *= x.shape()[i];

    auto out = new_node<T>(x.shape());
    const T* X = x.data().data();
    T* O = out->value.data();

    for (std::int64_t n = 0; n < N; ++n) {
        const T* xb = X + n * C * M;
        T* ob = O + n * C * M;
        parallel_for(M, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t pos = b; pos < e; ++pos) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::int64_t c = 0; c < C; ++c)
                    mx = std::max(mx, double(xb[c * M + pos]));
                double sum = 0.0;
                for (std::int64_t c = 0; c < C; ++c)
                    sum += std::exp(double(xb[c * M + pos]) - mx);
                for (std::int64_t c = 0; c < C; ++c)
                    ob[c * M + pos] = T(std::exp(double(xb[c * M + pos]) - mx) / sum);
            }
        });
    }

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, N, C, M]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* O = on->value.data();
        const T* GO = on->grad.data();
        for (std::int64_t n = 0; n < N; ++n) {
            const T* ob = O + n * C * M;
            const T* gb = GO + n * C * M;
            T* xg = XG + n * C * M;
            parallel_for(M, [&](std::int64_t b, std::int64_t e) {
                for (std::int64_t pos = b; pos < e; ++pos) {
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < C; ++c)
                        dot += double(ob[c * M + pos]) * double(gb[c * M + pos]);
                    for (std::int64_t c = 0; c < C; ++c)
                        xg[c * M + pos] +=
                            T(double(ob[c * M + pos]) * (double(gb[c * M + pos]) - dot));
                }
            });
        }
    };
    return attach("softmax_channel", std::move(out), {x.node()}, std::move(backward));
}

// ----------------------------------------------------------------- pooling

namespace {

struct PoolDims {
    std::int64_t N, C, D, H, W, outD, outH, outW;
    int k, s, p;
    std::int64_t in_spatial() const { return D * H * W; }
    std::int64_t out_spatial() const { return outD * outH * outW; }
};

template <typename T>
PoolDims pool_dims(const char* op, const Tensor<T>& x, int k, int stride, int padding) {
    check_rank5(op, x);
    require(k >= 1 && stride >= 1 && padding >= 0, std::string(op) + ": bad k/stride/padding");
    require(padding < k, std::string(op) + ": padding must be smaller than the kernel");
    PoolDims d;
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.D = x.dim(2);
    d.H = x.dim(3);
    d.W = x.dim(4);
    d.k = k;
    d.s = stride;
    d.p = padding;
    for (std::int64_t extent : {d.D, d.H, d.W})
        require(extent + 2 * padding >= k, std::string(op) + ": spatial extent " +
                                               std::to_string(extent) + " too small for kernel " +
                                               std::to_string(k));
    d.outD = conv_out_extent(d.D, k, stride, padding);
    d.outH = conv_out_extent(d.H, k, stride, padding);
    d.outW = conv_out_extent(d.W, k, stride, padding);
    return d;
}

}  // namespace

template <typename T>
Tensor<T> avgpool_s(const Tensor<T>& x, int k, int stride, int padding) {
    const PoolDims dd = pool_dims("avgpool_s", x, k, stride, padding);
    auto out = new_node<T>({dd.N, dd.C, dd.outD, dd.outH, dd.outW});
    const T* X = x.data().data();
    T* O = out->value.data();

    parallel_for(dd.N * dd.C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const T* xbase = X + idx * dd.in_spatial();
            T* obase = O + idx * dd.out_spatial();
            for (std::int64_t od = 0; od < dd.outD; ++od)
                for (std::int64_t oh = 0; oh < dd.outH; ++oh)
                    for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                        double acc = 0.0;
                        std::int64_t count = 0;
                        for (std::int64_t kd = 0; kd < dd.k; ++kd) {
                            const std::int64_t id = od * dd.s + kd - dd.p;
                            if (id < 0 || id >= dd.D)
                                continue;
                            for (std::int64_t kh = 0; kh < dd.k; ++kh) {
                                const std::int64_t ih = oh * dd.s + kh - dd.p;
                                if (ih < 0 || ih >= dd.H)
                                    continue;
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    const std::int64_t iw = ow * dd.s + kw - dd.p;
                                    if (iw < 0 || iw >= dd.W)
                                        continue;
                                    acc += double(xbase[(id * dd.H + ih) * dd.W + iw]);
                                    ++count;
                                }
                            }
                        }
                        obase[(od * dd.outH + oh) * dd.outW + ow] = T(acc / double(count));
                    }
        }
    });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, dd]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        parallel_for(dd.N * dd.C, [&](std::int64_t b0, std::int64_t e0) {
            for (std::int64_t idx = b0; idx < e0; ++idx) {
                T* dxbase = XG + idx * dd.in_spatial();
                const T* gobase = GO + idx * dd.out_spatial();
                for (std::int64_t od = 0; od < dd.outD; ++od)
                    for (std::int64_t oh = 0; oh < dd.outH; ++oh)
                        for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                            // Same window walk as forward: count first, then spread.
                            std::int64_t count = 0;
                            for (std::int64_t kd = 0; kd < dd.k; ++kd) {
                                const std::int64_t id = od * dd.s + kd - dd.p;
                                if (id < 0 || id >= dd.D)
                                    continue;
                                for (std::int64_t kh = 0; kh < dd.k; ++kh) {
                                    const std::int64_t ih = oh * dd.s + kh - dd.p;
                                    if (ih < 0 || ih >= dd.H)
                                        continue;
                                    for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                        const std::int64_t iw = ow * dd.s + kw - dd.p;
                                        if (iw >= 0 && iw < dd.W)
                                            ++count;
                                    }
                                }
                            }
                            const double g =
                                double(gobase[(od * dd.outH + oh) * dd.outW + ow]) / double(count);
                            for (std::int64_t kd = 0; kd < dd.k; ++kd) {
                                const std::int64_t id = od * dd.s + kd - dd.p;
                                if (id < 0 || id >= dd.D)
                                    continue;
                                for (std::int64_t kh = 0; kh < dd.k; ++kh) {
                                    const std::int64_t ih = oh * dd.s + kh - dd.p;
                                    if (ih < 0 || ih >= dd.H)
                                        continue;
                                    for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                        const std::int64_t iw = ow * dd.s + kw - dd.p;
                                        if (iw >= 0 && iw < dd.W)
                                            dxbase[(id * dd.H + ih) * dd.W + iw] += T(g);
                                    }
                                }
                            }
                        }
            }
        });
    };
    return attach("avgpool_s", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> maxpool_s(const Tensor<T>& x, int k, int stride, int padding) {
    const PoolDims dd = pool_dims("maxpool_s", x, k, stride, padding);
    auto out = new_node<T>({dd.N, dd.C, dd.outD, dd.outH, dd.outW});
    const T* X = x.data().data();
    T* O = out->value.data();

    // Argmax (first hit in scan order) kept for the backward scatter.
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out->value.size());

    parallel_for(dd.N * dd.C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const T* xbase = X + idx * dd.in_spatial();
            T* obase = O + idx * dd.out_spatial();
            std::int64_t* abase = argmax->data() + idx * dd.out_spatial();
            for (std::int64_t od = 0; od < dd.outD; ++od)
                for (std::int64_t oh = 0; oh < dd.outH; ++oh)
                    for (std::int64_t ow = 0; ow < dd.outW; ++ow) {
                        T best = T(0);
                        std::int64_t best_i = -1;
                        for (std::int64_t kd = 0; kd < dd.k; ++kd) {
                            const std::int64_t id = od * dd.s + kd - dd.p;
                            if (id < 0 || id >= dd.D)
                                continue;
                            for (std::int64_t kh = 0; kh < dd.k; ++kh) {
                                const std::int64_t ih = oh * dd.s + kh - dd.p;
                                if (ih < 0 || ih >= dd.H)
                                    continue;
                                for (std::int64_t kw = 0; kw < dd.k; ++kw) {
                                    const std::int64_t iw = ow * dd.s + kw - dd.p;
                                    if (iw < 0 || iw >= dd.W)
                                        continue;
                                    const std::int64_t i = (id * dd.H + ih) * dd.W + iw;
                                    if (best_i < 0 || xbase[i] > best) {
                                        best = xbase[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        obase[(od * dd.outH + oh) * dd.outW + ow] = best;
                        abase[(od * dd.outH + oh) * dd.outW + ow] = best_i;
                    }
        }
    });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, dd, argmax]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        parallel_for(dd.N * dd.C, [&](std::int64_t b0, std::int64_t e0) {
            for (std::int64_t idx = b0; idx < e0; ++idx) {
                T* dxbase = XG + idx * dd.in_spatial();
                const T* gobase = GO + idx * dd.out_spatial();
                const std::int64_t* abase = argmax->data() + idx * dd.out_spatial();
                for (std::int64_t o = 0; o < dd.out_spatial(); ++o)
                    dxbase[abase[o]] += gobase[o];
            }
        });
    };
    return attach("maxpool_s", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> global_avgpool_s(const Tensor<T>& x) {
    check_rank5("global_avgpool_s", x);
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t M = x.dim(2) * x.dim(3) * x.dim(4);
    auto out = new_node<T>({N, C, 1, 1, 1});
    const T* X = x.data().data();
    T* O = out->value.data();
    parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx)
            O[idx] = T(lk::sum(X + idx * M, std::size_t(M)) / double(M));
    });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, N, C, M]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
            for (std::int64_t idx = b0; idx < e0; ++idx) {
                const T g = T(double(GO[idx]) / double(M));
                T* dx = XG + idx * M;
                for (std::int64_t i = 0; i < M; ++i)
                    dx[i] += g;
            }
        });
    };
    return attach("global_avgpool_s", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> global_maxpool_s(const Tensor<T>& x) {
    check_rank5("global_maxpool_s", x);
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t M = x.dim(2) * x.dim(3) * x.dim(4);
    require(M >= 1, "global_maxpool_s: empty spatial extent");
    auto out = new_node<T>({N, C, 1, 1, 1});
    const T* X = x.data().data();
    T* O = out->value.data();
    auto argmax = std::make_shared<std::vector<std::int64_t>>(std::size_t(N * C));
    parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const T* row = X + idx * M;
            std::int64_t best = 0;
            for (std::int64_t i = 1; i < M; ++i)
                if (row[i] > row[best])
                    best = i;
            O[idx] = row[best];
            (*argmax)[std::size_t(idx)] = best;
        }
    });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, argmax, N, C, M]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        for (std::int64_t idx = 0; idx < N * C; ++idx)
            XG[idx * M + (*argmax)[std::size_t(idx)]] += GO[idx];
    };
    return attach("global_maxpool_s", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> avgpool_c(const Tensor<T>& x) {
    check_rank5("avgpool_c", x);
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t M = x.dim(2) * x.dim(3) * x.dim(4);
    auto out = new_node<T>({N, 1, x.dim(2), x.dim(3), x.dim(4)});
    const T* X = x.data().data();
    T* O = out->value.data();
    for (std::int64_t n = 0; n < N; ++n) {
        const T* xb = X + n * C * M;
        T* ob = O + n * M;
        parallel_for(M, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t pos = b; pos < e; ++pos) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c)
                    acc += double(xb[c * M + pos]);
                ob[pos] = T(acc / double(C));
            }
        });
    }

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, N, C, M]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        for (std::int64_t n = 0; n < N; ++n) {
            T* xg = XG + n * C * M;
            const T* gb = GO + n * M;
            parallel_for(M, [&](std::int64_t b, std::int64_t e) {
                for (std::int64_t pos = b; pos < e; ++pos) {
                    const T g = T(double(gb[pos]) / double(C));
                    for (std::int64_t c = 0; c < C; ++c)
                        xg[c * M + pos] += g;
                }
            });
        }
    };
    return attach("avgpool_c", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> maxpool_c(const Tensor<T>& x) {
    check_rank5("maxpool_c", x);
    const std::int64_t N = x.dim(0), C = x.dim(1);
    const std::int64_t M = x.dim(2) * x.dim(3) * x.dim(4);
    auto out = new_node<T>({N, 1, x.dim(2), x.dim(3), x.dim(4)});
    const T* X = x.data().data();
    T* O = out->value.data();
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out->value.size());
    for (std::int64_t n = 0; n < N; ++n) {
        const T* xb = X + n * C * M;
        T* ob = O + n * M;
        std::int32_t* ab = argmax->data() + n * M;
        parallel_for(M, [&](std::int64_t b, std::int64_t e) {
            for (std::int64_t pos = b; pos < e; ++pos) {
                std::int64_t best = 0;
                for (std::int64_t c = 1; c < C; ++c)
                    if (xb[c * M + pos] > xb[best * M + pos])
                        best = c;
                ob[pos] = xb[best * M + pos];
                ab[pos] = std::int32_t(best);
            }
        });
    }

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, argmax, N, C, M]() {
        if (!xn->requires_grad)
            return;
        T* XG = xn->grad_ref().data();
        const T* GO = on->grad.data();
        for (std::int64_t n = 0; n < N; ++n) {
            T* xg = XG + n * C * M;
            const T* gb = GO + n * M;
            const std::int32_t* ab = argmax->data() + n * M;
            parallel_for(M, [&](std::int64_t b, std::int64_t e) {
                for (std::int64_t pos = b; pos < e; ++pos)
                    xg[std::int64_t(ab[pos]) * M + pos] += gb[pos];
            });
        }
    };
    return attach("maxpool_c", std::move(out), {x.node()}, std::move(backward));
}

// ------------------------------------------------------------------ linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    require(x.defined() && x.shape().size() == 2,
            "linear: input must be rank-2 N×F_in, got " +
                (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    require(w.defined() && w.shape().size() == 2,
            "linear: weight must be rank-2 F_out×F_in");
    const std::int64_t N = x.dim(0), Fin = x.dim(1), Fout = w.dim(0);
    require(w.dim(1) == Fin, "linear: weight expects F_in=" + std::to_string(w.dim(1)) +
                                 ", input has F_in=" + std::to_string(Fin));
    if (b.defined())
        require(b.shape() == Shape{Fout},
                "linear: bias must have shape (" + std::to_string(Fout) + ")");

    auto out = new_node<T>({N, Fout});
    const T* X = x.data().data();
    const T* Wt = w.data().data();
    const T* B = b.defined() ? b.data().data() : nullptr;
    T* O = out->value.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t f = 0; f < Fout; ++f)
            O[n * Fout + f] =
                lk::dot(X + n * Fin, Wt + f * Fin, std::size_t(Fin)) + (B ? B[f] : T(0));

    auto* xn = x.raw();
    auto* wn = w.raw();
    auto* bn = b.defined() ? b.raw() : nullptr;
    auto* on = out.get();
    std::vector<NodePtr<T>> parents = {x.node(), w.node()};
    if (b.defined())
        parents.push_back(b.node());

    auto backward = [xn, wn, bn, on, N, Fin, Fout]() {
        const T* GO = on->grad.data();
        if (xn->requires_grad) {
            T* XG = xn->grad_ref().data();
            const T* Wt = wn->value.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t f = 0; f < Fout; ++f)
                    lk::axpy(XG + n * Fin, Wt + f * Fin, GO[n * Fout + f], std::size_t(Fin));
        }
        if (wn->requires_grad) {
            T* WG = wn->grad_ref().data();
            const T* X = xn->value.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t f = 0; f < Fout; ++f)
                    lk::axpy(WG + f * Fin, X + n * Fin, GO[n * Fout + f], std::size_t(Fin));
        }
        if (bn && bn->requires_grad) {
            T* BG = bn->grad_ref().data();
            for (std::int64_t f = 0; f < Fout; ++f) {
                double acc = 0.0;
                for (std::int64_t n = 0; n < N; ++n)
                    acc += double(GO[n * Fout + f]);
                BG[f] += T(acc);
            }
        }
    };
    return attach("linear", std::move(out), std::move(parents), std::move(backward));
}

// --------------------------------------------------------- shape plumbing

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    require(!xs.empty(), "concat: empty input list");
    const Shape& first = xs[0].shape();
    const std::size_t rank = first.size();
    require(axis >= 0 && std::size_t(axis) < rank,
            "concat: axis " + std::to_string(axis) + " out of range for rank " +
                std::to_string(rank));
    Shape out_shape = first;
    out_shape[std::size_t(axis)] = 0;
    for (const auto& x : xs) {
        require(x.defined() && x.shape().size() == rank,
                "concat: rank mismatch, expected " + std::to_string(rank));
        for (std::size_t i = 0; i < rank; ++i)
            if (i != std::size_t(axis))
                require(x.shape()[i] == first[i],
                        "concat: extent mismatch at axis " + std::to_string(i) + ": expected " +
                            std::to_string(first[i]) + ", got " + std::to_string(x.shape()[i]));
        out_shape[std::size_t(axis)] += x.shape()[std::size_t(axis)];
    }

    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i)
        outer *= first[std::size_t(i)];
    std::int64_t inner = 1;
    for (std::size_t i = std::size_t(axis) + 1; i < rank; ++i)
        inner *= first[i];

    auto out = new_node<T>(out_shape);
    T* O = out->value.data();
    const std::int64_t out_block = out_shape[std::size_t(axis)] * inner;
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t block = x.shape()[std::size_t(axis)] * inner;
        const T* X = x.data().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(X + o * block, X + (o + 1) * block, O + o * out_block + off);
        off += block;
    }

    std::vector<NodePtr<T>> parents;
    parents.reserve(xs.size());
    for (const auto& x : xs)
        parents.push_back(x.node());
    std::vector<TensorNode<T>*> raw;
    raw.reserve(xs.size());
    for (const auto& x : xs)
        raw.push_back(x.raw());
    auto* on = out.get();

    auto backward = [raw, on, outer, inner, out_block, axis]() {
        const T* GO = on->grad.data();
        std::int64_t off = 0;
        for (auto* p : raw) {
            const std::int64_t block = p->shape[std::size_t(axis)] * inner;
            if (p->requires_grad) {
                T* pg = p->grad_ref().data();
                for (std::int64_t o = 0; o < outer; ++o)
                    lk::axpy(pg + o * block, GO + o * out_block + off, T(1), std::size_t(block));
            }
            off += block;
        }
    };
    return attach("concat", std::move(out), std::move(parents), std::move(backward));
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
    require(x.defined() && y.defined(), "add: undefined input");
    require(x.shape() == y.shape(), "add: shape mismatch, " + shape_str(x.shape()) + " vs " +
                                        shape_str(y.shape()));
    auto out = new_node<T>(x.shape());
    const std::int64_t n = x.numel();
    const T* X = x.data().data();
    const T* Y = y.data().data();
    T* O = out->value.data();
    for_chunks(n, [&](std::int64_t b, std::int64_t e) { lk::add(O + b, X + b, Y + b, std::size_t(e - b)); });

    auto* xn = x.raw();
    auto* yn = y.raw();
    auto* on = out.get();
    auto backward = [xn, yn, on, n]() {
        const T* GO = on->grad.data();
        if (xn->requires_grad) {
            T* g = xn->grad_ref().data();
            parallel_for(n, [&](std::int64_t b, std::int64_t e) {
                lk::axpy(g + b, GO + b, T(1), std::size_t(e - b));
            });
        }
        if (yn->requires_grad) {
            T* g = yn->grad_ref().data();
            parallel_for(n, [&](std::int64_t b, std::int64_t e) {
                lk::axpy(g + b, GO + b, T(1), std::size_t(e - b));
            });
        }
    };
    return attach("add", std::move(out), {x.node(), y.node()}, std::move(backward));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
    require(x.defined() && y.defined(), "mul: undefined input");
    require(x.shape() == y.shape(), "mul: shape mismatch, " + shape_str(x.shape()) + " vs " +
                                        shape_str(y.shape()));
    auto out = new_node<T>(x.shape());
    const std::int64_t n = x.numel();
    const T* X = x.data().data();
    const T* Y = y.data().data();
    T* O = out->value.data();
    for_chunks(n, [&](std::int64_t b, std::int64_t e) { lk::mul(O + b, X + b, Y + b, std::size_t(e - b)); });

    auto* xn = x.raw();
    auto* yn = y.raw();
    auto* on = out.get();
    auto backward = [xn, yn, on, n]() {
        const T* GO = on->grad.data();
        if (xn->requires_grad) {
            T* g = xn->grad_ref().data();
            const T* Y = yn->value.data();
            parallel_for(n, [&](std::int64_t b, std::int64_t e) {
                lk::madd(g + b, GO + b, Y + b, std::size_t(e - b));
            });
        }
        if (yn->requires_grad) {
            T* g = yn->grad_ref().data();
            const T* X = xn->value.data();
            parallel_for(n, [&](std::int64_t b, std::int64_t e) {
                lk::madd(g + b, GO + b, X + b, std::size_t(e - b));
            });
        }
    };
    return attach("mul", std::move(out), {x.node(), y.node()}, std::move(backward));
}

template <typename T>
Tensor<T> mul_channelwise(const Tensor<T>& f, const Tensor<T>& a) {
    check_rank5("mul_channelwise", f);
    const std::int64_t N = f.dim(0), C = f.dim(1);
    const std::int64_t M = f.dim(2) * f.dim(3) * f.dim(4);
    require(a.defined() && a.shape() == Shape{N, C, 1, 1, 1},
            "mul_channelwise: scale must have shape (" + std::to_string(N) + ", " +
                std::to_string(C) + ", 1, 1, 1), got " +
                (a.defined() ? shape_str(a.shape()) : std::string("undefined")));

    auto out = new_node<T>(f.shape());
    const T* F = f.data().data();
    const T* A = a.data().data();
    T* O = out->value.data();
    parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx)
            lk::axpy(O + idx * M, F + idx * M, A[idx], std::size_t(M));
    });

    auto* fn = f.raw();
    auto* an = a.raw();
    auto* on = out.get();
    auto backward = [fn, an, on, N, C, M]() {
        const T* GO = on->grad.data();
        if (fn->requires_grad) {
            T* FG = fn->grad_ref().data();
            const T* A = an->value.data();
            parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t idx = b0; idx < e0; ++idx)
                    lk::axpy(FG + idx * M, GO + idx * M, A[idx], std::size_t(M));
            });
        }
        if (an->requires_grad) {
            T* AG = an->grad_ref().data();
            const T* F = fn->value.data();
            parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t idx = b0; idx < e0; ++idx)
                    AG[idx] += lk::dot(GO + idx * M, F + idx * M, std::size_t(M));
            });
        }
    };
    return attach("mul_channelwise", std::move(out), {f.node(), a.node()}, std::move(backward));
}

template <typename T>
Tensor<T> mul_spatialwise(const Tensor<T>& f, const Tensor<T>& a) {
    check_rank5("mul_spatialwise", f);
    const std::int64_t N = f.dim(0), C = f.dim(1);
    const std::int64_t M = f.dim(2) * f.dim(3) * f.dim(4);
    require(a.defined() && a.shape() == Shape{N, 1, f.dim(2), f.dim(3), f.dim(4)},
            "mul_spatialwise: map must have shape (" + std::to_string(N) + ", 1, " +
                std::to_string(f.dim(2)) + ", " + std::to_string(f.dim(3)) + ", " +
                std::to_string(f.dim(4)) + "), got " +
                (a.defined() ? shape_str(a.shape()) : std::string("undefined")));

    auto out = new_node<T>(f.shape());
    const T* F = f.data().data();
    const T* A = a.data().data();
    T* O = out->value.data();
    parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
        for (std::int64_t idx = b0; idx < e0; ++idx) {
            const std::int64_t n = idx / C;
            lk::mul(O + idx * M, F + idx * M, A + n * M, std::size_t(M));
        }
    });

    auto* fn = f.raw();
    auto* an = a.raw();
    auto* on = out.get();
    auto backward = [fn, an, on, N, C, M]() {
        const T* GO = on->grad.data();
        if (fn->requires_grad) {
            T* FG = fn->grad_ref().data();
            const T* A = an->value.data();
            parallel_for(N * C, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t idx = b0; idx < e0; ++idx) {
                    const std::int64_t n = idx / C;
                    lk::madd(FG + idx * M, GO + idx * M, A + n * M, std::size_t(M));
                }
            });
        }
        if (an->requires_grad) {
            T* AG = an->grad_ref().data();
            const T* F = fn->value.data();
            // One owner per sample: channel loop stays sequential.
            parallel_for(N, [&](std::int64_t b0, std::int64_t e0) {
                for (std::int64_t n = b0; n < e0; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        lk::madd(AG + n * M, GO + (n * C + c) * M, F + (n * C + c) * M,
                                 std::size_t(M));
            });
        }
    };
    return attach("mul_spatialwise", std::move(out), {f.node(), a.node()}, std::move(backward));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(x.defined(), "reshape: undefined input");
    require(shape_numel(shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape) +
                " (element count differs)");
    auto out = new_node<T>(std::move(shape));
    out->value = x.data();

    auto* xn = x.raw();
    auto* on = out.get();
    const std::int64_t n = x.numel();
    auto backward = [xn, on, n]() {
        if (!xn->requires_grad)
            return;
        lk::axpy(xn->grad_ref().data(), on->grad.data(), T(1), std::size_t(n));
    };
    return attach("reshape", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double c) {
    require(x.defined(), "scale: undefined input");
    auto out = new_node<T>(x.shape());
    out->value = x.data();
    const std::int64_t n = x.numel();
    T* O = out->value.data();
    for_chunks(n, [&](std::int64_t b, std::int64_t e) { lk::scale(O + b, T(c), std::size_t(e - b)); });

    auto* xn = x.raw();
    auto* on = out.get();
    auto backward = [xn, on, c, n]() {
        if (!xn->requires_grad)
            return;
        lk::axpy(xn->grad_ref().data(), on->grad.data(), T(c), std::size_t(n));
    };
    return attach("scale", std::move(out), {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    require(x.defined(), "sum_all: undefined input");
    auto out = new_node<T>({1});
    out->value[0] = T(lk::sum(x.data().data(), std::size_t(x.numel())));

    auto* xn = x.raw();
    auto* on = out.get();
    const std::int64_t n = x.numel();
    auto backward = [xn, on, n]() {
        if (!xn->requires_grad)
            return;
        T* g = xn->grad_ref().data();
        const T go = on->grad[0];
        for (std::int64_t i = 0; i < n; ++i)
            g[i] += go;
    };
    return attach("sum_all", std::move(out), {x.node()}, std::move(backward));
}

// ------------------------------------------------- explicit instantiations

#define LONGISEG_INSTANTIATE_OPS(T)                                                              \
    template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
    template Tensor<T> conv_transpose3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                           int, int);                                            \
    template Tensor<T> instance_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                        double);                                                 \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                             \
    template Tensor<T> softmax_channel<T>(const Tensor<T>&);                                     \
    template Tensor<T> avgpool_s<T>(const Tensor<T>&, int, int, int);                            \
    template Tensor<T> maxpool_s<T>(const Tensor<T>&, int, int, int);                            \
    template Tensor<T> global_avgpool_s<T>(const Tensor<T>&);                                    \
    template Tensor<T> global_maxpool_s<T>(const Tensor<T>&);                                    \
    template Tensor<T> avgpool_c<T>(const Tensor<T>&);                                           \
    template Tensor<T> maxpool_c<T>(const Tensor<T>&);                                           \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                            \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul_channelwise<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> mul_spatialwise<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
    template Tensor<T> scale<T>(const Tensor<T>&, double);                                       \
    template Tensor<T> sum_all<T>(const Tensor<T>&);

LONGISEG_INSTANTIATE_OPS(float)
LONGISEG_INSTANTIATE_OPS(double)

#undef LONGISEG_INSTANTIATE_OPS

}  // namespace longiseg
