#include "conv_kernels.hpp"

#include <algorithm>
#include <vector>

#include "gemm.hpp"

namespace voxelsr::ad::detail {

namespace {

// Upper bound on patch-matrix elements held at once.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 17;

struct Dims {
    std::int64_t d, h, w;
    std::int64_t kd, kh, kw;
    std::int64_t od, oh, ow;
    std::int64_t pd, ph, pw;
    std::int64_t s;
    std::int64_t cin, cout;
    std::int64_t taps() const { return kd * kh * kw; }
    std::int64_t rows() const { return cin * taps(); }
    std::int64_t in_plane() const { return d * h * w; }
    std::int64_t out_plane() const { return od * oh * ow; }
    bool pointwise() const {
        return kd == 1 && kh == 1 && kw == 1 && s == 1 && pd == 0 && ph == 0 && pw == 0 && od == d && oh == h && ow == w;
    }
};

Dims unpack(const ConvGeometry& g) {
    return Dims{g.in[0],         g.in[1],         g.in[2],         g.kernel[0],   g.kernel[1],
                g.kernel[2],     g.out[0],        g.out[1],        g.out[2],      g.pad_before[0],
                g.pad_before[1], g.pad_before[2], g.stride,        g.in_channels, g.out_channels};
}

std::int64_t planes_per_chunk(const Dims& d) {
    const std::int64_t per_plane = d.rows() * d.oh * d.ow;
    return std::clamp<std::int64_t>(kColumnBudget / std::max<std::int64_t>(per_plane, 1), 1, d.od);
}

// Visits every (patch-matrix row, output row) pair of output planes [z0, z1).
// `fn(dst_row, src_row_or_null, c_offset)` where src is the input row feeding
// the destination row, or null when the row lies in padding.
template <typename T, typename Fn>
void for_each_row(const Dims& d, T* xn, std::int64_t z0, std::int64_t z1, T* col, Fn&& fn) {
    const std::int64_t pc = (z1 - z0) * d.oh * d.ow;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < d.cin; ++ci) {
        for (std::int64_t a = 0; a < d.kd; ++a) {
            for (std::int64_t b = 0; b < d.kh; ++b) {
                for (std::int64_t c = 0; c < d.kw; ++c, ++row) {
                    T* dst = col + row * pc;
                    for (std::int64_t zo = z0; zo < z1; ++zo) {
                        const std::int64_t zi = zo * d.s + a - d.pd;
                        for (std::int64_t yo = 0; yo < d.oh; ++yo) {
                            const std::int64_t yi = yo * d.s + b - d.ph;
                            T* drow = dst + ((zo - z0) * d.oh + yo) * d.ow;
                            if (zi < 0 || zi >= d.d || yi < 0 || yi >= d.h) {
                                fn(drow, static_cast<T*>(nullptr), c);
                            } else {
                                fn(drow, xn + ((ci * d.d + zi) * d.h + yi) * d.w, c);
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void im2col(const Dims& d, const T* xn, std::int64_t z0, std::int64_t z1, T* col) {
    for_each_row(d, const_cast<T*>(xn), z0, z1, col, [&](T* dst, T* src, std::int64_t c) {
        if (!src) {
            std::fill(dst, dst + d.ow, T(0));
            return;
        }
        if (d.s == 1) {
            const std::int64_t lo = std::clamp<std::int64_t>(d.pw - c, 0, d.ow);
            const std::int64_t hi = std::clamp<std::int64_t>(d.w + d.pw - c, lo, d.ow);
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + c - d.pw, src + hi + c - d.pw, dst + lo);
            std::fill(dst + hi, dst + d.ow, T(0));
            return;
        }
        for (std::int64_t xo = 0; xo < d.ow; ++xo) {
            const std::int64_t xi = xo * d.s + c - d.pw;
            dst[xo] = (xi >= 0 && xi < d.w) ? src[xi] : T(0);
        }
    });
}

template <typename T>
void col2im_add(const Dims& d, T* xn, std::int64_t z0, std::int64_t z1, T* col) {
    for_each_row(d, xn, z0, z1, col, [&](T* src_col, T* dst, std::int64_t c) {
        if (!dst) return;
        if (d.s == 1) {
            const std::int64_t lo = std::clamp<std::int64_t>(d.pw - c, 0, d.ow);
            const std::int64_t hi = std::clamp<std::int64_t>(d.w + d.pw - c, lo, d.ow);
            T* out = dst + c - d.pw;
            for (std::int64_t xo = lo; xo < hi; ++xo) out[xo] += src_col[xo];
            return;
        }
        for (std::int64_t xo = 0; xo < d.ow; ++xo) {
            const std::int64_t xi = xo * d.s + c - d.pw;
            if (xi >= 0 && xi < d.w) dst[xi] += src_col[xo];
        }
    });
}

// Stride-1 lowering without a patch matrix. On a zero-padded copy of the
// input, output (z, y, x) reads padded voxel (z + a, y + b, x + c), so with
// outputs laid out on the padded strides every tap is a constant offset into
// the flattened grid and contributes one GEMM over a strided view. Output
// slots that fall in the padded rows and columns are scratch.
struct Shifted {
    std::int64_t hp, wp, plane, span;

    explicit Shifted(const Dims& d)
        : hp(d.oh + d.kh - 1), wp(d.ow + d.kw - 1), plane((d.od + d.kd - 1) * hp * wp),
          span(((d.od - 1) * hp + d.oh - 1) * wp + d.ow) {}
    std::int64_t offset(std::int64_t a, std::int64_t b, std::int64_t c) const { return (a * hp + b) * wp + c; }
    std::int64_t out_slot(std::int64_t z, std::int64_t y) const { return (z * hp + y) * wp; }
};

template <typename T>
void pad_input(const Dims& d, const Shifted& g, const T* xn, T* xp) {
    std::fill(xp, xp + d.cin * g.plane, T(0));
    for (std::int64_t ci = 0; ci < d.cin; ++ci)
        for (std::int64_t z = 0; z < d.d; ++z)
            for (std::int64_t y = 0; y < d.h; ++y) {
                const T* src = xn + ((ci * d.d + z) * d.h + y) * d.w;
                std::copy(src, src + d.w, xp + ci * g.plane + ((z + d.pd) * g.hp + y + d.ph) * g.wp + d.pw);
            }
}

// Weights (cout, cin, taps) regrouped as one (cout, cin) matrix per tap.
template <typename T>
std::vector<T> weights_by_tap(const Dims& d, const T* w) {
    const std::int64_t taps = d.taps();
    std::vector<T> out(static_cast<std::size_t>(d.cout * d.cin * taps));
    for (std::int64_t o = 0; o < d.cout; ++o)
        for (std::int64_t i = 0; i < d.cin; ++i)
            for (std::int64_t t = 0; t < taps; ++t) out[static_cast<std::size_t>((t * d.cout + o) * d.cin + i)] = w[(o * d.cin + i) * taps + t];
    return out;
}

// Dense (cout, od, oh, ow) <-> padded-stride (cout, span) layouts.
template <typename T>
void spread_output(const Dims& d, const Shifted& g, const T* dense, T* slots) {
    std::fill(slots, slots + d.cout * g.span, T(0));
    for (std::int64_t co = 0; co < d.cout; ++co)
        for (std::int64_t z = 0; z < d.od; ++z)
            for (std::int64_t y = 0; y < d.oh; ++y) {
                const T* src = dense + ((co * d.od + z) * d.oh + y) * d.ow;
                std::copy(src, src + d.ow, slots + co * g.span + g.out_slot(z, y));
            }
}

template <typename T>
void gather_output(const Dims& d, const Shifted& g, const T* slots, T* dense) {
    for (std::int64_t co = 0; co < d.cout; ++co)
        for (std::int64_t z = 0; z < d.od; ++z)
            for (std::int64_t y = 0; y < d.oh; ++y) {
                const T* src = slots + co * g.span + g.out_slot(z, y);
                std::copy(src, src + d.ow, dense + ((co * d.od + z) * d.oh + y) * d.ow);
            }
}

template <typename T>
void shifted_forward(const Dims& d, std::int64_t batch, const T* x, const T* w, T* y) {
    const Shifted g(d);
    const auto wt = weights_by_tap(d, w);
    std::vector<T> xp(static_cast<std::size_t>(d.cin * g.plane));
    std::vector<T> slots(static_cast<std::size_t>(d.cout * g.span));
    for (std::int64_t n = 0; n < batch; ++n) {
        pad_input(d, g, x + n * d.cin * d.in_plane(), xp.data());
        std::int64_t t = 0;
        for (std::int64_t a = 0; a < d.kd; ++a)
            for (std::int64_t b = 0; b < d.kh; ++b)
                for (std::int64_t c = 0; c < d.kw; ++c, ++t) {
                    gemm(false, false, d.cout, g.span, d.cin, 1.0, wt.data() + t * d.cout * d.cin, d.cin,
                         xp.data() + g.offset(a, b, c), g.plane, t == 0 ? 0.0 : 1.0, slots.data(), g.span);
                }
        gather_output(d, g, slots.data(), y + n * d.cout * d.out_plane());
    }
}

template <typename T>
void shifted_input_grad(const Dims& d, std::int64_t batch, const T* gy, const T* w, T* gx) {
    const Shifted g(d);
    const auto wt = weights_by_tap(d, w);
    std::vector<T> gxp(static_cast<std::size_t>(d.cin * g.plane));
    std::vector<T> slots(static_cast<std::size_t>(d.cout * g.span));
    for (std::int64_t n = 0; n < batch; ++n) {
        spread_output(d, g, gy + n * d.cout * d.out_plane(), slots.data());
        std::fill(gxp.begin(), gxp.end(), T(0));
        std::int64_t t = 0;
        for (std::int64_t a = 0; a < d.kd; ++a)
            for (std::int64_t b = 0; b < d.kh; ++b)
                for (std::int64_t c = 0; c < d.kw; ++c, ++t) {
                    gemm(true, false, d.cin, g.span, d.cout, 1.0, wt.data() + t * d.cout * d.cin, d.cin,
                         slots.data(), g.span, 1.0, gxp.data() + g.offset(a, b, c), g.plane);
                }
        T* gxn = gx + n * d.cin * d.in_plane();
        for (std::int64_t ci = 0; ci < d.cin; ++ci)
            for (std::int64_t z = 0; z < d.d; ++z)
                for (std::int64_t y = 0; y < d.h; ++y) {
                    const T* src = gxp.data() + ci * g.plane + ((z + d.pd) * g.hp + y + d.ph) * g.wp + d.pw;
                    std::copy(src, src + d.w, gxn + ((ci * d.d + z) * d.h + y) * d.w);
                }
    }
}

template <typename T>
void shifted_weight_grad(const Dims& d, std::int64_t batch, const T* x, const T* gy, T* gw) {
    const Shifted g(d);
    const std::int64_t taps = d.taps();
    std::vector<T> acc(static_cast<std::size_t>(taps * d.cout * d.cin), T(0));
    std::vector<T> xp(static_cast<std::size_t>(d.cin * g.plane));
    std::vector<T> slots(static_cast<std::size_t>(d.cout * g.span));
    for (std::int64_t n = 0; n < batch; ++n) {
        pad_input(d, g, x + n * d.cin * d.in_plane(), xp.data());
        spread_output(d, g, gy + n * d.cout * d.out_plane(), slots.data());
        std::int64_t t = 0;
        for (std::int64_t a = 0; a < d.kd; ++a)
            for (std::int64_t b = 0; b < d.kh; ++b)
                for (std::int64_t c = 0; c < d.kw; ++c, ++t) {
                    gemm(false, true, d.cout, d.cin, g.span, 1.0, slots.data(), g.span, xp.data() + g.offset(a, b, c),
                         g.plane, 1.0, acc.data() + t * d.cout * d.cin, d.cin);
                }
    }
    for (std::int64_t o = 0; o < d.cout; ++o)
        for (std::int64_t i = 0; i < d.cin; ++i)
            for (std::int64_t t = 0; t < taps; ++t) gw[(o * d.cin + i) * taps + t] = acc[static_cast<std::size_t>((t * d.cout + o) * d.cin + i)];
}

}  // namespace

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* w, T* y) {
    const Dims d = unpack(g);
    const std::int64_t p_in = d.in_plane();
    const std::int64_t p_out = d.out_plane();
    const std::int64_t k = d.rows();
    if (d.pointwise()) {
        for (std::int64_t n = 0; n < g.batch; ++n) {
            gemm(false, false, d.cout, p_out, d.cin, 1.0, w, d.cin, x + n * d.cin * p_in, p_in, 0.0,
                 y + n * d.cout * p_out, p_out);
        }
        return;
    }
    if (d.s == 1) return shifted_forward(d, g.batch, x, w, y);
    const std::int64_t zc = planes_per_chunk(d);
    std::vector<T> col(static_cast<std::size_t>(k * zc * d.oh * d.ow));
    for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* xn = x + n * d.cin * p_in;
        T* yn = y + n * d.cout * p_out;
        for (std::int64_t z0 = 0; z0 < d.od; z0 += zc) {
            const std::int64_t z1 = std::min(d.od, z0 + zc);
            const std::int64_t pc = (z1 - z0) * d.oh * d.ow;
            im2col(d, xn, z0, z1, col.data());
            gemm(false, false, d.cout, pc, k, 1.0, w, k, col.data(), pc, 0.0, yn + z0 * d.oh * d.ow, p_out);
        }
    }
}

template <typename T>
void conv_input_grad(const ConvGeometry& g, const T* grad_out, const T* w, T* grad_x) {
    const Dims d = unpack(g);
    const std::int64_t p_in = d.in_plane();
    const std::int64_t p_out = d.out_plane();
    const std::int64_t k = d.rows();
    if (d.pointwise()) {
        for (std::int64_t n = 0; n < g.batch; ++n) {
            gemm(true, false, d.cin, p_in, d.cout, 1.0, w, d.cin, grad_out + n * d.cout * p_out, p_out, 0.0,
                 grad_x + n * d.cin * p_in, p_in);
        }
        return;
    }
    if (d.s == 1) return shifted_input_grad(d, g.batch, grad_out, w, grad_x);
    std::fill(grad_x, grad_x + g.batch * d.cin * p_in, T(0));
    const std::int64_t zc = planes_per_chunk(d);
    std::vector<T> col(static_cast<std::size_t>(k * zc * d.oh * d.ow));
    for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* gyn = grad_out + n * d.cout * p_out;
        T* gxn = grad_x + n * d.cin * p_in;
        for (std::int64_t z0 = 0; z0 < d.od; z0 += zc) {
            const std::int64_t z1 = std::min(d.od, z0 + zc);
            const std::int64_t pc = (z1 - z0) * d.oh * d.ow;
            gemm(true, false, k, pc, d.cout, 1.0, w, k, gyn + z0 * d.oh * d.ow, p_out, 0.0, col.data(), pc);
            col2im_add(d, gxn, z0, z1, col.data());
        }
    }
}

template <typename T>
void conv_weight_grad(const ConvGeometry& g, const T* x, const T* grad_out, T* grad_w) {
    const Dims d = unpack(g);
    const std::int64_t p_in = d.in_plane();
    const std::int64_t p_out = d.out_plane();
    const std::int64_t k = d.rows();
    std::fill(grad_w, grad_w + d.cout * k, T(0));
    if (d.pointwise()) {
        for (std::int64_t n = 0; n < g.batch; ++n) {
            gemm(false, true, d.cout, d.cin, p_in, 1.0, grad_out + n * d.cout * p_out, p_out, x + n * d.cin * p_in,
                 p_in, 1.0, grad_w, d.cin);
        }
        return;
    }
    if (d.s == 1) return shifted_weight_grad(d, g.batch, x, grad_out, grad_w);
    const std::int64_t zc = planes_per_chunk(d);
    std::vector<T> col(static_cast<std::size_t>(k * zc * d.oh * d.ow));
    for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* xn = x + n * d.cin * p_in;
        const T* gyn = grad_out + n * d.cout * p_out;
        for (std::int64_t z0 = 0; z0 < d.od; z0 += zc) {
            const std::int64_t z1 = std::min(d.od, z0 + zc);
            const std::int64_t pc = (z1 - z0) * d.oh * d.ow;
            im2col(d, xn, z0, z1, col.data());
            gemm(false, true, d.cout, k, pc, 1.0, gyn + z0 * d.oh * d.ow, p_out, col.data(), pc, 1.0, grad_w, k);
        }
    }
}

template void conv_forward<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv_forward<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv_input_grad<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv_input_grad<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv_weight_grad<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv_weight_grad<double>(const ConvGeometry&, const double*, const double*, double*);

}  // namespace voxelsr::ad::detail
