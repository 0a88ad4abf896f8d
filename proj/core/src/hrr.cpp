#include "hmr/hrr.hpp"

#include <cmath>
#include <complex>

#include "hmr/fft.hpp"

namespace hmr {

namespace {

using cplx = std::complex<double>;

template <class T>
void check_equal_1d(const char* op, const Tensor<T>& x, const Tensor<T>& y) {
    if (x.rank() != 1 || y.rank() != 1 || x.dim(0) != y.dim(0))
        throw ShapeError(std::string(op) + ": expected equal-length vectors, got " + shape_str(x.shape()) +
                         " and " + shape_str(y.shape()));
}

template <class T>
void naive_conv_span(std::span<const T> x, std::span<const T> y, std::span<T> out) {
    const std::size_t d = x.size();
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < d; ++k) acc += static_cast<double>(x[k]) * y[(j + d - k) % d];
        out[j] = static_cast<T>(acc);
    }
}

template <class T>
void naive_corr_span(std::span<const T> x, std::span<const T> y, std::span<T> out) {
    const std::size_t d = x.size();
    for (std::size_t k = 0; k < d; ++k) {
        double acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(x[j]) * y[(j + d - k) % d];
        out[k] = static_cast<T>(acc);
    }
}

template <class T>
void fft_conv_span(std::span<const T> x, std::span<const T> y, std::span<T> out) {
    fft::circ_conv_batch<T>(x.data(), y.data(), out.data(), 1, x.size());
}

template <class T>
void fft_corr_span(std::span<const T> x, std::span<const T> y, std::span<T> out) {
    fft::circ_corr_batch<T>(x.data(), y.data(), out.data(), 1, x.size());
}

// Shared backward for both convolution paths:
//   z = x (*) y  =>  dx += corr(dz, y), dy += corr(dz, x).
template <class T>
void record_conv_backward(const char* name, Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y,
                          Tensor<T>& out) {
    if (!tape || (!x.requires_grad() && !y.requires_grad())) return;
    mark_output(tape, out);
    Tensor<T> xc = x, yc = y, oc = out;
    bool gx = x.requires_grad(), gy = y.requires_grad();
    tape->record(name, [xc, yc, oc, gx, gy]() mutable {
        const std::size_t d = xc.dim(0);
        std::vector<T> tmp(d);
        auto dz = oc.grad();
        if (gx) {
            fft_corr_span<T>(dz, yc.data(), std::span<T>(tmp));
            auto dx = xc.grad();
            for (std::size_t i = 0; i < d; ++i) dx[i] += tmp[i];
        }
        if (gy) {
            fft_corr_span<T>(dz, xc.data(), std::span<T>(tmp));
            auto dy = yc.grad();
            for (std::size_t i = 0; i < d; ++i) dy[i] += tmp[i];
        }
    });
}

}  // namespace

template <class T>
Tensor<T> circ_conv_naive(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
    check_equal_1d("circ_conv_naive", x, y);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    naive_conv_span<T>(x.data(), y.data(), out.data());
    record_conv_backward("circ_conv_naive", tape, x, y, out);
    return out;
}

template <class T>
Tensor<T> circ_conv_fft(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
    check_equal_1d("circ_conv_fft", x, y);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    fft_conv_span<T>(x.data(), y.data(), out.data());
    record_conv_backward("circ_conv_fft", tape, x, y, out);
    return out;
}

template <class T>
Tensor<T> circ_corr(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
    check_equal_1d("circ_corr", x, y);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    fft_corr_span<T>(x.data(), y.data(), out.data());
    if (tape && (x.requires_grad() || y.requires_grad())) {
        mark_output(tape, out);
        Tensor<T> xc = x, yc = y, oc = out;
        bool gx = x.requires_grad(), gy = y.requires_grad();
        // w = corr(x,y)  =>  dx += conv(dw, y), dy += corr(x, dw).
        tape->record("circ_corr", [xc, yc, oc, gx, gy]() mutable {
            const std::size_t d = xc.dim(0);
            std::vector<T> tmp(d);
            auto dw = oc.grad();
            if (gx) {
                fft_conv_span<T>(dw, yc.data(), std::span<T>(tmp));
                auto dx = xc.grad();
                for (std::size_t i = 0; i < d; ++i) dx[i] += tmp[i];
            }
            if (gy) {
                fft_corr_span<T>(xc.data(), dw, std::span<T>(tmp));
                auto dy = yc.grad();
                for (std::size_t i = 0; i < d; ++i) dy[i] += tmp[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> circ_conv_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y) {
    if (x.shape() != y.shape() || x.rank() < 1)
        throw ShapeError("circ_conv_rows: shapes differ, " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    fft::circ_conv_batch<T>(x.data().data(), y.data().data(), out.data().data(), rows, d);
    if (tape && (x.requires_grad() || y.requires_grad())) {
        mark_output(tape, out);
        Tensor<T> xc = x, yc = y, oc = out;
        bool gx = x.requires_grad(), gy = y.requires_grad();
        tape->record("circ_conv_rows", [xc, yc, oc, gx, gy, rows, d]() mutable {
            std::vector<T> tmp(rows * d);
            const T* dz = oc.grad().data();
            if (gx) {
                fft::circ_corr_batch<T>(dz, yc.data().data(), tmp.data(), rows, d);
                auto dx = xc.grad();
                for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
            }
            if (gy) {
                fft::circ_corr_batch<T>(dz, xc.data().data(), tmp.data(), rows, d);
                auto dy = yc.grad();
                for (std::size_t i = 0; i < tmp.size(); ++i) dy[i] += tmp[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> bind_embed(Tape<T>* tape, const Tensor<T>& item_emb, const Tensor<T>& attr_emb,
                     const Tensor<T>& alpha, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (item_emb.shape() != attr_emb.shape())
        throw ShapeError("bind_embed: item/attr shapes differ, " + shape_str(item_emb.shape()) + " vs " +
                         shape_str(attr_emb.shape()));
    Tensor<T> bound = circ_conv_rows(tape, item_emb, attr_emb);
    Tensor<T> scaled = mul(tape, bound, alpha);
    Tensor<T> summed = add(tape, item_emb, scaled);
    return layer_norm(tape, summed, gain, bias, eps);
}

std::size_t bundle_length(std::size_t len, std::size_t k) { return (len + k - 1) / k; }

template <class T>
Tensor<T> bundle_window(Tape<T>* tape, const Tensor<T>& tokens, const Tensor<T>& roles, std::size_t k,
                        const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (k == 0) throw ConfigError("bundle_window: window size k must be >= 1");
    std::size_t batch = 1, len, d;
    if (tokens.rank() == 2) {
        len = tokens.dim(0);
        d = tokens.dim(1);
    } else if (tokens.rank() == 3) {
        batch = tokens.dim(0);
        len = tokens.dim(1);
        d = tokens.dim(2);
    } else {
        throw ShapeError("bundle_window: expected [L,d] or [B,L,d] tokens, got " + shape_str(tokens.shape()));
    }
    if (len == 0) throw ShapeError("bundle_window: empty sequence");
    if (roles.rank() != 2 || roles.dim(0) < k || roles.dim(1) != d)
        throw ShapeError("bundle_window: roles " + shape_str(roles.shape()) + " must cover k=" +
                         std::to_string(k) + " rows of width " + std::to_string(d));

    const std::size_t wcount = bundle_length(len, k);
    const std::size_t rows = batch * len;
    Shape raw_shape = tokens.rank() == 2 ? Shape{wcount, d} : Shape{batch, wcount, d};
    Tensor<T> raw = Tensor<T>::zeros(raw_shape);

    // Token t sits at position t mod k of its window, so one batched
    // convolution against role rows tiled with period k covers the whole
    // sequence; window sums follow.
    std::vector<T> tiled_roles(rows * d);
    auto rd = roles.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
            std::copy_n(rd.begin() + (t % k) * d, d, tiled_roles.begin() + (b * len + t) * d);

    std::vector<T> conv_out(rows * d);
    fft::circ_conv_batch<T>(tokens.data().data(), tiled_roles.data(), conv_out.data(), rows, d);

    auto od = raw.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) {
            const std::size_t j = t / k;
            T* out_row = od.data() + (b * wcount + j) * d;
            const T* src = conv_out.data() + (b * len + t) * d;
            for (std::size_t i = 0; i < d; ++i) out_row[i] += src[i];
        }

    if (tape && (tokens.requires_grad() || roles.requires_grad())) {
        mark_output(tape, raw);
        Tensor<T> tc = tokens, rc = roles, oc = raw;
        bool gt = tokens.requires_grad(), gr = roles.requires_grad();
        auto tiled = std::make_shared<std::vector<T>>(std::move(tiled_roles));
        tape->record("bundle_window", [tc, rc, oc, gt, gr, tiled, batch, len, d, k, wcount]() mutable {
            const std::size_t rows = batch * len;
            auto dz = oc.grad();
            // d(window_j) fans out to every constituent token position
            std::vector<T> dz_expand(rows * d);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < len; ++t)
                    std::copy_n(dz.begin() + (b * wcount + t / k) * d, d,
                                dz_expand.begin() + (b * len + t) * d);
            std::vector<T> tmp(rows * d);
            if (gt) {
                fft::circ_corr_batch<T>(dz_expand.data(), tiled->data(), tmp.data(), rows, d);
                auto dt = tc.grad();
                for (std::size_t i = 0; i < tmp.size(); ++i) dt[i] += tmp[i];
            }
            if (gr) {
                fft::circ_corr_batch<T>(dz_expand.data(), tc.data().data(), tmp.data(), rows, d);
                auto dr = rc.grad();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t t = 0; t < len; ++t) {
                        const T* src = tmp.data() + (b * len + t) * d;
                        T* dst = dr.data() + (t % k) * d;
                        for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
                    }
            }
        });
    }
    return layer_norm(tape, raw, gain, bias, eps);
}

template <class T>
std::size_t nearest_cosine(std::span<const T> v, const Tensor<T>& codebook) {
    if (codebook.rank() != 2 || codebook.dim(1) != v.size())
        throw ShapeError("nearest_cosine: codebook " + shape_str(codebook.shape()) + " vs query of length " +
                         std::to_string(v.size()));
    const std::size_t rows = codebook.dim(0), d = v.size();
    double vn = 0;
    for (T x : v) vn += static_cast<double>(x) * x;
    vn = std::sqrt(vn);
    auto cd = codebook.data();
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0, rn = 0;
        const T* row = cd.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            dot += static_cast<double>(row[i]) * v[i];
            rn += static_cast<double>(row[i]) * row[i];
        }
        double sim = dot / (std::sqrt(rn) * vn + 1e-30);
        if (sim > best_sim) {
            best_sim = sim;
            best = r;
        }
    }
    return best;
}

#define HMR_INSTANTIATE_HRR(T)                                                                             \
    template Tensor<T> circ_conv_naive<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> circ_conv_fft<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                     \
    template Tensor<T> circ_corr<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> circ_conv_rows<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                    \
    template Tensor<T> bind_embed<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     const Tensor<T>&, const Tensor<T>&, T);                               \
    template Tensor<T> bundle_window<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                        const Tensor<T>&, const Tensor<T>&, T);                            \
    template std::size_t nearest_cosine<T>(std::span<const T>, const Tensor<T>&);

HMR_INSTANTIATE_HRR(float)
HMR_INSTANTIATE_HRR(double)

}  // namespace hmr
