#include "hmr/fft.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <unordered_map>

#include "hmr/errors.hpp"

namespace hmr::fft {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

using cplx = std::complex<double>;

// Plain complex product; std::complex operator* lowers to a libgcc call
// with Annex G special-case handling, which dominates the butterfly cost.
inline cplx cmul(cplx a, cplx b) {
    return {a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real()};
}

// ---------------------------------------------------------------------------
// Power-of-two plans: precomputed bit-reversal pairs and per-stage
// forward twiddles (the inverse conjugates them on the fly).

struct Pow2Plan {
    std::size_t n;
    std::vector<std::uint32_t> swap_a, swap_b;
    std::vector<cplx> twiddles;  // stages concatenated: len=2 holds 1 root, len=4 holds 2, ...

    explicit Pow2Plan(std::size_t size) : n(size) {
        for (std::size_t i = 1, j = 0; i < n; ++i) {
            std::size_t bit = n >> 1;
            for (; j & bit; bit >>= 1) j ^= bit;
            j ^= bit;
            if (i < j) {
                swap_a.push_back(static_cast<std::uint32_t>(i));
                swap_b.push_back(static_cast<std::uint32_t>(j));
            }
        }
        twiddles.reserve(n > 1 ? n - 1 : 0);
        for (std::size_t len = 2; len <= n; len <<= 1)
            for (std::size_t j = 0; j < len / 2; ++j) {
                const double ang = -kTwoPi * static_cast<double>(j) / static_cast<double>(len);
                twiddles.emplace_back(std::cos(ang), std::sin(ang));
            }
    }

    template <bool Inverse>
    void run(cplx* a) const {
        for (std::size_t s = 0; s < swap_a.size(); ++s) std::swap(a[swap_a[s]], a[swap_b[s]]);
        const cplx* tw = twiddles.data();
        for (std::size_t len = 2; len <= n; len <<= 1) {
            const std::size_t half = len / 2;
            for (std::size_t i = 0; i < n; i += len) {
                for (std::size_t j = 0; j < half; ++j) {
                    const cplx w = Inverse ? std::conj(tw[j]) : tw[j];
                    cplx u = a[i + j];
                    cplx v = cmul(a[i + j + half], w);
                    a[i + j] = u + v;
                    a[i + j + half] = u - v;
                }
            }
            tw += half;
        }
    }
};

// Chirp factor exp(sign * i*pi*k^2/n); k^2 reduced mod 2n in integers so
// the angle stays accurate for large k.
cplx chirp(std::size_t k, std::size_t n, double sign) {
    const std::uint64_t k2 = (static_cast<std::uint64_t>(k) * k) % (2 * static_cast<std::uint64_t>(n));
    const double ang = sign * (kTwoPi / 2.0) * static_cast<double>(k2) / static_cast<double>(n);
    return {std::cos(ang), std::sin(ang)};
}

// Bluestein plan for one length: the n-point DFT becomes an m-point
// (power-of-two) circular convolution against a fixed chirp kernel whose
// spectrum is cached per direction.
struct BluesteinPlan {
    std::size_t n, m;
    std::shared_ptr<const Pow2Plan> p2;
    std::vector<cplx> chirp_fwd;              // e^{-i pi k^2 / n}
    std::vector<cplx> kernel_fwd, kernel_inv; // FFT_m of the mirrored conjugate chirp

    BluesteinPlan(std::size_t size, std::shared_ptr<const Pow2Plan> pow2) : n(size), m(pow2->n), p2(pow2) {
        chirp_fwd.resize(n);
        for (std::size_t k = 0; k < n; ++k) chirp_fwd[k] = chirp(k, n, -1.0);
        kernel_fwd = build_kernel(false);
        kernel_inv = build_kernel(true);
    }

    std::vector<cplx> build_kernel(bool inverse) const {
        std::vector<cplx> v(m, cplx(0.0, 0.0));
        for (std::size_t k = 0; k < n; ++k) {
            const cplx c = inverse ? std::conj(chirp_fwd[k]) : chirp_fwd[k];
            v[k] = std::conj(c);
        }
        for (std::size_t k = 1; k < n; ++k) v[m - k] = v[k];
        p2->run<false>(v.data());
        return v;
    }

    template <bool Inverse>
    void run(cplx* a, std::vector<cplx>& scratch) const {
        scratch.assign(m, cplx(0.0, 0.0));
        for (std::size_t k = 0; k < n; ++k) {
            const cplx c = Inverse ? std::conj(chirp_fwd[k]) : chirp_fwd[k];
            scratch[k] = cmul(a[k], c);
        }
        p2->run<false>(scratch.data());
        const auto& kernel = Inverse ? kernel_inv : kernel_fwd;
        for (std::size_t k = 0; k < m; ++k) scratch[k] = cmul(scratch[k], kernel[k]);
        p2->run<true>(scratch.data());
        const double scale = 1.0 / static_cast<double>(m);
        for (std::size_t k = 0; k < n; ++k) {
            const cplx c = Inverse ? std::conj(chirp_fwd[k]) : chirp_fwd[k];
            const cplx s = cmul(scratch[k], c);
            a[k] = cplx(s.real() * scale, s.imag() * scale);
        }
    }
};

std::size_t next_pow2(std::size_t n) {
    std::size_t m = 1;
    while (m < n) m <<= 1;
    return m;
}

struct PlanCache {
    std::unordered_map<std::size_t, std::shared_ptr<const Pow2Plan>> pow2;
    std::unordered_map<std::size_t, std::shared_ptr<const BluesteinPlan>> bluestein;
    std::vector<cplx> scratch;   // Bluestein working buffer
    std::vector<cplx> row_buf;   // packed row spectra

    const Pow2Plan& pow2_plan(std::size_t n) {
        auto& slot = pow2[n];
        if (!slot) slot = std::make_shared<Pow2Plan>(n);
        return *slot;
    }
    const BluesteinPlan& bluestein_plan(std::size_t n) {
        auto& slot = bluestein[n];
        if (!slot) {
            const std::size_t m = next_pow2(2 * n - 1);
            auto& p2 = pow2[m];
            if (!p2) p2 = std::make_shared<Pow2Plan>(m);
            slot = std::make_shared<BluesteinPlan>(n, p2);
        }
        return *slot;
    }
};

PlanCache& cache() {
    thread_local PlanCache c;
    return c;
}

// Plan resolved once, reusable across many rows of the same length.
struct Transformer {
    std::size_t n = 0;
    const Pow2Plan* p2 = nullptr;
    const BluesteinPlan* blu = nullptr;
    std::vector<cplx>* scratch = nullptr;
    double inv_scale = 1.0;

    explicit Transformer(std::size_t size) : n(size) {
        if (n <= 1) return;
        auto& c = cache();
        if (is_power_of_two(n)) {
            p2 = &c.pow2_plan(n);
        } else {
            blu = &c.bluestein_plan(n);
            scratch = &c.scratch;
        }
        inv_scale = 1.0 / static_cast<double>(n);
    }

    void fwd(cplx* a) const {
        if (n <= 1) return;
        if (p2)
            p2->run<false>(a);
        else
            blu->run<false>(a, *scratch);
    }

    void inv(cplx* a) const {
        if (n <= 1) return;
        if (p2)
            p2->run<true>(a);
        else
            blu->run<true>(a, *scratch);
        for (std::size_t i = 0; i < n; ++i) a[i] *= inv_scale;
    }
};

// Both inputs are real, so one packed transform of x + i*y yields both
// spectra: X_k = (Z_k + conj(Z_{-k}))/2, Y_k = -i (Z_k - conj(Z_{-k}))/2.
template <class T>
void combine_rows(const T* x, const T* y, T* out, std::size_t rows, std::size_t d, bool conjugate_y) {
    if (d == 0) return;
    const Transformer tr(d);
    auto& z = cache().row_buf;
    if (z.size() < d) z.resize(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        const T* yr = y + r * d;
        for (std::size_t i = 0; i < d; ++i) z[i] = cplx(static_cast<double>(xr[i]), static_cast<double>(yr[i]));
        tr.fwd(z.data());
        // Unpack and multiply in place; entries k and d-k are consumed
        // pairwise, so stash both before overwriting.
        for (std::size_t i = 0; i <= d / 2; ++i) {
            const std::size_t j = (d - i) % d;
            const cplx zi = z[i], zj = z[j];
            const cplx xi = 0.5 * (zi + std::conj(zj));
            const cplx yi = cmul(cplx(0.0, -0.5), zi - std::conj(zj));
            z[i] = conjugate_y ? cmul(xi, std::conj(yi)) : cmul(xi, yi);
            if (j != i) {
                const cplx xj = 0.5 * (zj + std::conj(zi));
                const cplx yj = cmul(cplx(0.0, -0.5), zj - std::conj(zi));
                z[j] = conjugate_y ? cmul(xj, std::conj(yj)) : cmul(xj, yj);
            }
        }
        tr.inv(z.data());
        T* or_ = out + r * d;
        for (std::size_t i = 0; i < d; ++i) or_[i] = static_cast<T>(z[i].real());
    }
}

}  // namespace

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void transform(std::vector<cplx>& a, bool inverse) {
    const Transformer tr(a.size());
    if (inverse)
        tr.inv(a.data());
    else
        tr.fwd(a.data());
}

namespace {

void check_lengths(std::span<const double> x, std::span<const double> y, std::span<double> out) {
    if (y.size() != x.size() || out.size() != x.size())
        throw ShapeError("circ_conv: length mismatch, " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
}

}  // namespace

void circ_conv(std::span<const double> x, std::span<const double> y, std::span<double> out) {
    check_lengths(x, y, out);
    combine_rows<double>(x.data(), y.data(), out.data(), 1, x.size(), false);
}

void circ_corr(std::span<const double> x, std::span<const double> y, std::span<double> out) {
    check_lengths(x, y, out);
    combine_rows<double>(x.data(), y.data(), out.data(), 1, x.size(), true);
}

template <class T>
void circ_conv_batch(const T* x, const T* y, T* out, std::size_t rows, std::size_t d) {
    combine_rows<T>(x, y, out, rows, d, false);
}

template <class T>
void circ_corr_batch(const T* x, const T* y, T* out, std::size_t rows, std::size_t d) {
    combine_rows<T>(x, y, out, rows, d, true);
}

template void circ_conv_batch<float>(const float*, const float*, float*, std::size_t, std::size_t);
template void circ_conv_batch<double>(const double*, const double*, double*, std::size_t, std::size_t);
template void circ_corr_batch<float>(const float*, const float*, float*, std::size_t, std::size_t);
template void circ_corr_batch<double>(const double*, const double*, double*, std::size_t, std::size_t);

}  // namespace hmr::fft
