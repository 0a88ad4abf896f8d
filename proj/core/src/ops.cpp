#include "hmr/ops.hpp"

#include <cmath>
#include <cstring>

namespace hmr {

namespace {

template <class T>
bool recording(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

enum class Bcast { Same, ScalarA, ScalarB, VecB };

template <class T>
Bcast resolve_bcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::ScalarB;
    if (a.size() == 1) return Bcast::ScalarA;
    if (b.rank() == 1 && a.rank() >= 2 && a.shape().back() == b.dim(0)) return Bcast::VecB;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const char* name, Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd,
                    DA dfda, DB dfdb) {
    Bcast bc = resolve_bcast(name, a, b);
    const Shape& out_shape = (bc == Bcast::ScalarA) ? b.shape() : a.shape();
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto ad = a.data(), bd = b.data();
    auto od = out.data();
    const std::size_t n = od.size();
    const std::size_t last = out_shape.empty() ? 1 : out_shape.back();
    switch (bc) {
        case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) od[i] = fwd(ad[i], bd[i]);
            break;
        case Bcast::ScalarB:
            for (std::size_t i = 0; i < n; ++i) od[i] = fwd(ad[i], bd[0]);
            break;
        case Bcast::ScalarA:
            for (std::size_t i = 0; i < n; ++i) od[i] = fwd(ad[0], bd[i]);
            break;
        case Bcast::VecB:
            for (std::size_t i = 0; i < n; ++i) od[i] = fwd(ad[i], bd[i % last]);
            break;
    }
    if (recording(tape, {&a, &b})) {
        mark_output(tape, out);
        Tensor<T> ac = a, bc_t = b, oc = out;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record(name, [ac, bc_t, oc, bc, ga, gb, dfda, dfdb, n, last]() mutable {
            auto dy = oc.grad();
            auto av = ac.data(), bv = bc_t.data();
            auto pick_a = [&](std::size_t i) { return bc == Bcast::ScalarA ? av[0] : av[i]; };
            auto pick_b = [&](std::size_t i) {
                if (bc == Bcast::ScalarB) return bv[0];
                if (bc == Bcast::VecB) return bv[i % last];
                return bv[i];
            };
            if (ga) {
                auto da = ac.grad();
                if (bc == Bcast::ScalarA) {
                    for (std::size_t i = 0; i < n; ++i) da[0] += dy[i] * dfda(pick_a(i), pick_b(i));
                } else {
                    for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * dfda(pick_a(i), pick_b(i));
                }
            }
            if (gb) {
                auto db = bc_t.grad();
                if (bc == Bcast::ScalarB) {
                    for (std::size_t i = 0; i < n; ++i) db[0] += dy[i] * dfdb(pick_a(i), pick_b(i));
                } else if (bc == Bcast::VecB) {
                    for (std::size_t i = 0; i < n; ++i) db[i % last] += dy[i] * dfdb(pick_a(i), pick_b(i));
                } else {
                    for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * dfdb(pick_a(i), pick_b(i));
                }
            }
        });
    }
    return out;
}

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(const char* name, Tape<T>* tape, const Tensor<T>& a, Fwd fwd, Bwd dfdx) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto ad = a.data();
    auto od = out.data();
    for (std::size_t i = 0; i < ad.size(); ++i) od[i] = fwd(ad[i]);
    if (recording(tape, {&a})) {
        mark_output(tape, out);
        Tensor<T> ac = a, oc = out;
        tape->record(name, [ac, oc, dfdx]() mutable {
            auto dy = oc.grad();
            auto av = ac.data(), ov = oc.data();
            auto da = ac.grad();
            for (std::size_t i = 0; i < av.size(); ++i) da[i] += dy[i] * dfdx(av[i], ov[i]);
        });
    }
    return out;
}

template <class T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_scalar(T x) {
    // Overflow-stable form: max(x,0) + log1p(exp(-|x|)).
    T m = x > T(0) ? x : T(0);
    return m + std::log1p(std::exp(-std::abs(x)));
}

// ---------------------------------------------------------------------------
// Raw matrix kernels. All accumulate with k ascending so the summation
// order is fixed and identical across call sites.

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void mm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = C + i * n;
        const T* ai = A + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            T a = ai[kk];
            if (a == T(0)) continue;
            const T* bk = B + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += a * bk[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T. Dot-product loops vectorize poorly, so B
// is transposed once into scratch and the product runs through the axpy
// kernel; per-element accumulation stays kk-ascending either way, so the
// results are bit-identical to the direct dot formulation.
template <class T>
void mm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    if (m == 1) {
        // single row: the transpose would cost more than the product
        T* c0 = C;
        for (std::size_t j = 0; j < n; ++j) {
            const T* bj = B + j * k;
            T s = T(0);
            for (std::size_t kk = 0; kk < k; ++kk) s += A[kk] * bj[kk];
            c0[j] += s;
        }
        return;
    }
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = B[j * k + kk];
    mm_acc(A, bt.data(), C, m, k, n);
}

// C(k,n) += A(m,k)^T * B(m,n)
template <class T>
void mm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = A + i * k;
        const T* bi = B + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            T a = ai[kk];
            if (a == T(0)) continue;
            T* ck = C + kk * n;
            for (std::size_t j = 0; j < n; ++j) ck[j] += a * bi[j];
        }
    }
}

template <class T>
void check_rank2(const char* op, const Tensor<T>& t) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

// Interprets [L,d] as one sequence and [B,L,d] as a batch of sequences.
template <class T>
void seq_dims(const char* op, const Tensor<T>& x, std::size_t& batch, std::size_t& len, std::size_t& width) {
    if (x.rank() == 2) {
        batch = 1;
        len = x.dim(0);
        width = x.dim(1);
    } else if (x.rank() == 3) {
        batch = x.dim(0);
        len = x.dim(1);
        width = x.dim(2);
    } else {
        throw ShapeError(std::string(op) + ": expected rank-2 or rank-3 tensor, got " + shape_str(x.shape()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> gaussian(Rng& rng, Shape shape, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    rng.fill_gaussian(t.data(), stddev);
    return t;
}

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "add", tape, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "sub", tape, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "mul", tape, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <class T>
Tensor<T> neg(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        "neg", tape, a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> exp(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        "exp", tape, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        "sigmoid", tape, a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        "softplus", tape, a, [](T x) { return softplus_scalar(x); },
        [](T x, T) { return sigmoid_scalar(x); });
}

template <class T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& a) {
    return unary_op(
        "silu", tape, a, [](T x) { return x * sigmoid_scalar(x); },
        [](T x, T) {
            T s = sigmoid_scalar(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    double acc = 0;
    for (T v : a.data()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (recording(tape, {&a})) {
        mark_output(tape, out);
        Tensor<T> ac = a, oc = out;
        tape->record("sum", [ac, oc]() mutable {
            T d = oc.grad()[0];
            auto da = ac.grad();
            for (auto& g : da) g += d;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& a) {
    if (a.size() == 0) throw ContractError("mean: empty tensor");
    double acc = 0;
    for (T v : a.data()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(a.size())));
    if (recording(tape, {&a})) {
        mark_output(tape, out);
        Tensor<T> ac = a, oc = out;
        tape->record("mean", [ac, oc]() mutable {
            T d = oc.grad()[0] / static_cast<T>(ac.size());
            auto da = ac.grad();
            for (auto& g : da) g += d;
        });
    }
    return out;
}

template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_rank2("matmul", a);
    check_rank2("matmul", b);
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    mm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (recording(tape, {&a, &b})) {
        mark_output(tape, out);
        Tensor<T> ac = a, bc = b, oc = out;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record("matmul", [ac, bc, oc, ga, gb, m, k, n]() mutable {
            const T* dy = oc.grad().data();
            if (ga) mm_nt_acc(dy, bc.data().data(), ac.grad().data(), m, n, k);
            if (gb) mm_tn_acc(ac.data().data(), dy, bc.grad().data(), m, k, n);
        });
    }
    return out;
}

template <class T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_rank2("matmul_nt", a);
    check_rank2("matmul_nt", b);
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + "^T");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    mm_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (recording(tape, {&a, &b})) {
        mark_output(tape, out);
        Tensor<T> ac = a, bc = b, oc = out;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record("matmul_nt", [ac, bc, oc, ga, gb, m, k, n]() mutable {
            const T* dy = oc.grad().data();
            if (ga) mm_acc(dy, bc.data().data(), ac.grad().data(), m, n, k);
            if (gb) mm_tn_acc(dy, ac.data().data(), bc.grad().data(), m, n, k);
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_last(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw ShapeError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (std::size_t i = 0; i + 1 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_last: leading dims differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const std::size_t pa = a.shape().back(), pb = b.shape().back();
    Shape out_shape = a.shape();
    out_shape.back() = pa + pb;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const std::size_t rows = a.size() / pa;
    auto ad = a.data(), bd = b.data();
    auto od = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(ad.begin() + r * pa, pa, od.begin() + r * (pa + pb));
        std::copy_n(bd.begin() + r * pb, pb, od.begin() + r * (pa + pb) + pa);
    }
    if (recording(tape, {&a, &b})) {
        mark_output(tape, out);
        Tensor<T> ac = a, bc = b, oc = out;
        bool ga = a.requires_grad(), gb = b.requires_grad();
        tape->record("concat_last", [ac, bc, oc, ga, gb, rows, pa, pb]() mutable {
            auto dy = oc.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                if (ga) {
                    auto da = ac.grad();
                    for (std::size_t j = 0; j < pa; ++j) da[r * pa + j] += dy[r * (pa + pb) + j];
                }
                if (gb) {
                    auto db = bc.grad();
                    for (std::size_t j = 0; j < pb; ++j) db[r * pb + j] += dy[r * (pa + pb) + pa + j];
                }
            }
        });
    }
    return out;
}

template <class T>
std::vector<Tensor<T>> split_last(Tape<T>* tape, const Tensor<T>& x, const std::vector<std::size_t>& sizes) {
    if (x.rank() < 1) throw ShapeError("split_last: scalar input");
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (total != x.shape().back())
        throw ShapeError("split_last: sizes sum to " + std::to_string(total) + " but last axis is " +
                         std::to_string(x.shape().back()));
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    std::vector<Tensor<T>> outs;
    std::size_t off = 0;
    auto xd = x.data();
    for (std::size_t s : sizes) {
        Shape shape = x.shape();
        shape.back() = s;
        Tensor<T> o = Tensor<T>::zeros(shape);
        auto od = o.data();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.begin() + r * d + off, s, od.begin() + r * s);
        outs.push_back(std::move(o));
        off += s;
    }
    if (recording(tape, {&x})) {
        for (auto& o : outs) mark_output(tape, o);
        Tensor<T> xc = x;
        std::vector<Tensor<T>> ocs = outs;
        std::vector<std::size_t> sz = sizes;
        tape->record("split_last", [xc, ocs, sz, rows, d]() mutable {
            auto dx = xc.grad();
            std::size_t off = 0;
            for (std::size_t p = 0; p < ocs.size(); ++p) {
                auto dy = ocs[p].grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < sz[p]; ++j) dx[r * d + off + j] += dy[r * sz[p] + j];
                off += sz[p];
            }
        });
    }
    return outs;
}

template <class T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
    if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
    const std::size_t d = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const std::size_t rows = x.size() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_sigma(rows);
    auto xd = x.data();
    auto gd = gain.data(), bd = bias.data();
    auto od = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * d;
        double m = 0;
        for (std::size_t j = 0; j < d; ++j) m += row[j];
        m /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_sigma[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            T xh = static_cast<T>((row[j] - m)) * is;
            xhat[r * d + j] = xh;
            od[r * d + j] = gd[j] * xh + bd[j];
        }
    }
    if (recording(tape, {&x, &gain, &bias})) {
        mark_output(tape, out);
        Tensor<T> xc = x, gc = gain, bcn = bias, oc = out;
        bool gx = x.requires_grad(), gg = gain.requires_grad(), gb = bias.requires_grad();
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        auto is = std::make_shared<std::vector<T>>(std::move(inv_sigma));
        tape->record("layer_norm", [xc, gc, bcn, oc, gx, gg, gb, xh, is, rows, d]() mutable {
            auto dy = oc.grad();
            auto gd = gc.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* dyr = dy.data() + r * d;
                const T* xhr = xh->data() + r * d;
                if (gg) {
                    auto dg = gc.grad();
                    for (std::size_t j = 0; j < d; ++j) dg[j] += dyr[j] * xhr[j];
                }
                if (gb) {
                    auto db = bcn.grad();
                    for (std::size_t j = 0; j < d; ++j) db[j] += dyr[j];
                }
                if (gx) {
                    auto dx = xc.grad();
                    double s1 = 0, s2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        double dg = static_cast<double>(dyr[j]) * gd[j];
                        s1 += dg;
                        s2 += dg * xhr[j];
                    }
                    s1 /= static_cast<double>(d);
                    s2 /= static_cast<double>(d);
                    T is_r = (*is)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        double dg = static_cast<double>(dyr[j]) * gd[j];
                        dx[r * d + j] += static_cast<T>((dg - s1 - xhr[j] * s2)) * is_r;
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, const IntTensor& indices) {
    check_rank2("embedding_lookup", table);
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::int64_t id : indices.data)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw IndexError("embedding_lookup: index " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    Shape out_shape = indices.shape;
    out_shape.push_back(d);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto td = table.data();
    auto od = out.data();
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(td.begin() + static_cast<std::size_t>(indices.at(i)) * d, d, od.begin() + i * d);
    if (recording(tape, {&table})) {
        mark_output(tape, out);
        Tensor<T> tc = table, oc = out;
        auto idx = std::make_shared<std::vector<std::int64_t>>(indices.data);
        tape->record("embedding_lookup", [tc, oc, idx, d]() mutable {
            auto dy = oc.grad();
            auto dt = tc.grad();
            for (std::size_t i = 0; i < idx->size(); ++i) {
                T* row = dt.data() + static_cast<std::size_t>((*idx)[i]) * d;
                const T* dyr = dy.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += dyr[j];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> causal_depthwise_conv1d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernels,
                                  const Tensor<T>& bias) {
    std::size_t batch, len, d;
    seq_dims("causal_depthwise_conv1d", x, batch, len, d);
    check_rank2("causal_depthwise_conv1d", kernels);
    if (kernels.dim(1) != d || kernels.dim(0) < 1)
        throw ShapeError("causal_depthwise_conv1d: kernels " + shape_str(kernels.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
    if (bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("causal_depthwise_conv1d: bias must be [" + std::to_string(d) + "]");
    const std::size_t w = kernels.dim(0);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xd = x.data();
    auto kd = kernels.data();
    auto bd = bias.data();
    auto od = out.data();
    // kernels[w-1] weights the current step; earlier rows reach back in
    // time, with zero padding before the sequence start.
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xs = xd.data() + b * len * d;
        T* os = od.data() + b * len * d;
        for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t c = 0; c < d; ++c) {
                T acc = bd[c];
                for (std::size_t j = 0; j < w; ++j) {
                    std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(w - 1) +
                                         static_cast<std::ptrdiff_t>(j);
                    if (src < 0) continue;
                    acc += kd[j * d + c] * xs[static_cast<std::size_t>(src) * d + c];
                }
                os[t * d + c] = acc;
            }
        }
    }
    if (recording(tape, {&x, &kernels, &bias})) {
        mark_output(tape, out);
        Tensor<T> xc = x, kc = kernels, bc = bias, oc = out;
        bool gx = x.requires_grad(), gk = kernels.requires_grad(), gb = bias.requires_grad();
        tape->record("causal_depthwise_conv1d", [xc, kc, bc, oc, gx, gk, gb, batch, len, d, w]() mutable {
            auto dy = oc.grad();
            auto kd = kc.data();
            auto xd = xc.data();
            for (std::size_t b = 0; b < batch; ++b) {
                const T* dys = dy.data() + b * len * d;
                const T* xs = xd.data() + b * len * d;
                for (std::size_t t = 0; t < len; ++t) {
                    for (std::size_t c = 0; c < d; ++c) {
                        T g = dys[t * d + c];
                        if (g == T(0)) continue;
                        if (gb) bc.grad()[c] += g;
                        for (std::size_t j = 0; j < w; ++j) {
                            std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) -
                                                 static_cast<std::ptrdiff_t>(w - 1) +
                                                 static_cast<std::ptrdiff_t>(j);
                            if (src < 0) continue;
                            std::size_t si = static_cast<std::size_t>(src) * d + c;
                            if (gk) kc.grad()[j * d + c] += g * xs[si];
                            if (gx) xc.grad()[b * len * d + si] += g * kd[j * d + c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> selective_scan(Tape<T>* tape, const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& Bm,
                         const Tensor<T>& Cm, const Tensor<T>& A, const Tensor<T>& D) {
    std::size_t batch, len, d;
    seq_dims("selective_scan", u, batch, len, d);
    if (delta.shape() != u.shape())
        throw ShapeError("selective_scan: delta shape " + shape_str(delta.shape()) + " != u shape " +
                         shape_str(u.shape()));
    std::size_t bb, bl, n;
    seq_dims("selective_scan", Bm, bb, bl, n);
    if (bb != batch || bl != len || Cm.shape() != Bm.shape())
        throw ShapeError("selective_scan: B/C shapes " + shape_str(Bm.shape()) + ", " + shape_str(Cm.shape()) +
                         " incompatible with u " + shape_str(u.shape()));
    check_rank2("selective_scan", A);
    if (A.dim(0) != d || A.dim(1) != n)
        throw ShapeError("selective_scan: A must be [" + std::to_string(d) + "x" + std::to_string(n) + "], got " +
                         shape_str(A.shape()));
    if (D.rank() != 1 || D.dim(0) != d)
        throw ShapeError("selective_scan: D must be [" + std::to_string(d) + "]");

    Tensor<T> out = Tensor<T>::zeros(u.shape());
    // Full state trajectory is kept for the backward pass.
    auto h_traj = std::make_shared<std::vector<T>>(batch * len * d * n, T(0));
    auto ud = u.data();
    auto dd = delta.data();
    auto bdat = Bm.data();
    auto cdat = Cm.data();
    auto ad = A.data();
    auto skip = D.data();
    auto od = out.data();
    std::vector<T> h(d * n);
    for (std::size_t b = 0; b < batch; ++b) {
        std::fill(h.begin(), h.end(), T(0));
        const std::size_t base = b * len;
        for (std::size_t t = 0; t < len; ++t) {
            const T* ut = ud.data() + (base + t) * d;
            const T* dt = dd.data() + (base + t) * d;
            const T* bt = bdat.data() + (base + t) * n;
            const T* ct = cdat.data() + (base + t) * n;
            T* ot = od.data() + (base + t) * d;
            T* ht_save = h_traj->data() + (base + t) * d * n;
            for (std::size_t c = 0; c < d; ++c) {
                T* hc = h.data() + c * n;
                const T* ac = ad.data() + c * n;
                const T inp = dt[c] * ut[c];
                T read = T(0);
                for (std::size_t s = 0; s < n; ++s) {
                    hc[s] = std::exp(-dt[c] * ac[s]) * hc[s] + inp * bt[s];
                    read += ct[s] * hc[s];
                }
                ot[c] = read + skip[c] * ut[c];
                std::copy_n(hc, n, ht_save + c * n);
            }
        }
    }
    if (recording(tape, {&u, &delta, &Bm, &Cm, &A, &D})) {
        mark_output(tape, out);
        Tensor<T> uc = u, dc = delta, bc = Bm, cc = Cm, acp = A, dcp = D, oc = out;
        bool gu = u.requires_grad(), gd = delta.requires_grad(), gb = Bm.requires_grad(),
             gc = Cm.requires_grad(), ga = A.requires_grad(), gdd = D.requires_grad();
        tape->record("selective_scan", [uc, dc, bc, cc, acp, dcp, oc, h_traj, gu, gd, gb, gc, ga, gdd, batch,
                                        len, d, n]() mutable {
            auto dy = oc.grad();
            auto ud = uc.data();
            auto dd = dc.data();
            auto bdat = bc.data();
            auto cdat = cc.data();
            auto ad = acp.data();
            auto skip = dcp.data();
            std::vector<T> dh(d * n);
            for (std::size_t b = 0; b < batch; ++b) {
                std::fill(dh.begin(), dh.end(), T(0));
                const std::size_t base = b * len;
                for (std::size_t tt = len; tt-- > 0;) {
                    const T* ut = ud.data() + (base + tt) * d;
                    const T* dt = dd.data() + (base + tt) * d;
                    const T* bt = bdat.data() + (base + tt) * n;
                    const T* ct = cdat.data() + (base + tt) * n;
                    const T* dyt = dy.data() + (base + tt) * d;
                    const T* ht = h_traj->data() + (base + tt) * d * n;
                    const T* hprev = tt > 0 ? h_traj->data() + (base + tt - 1) * d * n : nullptr;
                    for (std::size_t c = 0; c < d; ++c) {
                        const T* ac = ad.data() + c * n;
                        const T* htc = ht + c * n;
                        T* dhc = dh.data() + c * n;
                        const T g = dyt[c];
                        // readout: r = sum_s C[s] h[c,s] + D[c] u[c]
                        if (gdd && g != T(0)) dcp.grad()[c] += g * ut[c];
                        T du_c = g * skip[c];
                        T ddelta_c = T(0);
                        for (std::size_t s = 0; s < n; ++s) {
                            if (gc && g != T(0)) cc.grad()[(base + tt) * n + s] += g * htc[s];
                            T dhcs = dhc[s] + g * ct[s];
                            const T hp = hprev ? hprev[c * n + s] : T(0);
                            const T decay = std::exp(-dt[c] * ac[s]);
                            // state update: h = decay * h_prev + delta*u*B[s]
                            ddelta_c += dhcs * (-ac[s]) * decay * hp + dhcs * bt[s] * ut[c];
                            if (ga) acp.grad()[c * n + s] += dhcs * (-dt[c]) * decay * hp;
                            if (gb) bc.grad()[(base + tt) * n + s] += dhcs * dt[c] * ut[c];
                            du_c += dhcs * dt[c] * bt[s];
                            dhc[s] = dhcs * decay;
                        }
                        if (gu) uc.grad()[(base + tt) * d + c] += du_c;
                        if (gd) dc.grad()[(base + tt) * d + c] += ddelta_c;
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> masked_cross_entropy(Tape<T>* tape, const Tensor<T>& logits, const IntTensor& targets) {
    if (logits.rank() < 2)
        throw ShapeError("masked_cross_entropy: expected [N,V] or [B,L,V] logits, got " +
                         shape_str(logits.shape()));
    const std::size_t v = logits.shape().back();
    const std::size_t rows = logits.size() / v;
    if (targets.size() != rows)
        throw ShapeError("masked_cross_entropy: " + std::to_string(rows) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
    for (std::int64_t t : targets.data)
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw IndexError("masked_cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(v) + ")");
    std::size_t count = 0;
    for (std::int64_t t : targets.data)
        if (t != 0) ++count;
    if (count == 0) throw ContractError("masked_cross_entropy: every target is padding (index 0)");

    auto ld = logits.data();
    double loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::int64_t tgt = targets.at(r);
        if (tgt == 0) continue;
        const T* row = ld.data() + r * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double se = 0;
        for (std::size_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
        loss += (mx + std::log(se)) - static_cast<double>(row[static_cast<std::size_t>(tgt)]);
    }
    loss /= static_cast<double>(count);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));
    if (recording(tape, {&logits})) {
        mark_output(tape, out);
        Tensor<T> lc = logits, oc = out;
        auto tg = std::make_shared<std::vector<std::int64_t>>(targets.data);
        tape->record("masked_cross_entropy", [lc, oc, tg, rows, v, count]() mutable {
            T dy = oc.grad()[0];
            auto ld = lc.data();
            auto dl = lc.grad();
            const T scale = dy / static_cast<T>(count);
            for (std::size_t r = 0; r < rows; ++r) {
                std::int64_t tgt = (*tg)[r];
                if (tgt == 0) continue;
                const T* row = ld.data() + r * v;
                T* drow = dl.data() + r * v;
                double mx = row[0];
                for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                double se = 0;
                for (std::size_t j = 0; j < v; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
                for (std::size_t j = 0; j < v; ++j) {
                    double p = std::exp(static_cast<double>(row[j]) - mx) / se;
                    drow[j] += scale * static_cast<T>(p - (static_cast<std::size_t>(tgt) == j ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto mask = std::make_shared<std::vector<T>>(x.size());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto xd = x.data();
    auto od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        T m = rng.uniform() >= p ? keep_scale : T(0);
        (*mask)[i] = m;
        od[i] = xd[i] * m;
    }
    if (recording(tape, {&x})) {
        mark_output(tape, out);
        Tensor<T> xc = x, oc = out;
        tape->record("dropout", [xc, oc, mask]() mutable {
            auto dy = oc.grad();
            auto dx = xc.grad();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * (*mask)[i];
        });
    }
    return out;
}

#define HMR_INSTANTIATE_OPS(T)                                                                              \
    template Tensor<T> gaussian<T>(Rng&, Shape, double);                                                    \
    template Tensor<T> add<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> sub<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> mul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> neg<T>(Tape<T>*, const Tensor<T>&);                                                  \
    template Tensor<T> exp<T>(Tape<T>*, const Tensor<T>&);                                                  \
    template Tensor<T> sigmoid<T>(Tape<T>*, const Tensor<T>&);                                              \
    template Tensor<T> softplus<T>(Tape<T>*, const Tensor<T>&);                                             \
    template Tensor<T> silu<T>(Tape<T>*, const Tensor<T>&);                                                 \
    template Tensor<T> sum<T>(Tape<T>*, const Tensor<T>&);                                                  \
    template Tensor<T> mean<T>(Tape<T>*, const Tensor<T>&);                                                 \
    template Tensor<T> matmul<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> matmul_nt<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> concat_last<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&);                        \
    template std::vector<Tensor<T>> split_last<T>(Tape<T>*, const Tensor<T>&,                               \
                                                  const std::vector<std::size_t>&);                         \
    template Tensor<T> layer_norm<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
    template Tensor<T> embedding_lookup<T>(Tape<T>*, const Tensor<T>&, const IntTensor&);                   \
    template Tensor<T> causal_depthwise_conv1d<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&,             \
                                                  const Tensor<T>&);                                        \
    template Tensor<T> selective_scan<T>(Tape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                         const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template Tensor<T> masked_cross_entropy<T>(Tape<T>*, const Tensor<T>&, const IntTensor&);               \
    template Tensor<T> dropout<T>(Tape<T>*, const Tensor<T>&, double, Rng&, bool);

HMR_INSTANTIATE_OPS(float)
HMR_INSTANTIATE_OPS(double)

}  // namespace hmr
