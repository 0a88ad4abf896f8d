#include "hmr/gradcheck.hpp"

#include <cmath>

namespace hmr {

namespace {

template <class T>
double worst_error(const std::function<double(std::size_t, double)>& numeric_at, std::span<const T> analytic,
                   std::span<T> coords, double h) {
    double worst = 0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const T saved = coords[i];
        const double hi = h * std::max(1.0, std::abs(static_cast<double>(saved)));
        coords[i] = saved + static_cast<T>(hi);
        const double fp = numeric_at(i, hi);
        coords[i] = saved - static_cast<T>(hi);
        const double fm = numeric_at(i, hi);
        coords[i] = saved;
        const double num = (fp - fm) / (2.0 * hi);
        const double ana = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        worst = std::max(worst, std::abs(ana - num) / denom);
    }
    return worst;
}

}  // namespace

template <class T>
double grad_check(const TensorFn<T>& f, const Tensor<T>& point, double h) {
    Tensor<T> x = Tensor<T>::from(Shape(point.shape()), std::vector<T>(point.data().begin(), point.data().end()));
    x.set_requires_grad(true);

    Tape<T> tape;
    Tensor<T> loss = f(tape, x);
    backward(loss, tape);
    std::vector<T> analytic(x.grad().begin(), x.grad().end());

    auto eval = [&](std::size_t, double) {
        Tape<T> t;
        Tensor<T> l = f(t, x);
        return static_cast<double>(l.item());
    };
    return worst_error<T>(eval, std::span<const T>(analytic), x.data(), h);
}

template <class T>
double grad_check_params(const std::function<Tensor<T>(Tape<T>&)>& make_loss,
                         const std::vector<Tensor<T>*>& params, double h) {
    for (auto* p : params) {
        p->set_requires_grad(true);
        p->zero_grad();
    }
    Tape<T> tape;
    Tensor<T> loss = make_loss(tape);
    backward(loss, tape);

    auto eval = [&](std::size_t, double) {
        Tape<T> t;
        Tensor<T> l = make_loss(t);
        return static_cast<double>(l.item());
    };

    double worst = 0;
    for (auto* p : params) {
        std::vector<T> analytic(p->grad().begin(), p->grad().end());
        worst = std::max(worst, worst_error<T>(eval, std::span<const T>(analytic), p->data(), h));
    }
    return worst;
}

template double grad_check<float>(const TensorFn<float>&, const Tensor<float>&, double);
template double grad_check<double>(const TensorFn<double>&, const Tensor<double>&, double);
template double grad_check_params<float>(const std::function<Tensor<float>(Tape<float>&)>&,
                                         const std::vector<Tensor<float>*>&, double);
template double grad_check_params<double>(const std::function<Tensor<double>(Tape<double>&)>&,
                                          const std::vector<Tensor<double>*>&, double);

}  // namespace hmr
