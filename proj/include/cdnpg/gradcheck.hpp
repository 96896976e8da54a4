#pragma once

// Central-difference gradient oracle. Evaluates a scalar-valued forward
// function while perturbing one input coordinate at a time; independent of the
// tape (runs under NoGradGuard). Meant to be used with T = double.

#include "cdnpg/tensor.hpp"

#include <cmath>
#include <vector>

namespace cdnpg {

template <typename T, typename F>
std::vector<T> finite_difference_grad(F&& f, Tensor<T>& x, T h = T(1e-5)) {
    NoGradGuard ng;
    std::vector<T> g(x.numel());
    std::vector<T>& d = x.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const T orig = d[i];
        d[i] = orig + h;
        const T fp = f();
        d[i] = orig - h;
        const T fm = f();
        d[i] = orig;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
template <typename T>
T max_rel_err(const std::vector<T>& a, const std::vector<T>& b) {
    if (a.size() != b.size()) throw std::runtime_error("max_rel_err: size mismatch");
    T worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T denom = std::max(T(1), std::max(std::abs(a[i]), std::abs(b[i])));
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace cdnpg
