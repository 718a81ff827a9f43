#pragma once

// Finite-difference sweep over every primitive op, shared by the unit tests and
// the acceptance binary. Each case draws inputs in [-2, 2] (shifted into the
// domain where an op needs it) and reduces the op output with random weights so
// that no component of the gradient cancels by symmetry.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dtwin/tensor.hpp"

namespace adcheck {

using dtwin::ad::Tensor;

struct Case {
    std::string name;
    std::function<dtwin::ad::FiniteDifferenceReport(std::mt19937_64&)> run;
};

inline std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline Tensor rand_t(std::mt19937_64& rng, dtwin::ad::Shape s, double lo = -2.0, double hi = 2.0) {
    const std::size_t n = dtwin::ad::shape_numel(s);
    return Tensor::from(std::move(s), uniform(rng, n, lo, hi));
}

// Values in [-2,2] kept at least `gap` away from zero.
inline Tensor rand_away(std::mt19937_64& rng, dtwin::ad::Shape s, double gap) {
    const std::size_t n = dtwin::ad::shape_numel(s);
    std::vector<double> v = uniform(rng, n);
    for (auto& x : v) {
        if (std::abs(x) < gap) x = x < 0 ? -gap - std::abs(x) : gap + std::abs(x);
    }
    return Tensor::from(std::move(s), std::move(v));
}

// Scalar probe: weighted sum of an op output.
inline Tensor probe(const Tensor& out, const Tensor& weights) {
    return dtwin::ad::sum(dtwin::ad::mul(out, weights));
}

inline dtwin::ad::FiniteDifferenceReport check_unary(std::mt19937_64& rng, const Tensor& x,
                                                     const std::function<Tensor(const Tensor&)>& op) {
    const Tensor y0 = op(x);
    const Tensor w = rand_t(rng, y0.shape());
    return dtwin::ad::finite_difference_check([&](const Tensor& t) { return probe(op(t), w); }, x, 1e-5, 1e-4);
}

inline std::vector<Case> primitive_cases() {
    namespace ad = dtwin::ad;
    std::vector<Case> cs;
    auto add = [&](std::string n, std::function<ad::FiniteDifferenceReport(std::mt19937_64&)> f) {
        cs.push_back({std::move(n), std::move(f)});
    };

    add("matmul/lhs", [](auto& r) {
        Tensor b = rand_t(r, {4, 2});
        return check_unary(r, rand_t(r, {3, 4}), [b](const Tensor& x) { return ad::matmul(x, b); });
    });
    add("matmul/rhs", [](auto& r) {
        Tensor a = rand_t(r, {3, 4});
        return check_unary(r, rand_t(r, {4, 2}), [a](const Tensor& x) { return ad::matmul(a, x); });
    });
    add("transpose", [](auto& r) { return check_unary(r, rand_t(r, {3, 2}), [](const Tensor& x) { return ad::transpose(x); }); });
    add("add", [](auto& r) {
        Tensor b = rand_t(r, {2, 3});
        return check_unary(r, rand_t(r, {2, 3}), [b](const Tensor& x) { return ad::add(x, b); });
    });
    add("add/scalar-broadcast", [](auto& r) {
        Tensor b = rand_t(r, {2, 3});
        return check_unary(r, rand_t(r, {}), [b](const Tensor& x) { return ad::add(b, x); });
    });
    add("sub/lhs", [](auto& r) {
        Tensor b = rand_t(r, {5});
        return check_unary(r, rand_t(r, {5}), [b](const Tensor& x) { return ad::sub(x, b); });
    });
    add("sub/rhs", [](auto& r) {
        Tensor a = rand_t(r, {5});
        return check_unary(r, rand_t(r, {5}), [a](const Tensor& x) { return ad::sub(a, x); });
    });
    add("mul", [](auto& r) {
        Tensor b = rand_t(r, {2, 3});
        return check_unary(r, rand_t(r, {2, 3}), [b](const Tensor& x) { return ad::mul(x, b); });
    });
    add("mul/scalar-broadcast", [](auto& r) {
        Tensor b = rand_t(r, {2, 3});
        return check_unary(r, rand_t(r, {}), [b](const Tensor& x) { return ad::mul(b, x); });
    });
    add("div/num", [](auto& r) {
        Tensor b = rand_away(r, {4}, 0.5);
        return check_unary(r, rand_t(r, {4}), [b](const Tensor& x) { return ad::div(x, b); });
    });
    add("div/den", [](auto& r) {
        Tensor a = rand_t(r, {4});
        return check_unary(r, rand_away(r, {4}, 0.5), [a](const Tensor& x) { return ad::div(a, x); });
    });
    add("neg", [](auto& r) { return check_unary(r, rand_t(r, {4}), [](const Tensor& x) { return ad::neg(x); }); });
    add("tanh", [](auto& r) { return check_unary(r, rand_t(r, {6}), [](const Tensor& x) { return ad::tanh(x); }); });
    // Kinked ops: keep samples off the kink by more than the FD step.
    add("relu", [](auto& r) { return check_unary(r, rand_away(r, {6}, 1e-3), [](const Tensor& x) { return ad::relu(x); }); });
    add("leaky_relu", [](auto& r) {
        return check_unary(r, rand_away(r, {6}, 1e-3), [](const Tensor& x) { return ad::leaky_relu(x, 0.2); });
    });
    add("sigmoid", [](auto& r) { return check_unary(r, rand_t(r, {6}), [](const Tensor& x) { return ad::sigmoid(x); }); });
    add("exp", [](auto& r) { return check_unary(r, rand_t(r, {6}), [](const Tensor& x) { return ad::exp(x); }); });
    add("log", [](auto& r) { return check_unary(r, rand_t(r, {6}, 0.25, 2.0), [](const Tensor& x) { return ad::log(x); }); });
    add("square", [](auto& r) { return check_unary(r, rand_t(r, {6}), [](const Tensor& x) { return ad::square(x); }); });
    add("sqrt", [](auto& r) { return check_unary(r, rand_t(r, {6}, 0.25, 2.0), [](const Tensor& x) { return ad::sqrt(x); }); });
    add("sum", [](auto& r) { return check_unary(r, rand_t(r, {3, 2}), [](const Tensor& x) { return ad::sum(x); }); });
    add("mean", [](auto& r) { return check_unary(r, rand_t(r, {3, 2}), [](const Tensor& x) { return ad::mean(x); }); });
    add("expand", [](auto& r) { return check_unary(r, rand_t(r, {}), [](const Tensor& x) { return ad::expand(x, {2, 3}); }); });
    add("reshape", [](auto& r) { return check_unary(r, rand_t(r, {2, 3}), [](const Tensor& x) { return ad::reshape(x, {3, 2}); }); });
    add("concat/axis0", [](auto& r) {
        Tensor b = rand_t(r, {1, 3});
        return check_unary(r, rand_t(r, {2, 3}), [b](const Tensor& x) { return ad::concat({b, x, b}, 0); });
    });
    add("concat/axis1", [](auto& r) {
        Tensor b = rand_t(r, {2, 2});
        return check_unary(r, rand_t(r, {2, 3}), [b](const Tensor& x) { return ad::concat({x, b}, 1); });
    });
    add("slice", [](auto& r) { return check_unary(r, rand_t(r, {3, 4}), [](const Tensor& x) { return ad::slice(x, 1, 1, 3); }); });
    add("pad", [](auto& r) { return check_unary(r, rand_t(r, {3, 2}), [](const Tensor& x) { return ad::pad(x, 1, 1, 4); }); });
    add("gather_rows", [](auto& r) {
        return check_unary(r, rand_t(r, {3, 2}), [](const Tensor& x) { return ad::gather_rows(x, {2, 0, 2, 1}); });
    });
    add("scatter_add_rows", [](auto& r) {
        return check_unary(r, rand_t(r, {4, 2}), [](const Tensor& x) { return ad::scatter_add_rows(x, {1, 0, 1, 1}, 3); });
    });
    add("row_norms", [](auto& r) { return check_unary(r, rand_away(r, {3, 2}, 0.1), [](const Tensor& x) { return ad::row_norms(x); }); });
    return cs;
}

// Random 3-layer tanh MLP; the probe checks the gradient w.r.t. one flattened
// parameter vector holding every weight and bias plus the input batch.
inline dtwin::ad::FiniteDifferenceReport mlp3_check(std::mt19937_64& rng) {
    namespace ad = dtwin::ad;
    const std::vector<std::size_t> w{4, 5, 3, 2};
    const std::size_t batch = 3;
    std::vector<std::size_t> offs;
    std::size_t total = batch * w[0];
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        offs.push_back(total);
        total += w[l] * w[l + 1] + w[l + 1];
    }
    const Tensor theta = rand_t(rng, {total}, -1.0, 1.0);
    const Tensor target = rand_t(rng, {batch, w.back()});
    auto f = [&](const Tensor& p) {
        Tensor h = ad::reshape(ad::slice(p, 0, 0, batch * w[0]), {batch, w[0]});
        for (std::size_t l = 0; l + 1 < w.size(); ++l) {
            const std::size_t o = offs[l];
            Tensor W = ad::reshape(ad::slice(p, 0, o, o + w[l] * w[l + 1]), {w[l], w[l + 1]});
            Tensor b = ad::slice(p, 0, o + w[l] * w[l + 1], o + w[l] * w[l + 1] + w[l + 1]);
            h = ad::add_row(ad::matmul(h, W), b);
            if (l + 2 < w.size()) h = ad::tanh(h);
        }
        return ad::mean(ad::square(ad::sub(h, target)));
    };
    return ad::finite_difference_check(f, theta, 1e-5, 1e-4);
}

}  // namespace adcheck
