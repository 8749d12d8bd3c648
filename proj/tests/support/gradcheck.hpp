#pragma once

// Central finite-difference oracles for the reverse-mode gradients. Each
// checker rebuilds the forward pass from perturbed inputs, so it never
// trusts the tape it is validating.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "crossdqn/params.hpp"
#include "crossdqn/tensor.hpp"

namespace testsupport {

struct GradCheck {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst;  // where the worst error occurred
};

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

/// Checks d sum(f(x)) / dx against central differences. `f` must derive
/// its output from the tensor it is handed (taped or not).
inline GradCheck check_unary(const std::function<crossdqn::ad::Tensor(const crossdqn::ad::Tensor&)>& f,
                             const crossdqn::ad::Tensor& x0, double h = 1e-6) {
    using crossdqn::ad::Tape;
    using crossdqn::ad::Tensor;

    Tape tape;
    Tensor x = crossdqn::ad::make_leaf(tape, x0);
    Tensor loss = crossdqn::ad::sum_all(f(x));
    tape.backward(loss);
    const std::vector<double> analytic = tape.grad(x);

    GradCheck out;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        Tensor hi = x0, lo = x0;
        hi.data[i] += h;
        lo.data[i] -= h;
        const double fp = crossdqn::ad::sum_all(f(hi)).item();
        const double fm = crossdqn::ad::sum_all(f(lo)).item();
        const double numeric = (fp - fm) / (2.0 * h);
        const double e = rel_err(analytic[i], numeric);
        ++out.checked;
        if (e > out.max_rel_err) {
            out.max_rel_err = e;
            out.worst = "x[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                        " numeric=" + std::to_string(numeric);
        }
    }
    return out;
}

/// Same, for a two-argument op; both inputs are checked.
inline GradCheck check_binary(
    const std::function<crossdqn::ad::Tensor(const crossdqn::ad::Tensor&,
                                             const crossdqn::ad::Tensor&)>& f,
    const crossdqn::ad::Tensor& a0, const crossdqn::ad::Tensor& b0, double h = 1e-6) {
    using crossdqn::ad::Tape;
    using crossdqn::ad::Tensor;

    Tape tape;
    Tensor a = crossdqn::ad::make_leaf(tape, a0);
    Tensor b = crossdqn::ad::make_leaf(tape, b0);
    Tensor loss = crossdqn::ad::sum_all(f(a, b));
    tape.backward(loss);
    const std::vector<double> ga = tape.grad(a);
    const std::vector<double> gb = tape.grad(b);

    GradCheck out;
    auto probe = [&](const Tensor& base, std::size_t i, bool first) {
        Tensor hi = base, lo = base;
        hi.data[i] += h;
        lo.data[i] -= h;
        const double fp =
            crossdqn::ad::sum_all(first ? f(hi, b0) : f(a0, hi)).item();
        const double fm =
            crossdqn::ad::sum_all(first ? f(lo, b0) : f(a0, lo)).item();
        return (fp - fm) / (2.0 * h);
    };
    for (std::size_t i = 0; i < a0.size(); ++i) {
        const double e = rel_err(ga[i], probe(a0, i, true));
        ++out.checked;
        if (e > out.max_rel_err) {
            out.max_rel_err = e;
            out.worst = "a[" + std::to_string(i) + "]";
        }
    }
    for (std::size_t i = 0; i < b0.size(); ++i) {
        const double e = rel_err(gb[i], probe(b0, i, false));
        ++out.checked;
        if (e > out.max_rel_err) {
            out.max_rel_err = e;
            out.worst = "b[" + std::to_string(i) + "]";
        }
    }
    return out;
}

/// End-to-end oracle over every parameter in a store. `loss_of` must
/// produce the scalar loss from a binding against the given store; the
/// analytic side uses one tape, the numeric side re-evaluates the loss
/// with single entries of the store perturbed. `stride` samples every
/// n-th coordinate to keep big models affordable.
inline GradCheck check_params(
    crossdqn::ParamStore& store,
    const std::function<crossdqn::ad::Tensor(crossdqn::Binding&)>& loss_of, double h = 1e-7,
    std::size_t stride = 1) {
    using crossdqn::ad::Tape;
    using crossdqn::ad::Tensor;

    Tape tape;
    crossdqn::Binding bound(store, &tape);
    Tensor loss = loss_of(bound);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic(store.count());
    for (std::size_t i = 0; i < store.count(); ++i) {
        const int node = bound.node_of(i);
        if (node >= 0)
            analytic[i] = tape.grad(node);
        else
            analytic[i].assign(store.value(store.name_at(i)).size(), 0.0);
    }

    auto eval = [&]() {
        crossdqn::Binding b(store, nullptr);
        return loss_of(b).item();
    };

    // A central difference of a loss of magnitude L carries cancellation
    // noise of about eps*L/h, so gradients below that are unresolvable;
    // coordinates that small (dead relu paths, mostly) are excused through
    // the error scale rather than reported as mismatches.
    const double noise_floor = std::max(1e-6, 32.0 * 2.22e-16 * std::abs(eval()) / h);

    GradCheck out;
    for (std::size_t i = 0; i < store.count(); ++i) {
        const std::string& name = store.name_at(i);
        Tensor& v = store.value(name);
        for (std::size_t j = 0; j < v.size(); j += stride) {
            const double orig = v.data[j];
            v.data[j] = orig + h;
            const double fp = eval();
            v.data[j] = orig - h;
            const double fm = eval();
            v.data[j] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double e = rel_err(analytic[i][j], numeric, noise_floor);
            ++out.checked;
            if (e > out.max_rel_err) {
                out.max_rel_err = e;
                out.worst = name + "[" + std::to_string(j) + "] analytic=" +
                            std::to_string(analytic[i][j]) + " numeric=" + std::to_string(numeric);
            }
        }
    }
    return out;
}

}  // namespace testsupport
