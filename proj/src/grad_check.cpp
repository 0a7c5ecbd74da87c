// SPDX-License-Identifier: Apache-2.0

#include "ddit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddit/ops.hpp"

namespace ddit {

bool GradCheckReport::all_passed() const {
    return std::all_of(kernels.begin(), kernels.end(), [](const KernelCheck& k) { return k.passed; });
}

std::vector<std::string> GradCheckReport::failures() const {
    std::vector<std::string> out;
    for (const auto& k : kernels)
        if (!k.passed) out.push_back(k.kernel);
    return out;
}

double max_gradient_error(const TensorFn& f, const std::vector<Tensor>& inputs, Rng& rng, double step,
                          int64_t max_entries) {
    std::vector<Tensor> leaves;
    for (const Tensor& t : inputs) {
        if (t.dtype() != DType::f64) throw std::invalid_argument("gradient checks need f64 inputs");
        leaves.push_back(t.clone().set_requires_grad(true));
    }
    Tensor probe;
    {
        NoGradGuard guard;
        probe = f(leaves);
    }
    const Tensor weights = Tensor::randn(probe.shape(), rng, 1.0, DType::f64);
    auto objective = [&](const std::vector<Tensor>& xs) { return sum(mul(f(xs), weights)); };

    objective(leaves).backward();

    double worst = 0.0;
    for (size_t i = 0; i < leaves.size(); ++i) {
        const std::vector<double> analytic = leaves[i].grad().values();
        const int64_t n = leaves[i].numel();
        std::vector<int64_t> entries(static_cast<size_t>(n));
        std::iota(entries.begin(), entries.end(), 0);
        if (max_entries > 0 && n > max_entries) {
            std::shuffle(entries.begin(), entries.end(), rng);
            entries.resize(static_cast<size_t>(max_entries));
        }
        auto x = leaves[i].mutable_data<double>();
        NoGradGuard guard;
        for (int64_t e : entries) {
            const double saved = x[static_cast<size_t>(e)];
            x[static_cast<size_t>(e)] = saved + step;
            const double up = objective(leaves).item();
            x[static_cast<size_t>(e)] = saved - step;
            const double down = objective(leaves).item();
            x[static_cast<size_t>(e)] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double err = std::abs(analytic[static_cast<size_t>(e)] - numeric) / (std::abs(numeric) + 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

namespace {

Tensor rand64(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(shape), rng, lo, hi, DType::f64);
}

} // namespace

GradCheckReport grad_check_all(uint64_t seed, double tolerance, double step) {
    Rng rng(seed);
    GradCheckReport report;
    report.tolerance = tolerance;
    auto check = [&](const std::string& name, const TensorFn& f, std::vector<Tensor> inputs) {
        const double err = max_gradient_error(f, inputs, rng, step);
        report.kernels.push_back({name, err, err < tolerance});
    };
    using V = std::vector<Tensor>;

    check("matmul", [](const V& x) { return matmul(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({4, 2}, rng)});
    check("batched_matmul", [](const V& x) { return bmm(x[0], x[1]); },
          {rand64({2, 3, 4}, rng), rand64({2, 4, 3}, rng)});
    check("batched_matmul_transposed", [](const V& x) { return bmm(x[0], x[1], true); },
          {rand64({2, 3, 4}, rng), rand64({2, 5, 4}, rng)});
    check("transpose", [](const V& x) { return transpose(x[0]); }, {rand64({2, 3, 4}, rng)});
    check("permute", [](const V& x) { return permute(x[0], {2, 0, 3, 1}); }, {rand64({2, 3, 2, 4}, rng)});
    check("reshape", [](const V& x) { return reshape(x[0], {4, 3}); }, {rand64({2, 6}, rng)});
    check("add", [](const V& x) { return add(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({3, 4}, rng)});
    check("sub", [](const V& x) { return sub(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({3, 4}, rng)});
    check("mul", [](const V& x) { return mul(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({3, 4}, rng)});
    check("div", [](const V& x) { return div(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({3, 4}, rng, 0.5, 2.0)});
    check("broadcast_add", [](const V& x) { return add(x[0], x[1]); }, {rand64({2, 3, 4}, rng), rand64({4}, rng)});
    check("broadcast_mul", [](const V& x) { return mul(x[0], x[1]); }, {rand64({2, 3, 4}, rng), rand64({3, 4}, rng)});
    check("scale", [](const V& x) { return scale(x[0], -1.7); }, {rand64({5}, rng)});
    check("mul_rows", [](const V& x) { return mul_rows(x[0], x[1]); }, {rand64({3, 4}, rng), rand64({3}, rng)});
    check("exp", [](const V& x) { return exp(x[0]); }, {rand64({6}, rng)});
    check("log", [](const V& x) { return log(x[0]); }, {rand64({6}, rng, 0.5, 2.0)});
    check("sqrt", [](const V& x) { return sqrt(x[0]); }, {rand64({6}, rng, 0.5, 2.0)});
    check("square", [](const V& x) { return square(x[0]); }, {rand64({6}, rng)});
    check("sum_axis", [](const V& x) { return sum(x[0], 1); }, {rand64({2, 3, 4}, rng)});
    check("mean_axis", [](const V& x) { return mean(x[0], -1); }, {rand64({2, 3, 4}, rng)});
    check("sum_all", [](const V& x) { return sum(x[0]); }, {rand64({2, 3}, rng)});
    check("mean_all", [](const V& x) { return mean(x[0]); }, {rand64({2, 3}, rng)});
    check("softmax", [](const V& x) { return softmax(x[0]); }, {rand64({2, 5}, rng)});
    check("layer_norm", [](const V& x) { return layer_norm(x[0]); }, {rand64({3, 8}, rng)});
    check("layer_norm_affine", [](const V& x) { return layer_norm(x[0], x[1], x[2]); },
          {rand64({3, 8}, rng), rand64({8}, rng), rand64({8}, rng)});
    check("gelu", [](const V& x) { return gelu(x[0]); }, {rand64({7}, rng, -3.0, 3.0)});
    check("silu", [](const V& x) { return silu(x[0]); }, {rand64({7}, rng, -3.0, 3.0)});
    check("gather_rows", [](const V& x) { return gather_rows(x[0], {2, 0, 2, 1}); }, {rand64({3, 4}, rng)});
    check("scatter_add_rows", [](const V& x) { return scatter_add_rows(x[0], {1, 3, 1}, 4); },
          {rand64({3, 2}, rng)});
    check("concat", [](const V& x) { return concat({x[0], x[1]}, 1); },
          {rand64({2, 3, 2}, rng), rand64({2, 1, 2}, rng)});
    return report;
}

} // namespace ddit
