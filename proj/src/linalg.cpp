#include "netdeconv/linalg.hpp"

#include <Eigen/Jacobi>

#include <algorithm>
#include <cmath>

#include "netdeconv/threading.hpp"

namespace netdeconv {

namespace {
constexpr long kMatmulRowBlock = 256;
}

Matd matmul(const Eigen::Ref<const Matd>& a, const Eigen::Ref<const Matd>& b) {
    if (a.cols() != b.rows())
        throw contract_error("matmul: inner dimensions disagree");
    Matd c(a.rows(), b.cols());
    parallel_ranges(a.rows(), kMatmulRowBlock, [&](long r0, long r1) {
        c.middleRows(r0, r1 - r0).noalias() = a.middleRows(r0, r1 - r0) * b;
    });
    return c;
}

EigResult sym_eig(const Eigen::Ref<const Matd>& a) {
    const long n = a.rows();
    if (n != a.cols()) throw contract_error("sym_eig: matrix not square");
    for (long i = 0; i < n; ++i)
        for (long j = i + 1; j < n; ++j)
            if (std::abs(a(i, j) - a(j, i)) > 1e-12 * std::max(1.0, std::abs(a(i, j))))
                throw contract_error("sym_eig: matrix not symmetric");

    Matd work = a;
    Matd v = Matd::Identity(n, n);
    double scale = a.norm();
    if (scale == 0.0) scale = 1.0;
    const double tol = 1e-12 * scale;

    auto off_mass = [&] {
        double s = 0;
        for (long i = 0; i < n; ++i)
            for (long j = i + 1; j < n; ++j) s += 2.0 * work(i, j) * work(i, j);
        return std::sqrt(s);
    };

    for (int sweep = 0; sweep < 64 && off_mass() > tol; ++sweep) {
        for (long p = 0; p < n - 1; ++p) {
            for (long q = p + 1; q < n; ++q) {
                if (std::abs(work(p, q)) <= 1e-300) continue;
                Eigen::JacobiRotation<double> rot;
                rot.makeJacobi(work, p, q);
                work.applyOnTheLeft(p, q, rot.adjoint());
                work.applyOnTheRight(p, q, rot);
                v.applyOnTheRight(p, q, rot);
            }
        }
    }

    EigResult res;
    res.values = work.diagonal();
    res.vectors = std::move(v);
    std::vector<long> order(n);
    for (long i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](long x, long y) { return res.values[x] < res.values[y]; });
    Vecd vals(n);
    Matd vecs(n, n);
    for (long i = 0; i < n; ++i) {
        vals[i] = res.values[order[i]];
        vecs.col(i) = res.vectors.col(order[i]);
    }
    res.values = std::move(vals);
    res.vectors = std::move(vecs);
    return res;
}

namespace {

Matd oracle_power(const Eigen::Ref<const Matd>& cov, double eps, double exponent) {
    EigResult eig = sym_eig(cov);
    const long n = cov.rows();
    Vecd d(n);
    for (long i = 0; i < n; ++i) {
        double lam = std::max(eig.values[i], 0.0) + eps;
        if (lam <= 0.0)
            throw numerical_error("inverse_sqrt_oracle: zero eigenvalue with eps=0");
        d[i] = std::pow(lam, exponent);
    }
    Matd scaled = eig.vectors * d.asDiagonal();
    Matd out = matmul(scaled, Matd(eig.vectors.transpose()));
    return Matd(0.5 * (out + out.transpose()));
}

} // namespace

Matd inverse_sqrt_oracle(const Eigen::Ref<const Matd>& cov, double eps) {
    return oracle_power(cov, eps, -0.5);
}

Matd sqrt_oracle(const Eigen::Ref<const Matd>& cov, double eps) {
    return oracle_power(cov, eps, 0.5);
}

namespace {

struct Prescaled {
    Matd a_hat;
    double trace;
};

Prescaled ridge_and_scale(const Eigen::Ref<const Matd>& cov, double eps) {
    if (cov.rows() != cov.cols()) throw contract_error("newton_schulz: matrix not square");
    if (eps < 0) throw contract_error("newton_schulz: negative eps");
    Matd a = cov;
    a.diagonal().array() += eps;
    double t = a.trace();
    if (!(t > 0))
        throw numerical_error("newton_schulz: non-positive trace, input not PSD");
    a /= t;
    return {std::move(a), t};
}

} // namespace

Matd coupled_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters,
                           const NsObserver& observe) {
    if (iters < 1) throw contract_error("newton_schulz: iters must be >= 1");
    auto [a_hat, trace] = ridge_and_scale(cov, eps);
    const long n = a_hat.rows();
    const double inv_sqrt_trace = 1.0 / std::sqrt(trace);
    const Matd eye3 = 3.0 * Matd::Identity(n, n);

    Matd y = a_hat;
    Matd z = Matd::Identity(n, n);
    if (observe) observe(0, Matd(z * inv_sqrt_trace));
    for (int k = 1; k <= iters; ++k) {
        Matd t = 0.5 * (eye3 - matmul(z, y));
        y = matmul(y, t);
        z = matmul(t, z);
        if (!y.allFinite() || !z.allFinite())
            throw numerical_error("coupled Newton-Schulz produced non-finite iterate", k);
        if (observe) observe(k, Matd(z * inv_sqrt_trace));
    }
    Matd d = z * inv_sqrt_trace;
    return Matd(0.5 * (d + d.transpose()));
}

Matd coupled_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters) {
    return coupled_newton_schulz(cov, eps, iters, nullptr);
}

VanillaResult vanilla_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters,
                                    const NsObserver& observe) {
    if (iters < 1) throw contract_error("newton_schulz: iters must be >= 1");
    auto [a_hat, trace] = ridge_and_scale(cov, eps);
    const long n = a_hat.rows();
    const double inv_sqrt_trace = 1.0 / std::sqrt(trace);
    const Matd eye = Matd::Identity(n, n);

    VanillaResult res;
    res.residual_trace.reserve(iters + 1);
    Matd x = eye;
    auto record = [&](const Matd& xk) {
        double r = (matmul(matmul(xk, xk), a_hat) - eye).norm();
        res.residual_trace.push_back(std::isfinite(r) ? r : INFINITY);
        return std::isfinite(r);
    };
    record(x);
    if (observe) observe(0, Matd(x * inv_sqrt_trace));
    for (int k = 1; k <= iters; ++k) {
        Matd xsq = matmul(x, x);
        x = 0.5 * matmul(x, Matd(3.0 * eye - matmul(a_hat, xsq)));
        if (!x.allFinite()) {
            res.residual_trace.push_back(INFINITY);
            break;
        }
        if (!record(x)) break;
        if (observe) observe(k, Matd(x * inv_sqrt_trace));
    }
    res.d = x * inv_sqrt_trace;
    return res;
}

VanillaResult vanilla_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters) {
    return vanilla_newton_schulz(cov, eps, iters, nullptr);
}

} // namespace netdeconv
