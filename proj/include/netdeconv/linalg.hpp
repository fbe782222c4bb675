#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "netdeconv/tensor.hpp"

namespace netdeconv {

// Deterministic product: row blocks of fixed size are each computed by one
// single-threaded Eigen GEMM, so the summation order is a pure function of
// the shapes. Bit-reproducible per build regardless of worker count.
Matd matmul(const Eigen::Ref<const Matd>& a, const Eigen::Ref<const Matd>& b);

template <class Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& a) {
    return a.norm();
}

struct EigResult {
    Vecd values;   // ascending
    Matd vectors;  // columns, orthonormal
};

// Cyclic Jacobi sweeps until the off-diagonal Frobenius mass drops below
// 1e-12 relative to the matrix norm. Dense and O(n^3) per sweep; this is the
// module-wide ground truth for inverse square roots, not a fast path.
EigResult sym_eig(const Eigen::Ref<const Matd>& a);

// V diag((lambda+eps)^-1/2) V^T through sym_eig. Negative rounding-level
// eigenvalues are clamped to zero first.
Matd inverse_sqrt_oracle(const Eigen::Ref<const Matd>& cov, double eps);

// Matching square root, used by the deconvolution-identity test.
Matd sqrt_oracle(const Eigen::Ref<const Matd>& cov, double eps);

// Coupled Newton-Schulz for (cov + eps I)^-1/2. The iterate pair is run on
// the trace-normalized matrix and rescaled at exit; result symmetrized.
// Throws numerical_error with the step index if an iterate goes non-finite.
Matd coupled_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters);

struct VanillaResult {
    Matd d;
    std::vector<double> residual_trace;  // ||X_k X_k A_hat - I||_F, k = 0..iters
};

// Uncoupled iteration X <- 0.5 X (3I - A_hat X^2), kept for the stability
// study. On overflow the trace records inf for the failing step and the
// iteration halts, returning what was computed so far.
VanillaResult vanilla_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters);

// Per-iteration observers for the stability bench: called with the step
// index and the current rescaled estimate of cov^-1/2.
using NsObserver = std::function<void(int, const Matd&)>;
Matd coupled_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters,
                           const NsObserver& observe);
VanillaResult vanilla_newton_schulz(const Eigen::Ref<const Matd>& cov, double eps, int iters,
                                    const NsObserver& observe);

} // namespace netdeconv
