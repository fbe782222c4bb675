#pragma once

#include <utility>
#include <vector>

#include "netdeconv/patches.hpp"

namespace netdeconv {

struct WhiteningConfig {
    double eps = 1e-5;
    int ns_iters = 5;          // 15 is the input-layer default
    long sample_stride = 3;    // S, spatial subsampling for covariance
    long block_size = 64;      // B, channels per group
    long freeze_after = -1;    // steps until D freezes; <0 = never
    double momentum = 0.1;
    bool centered = true;
    bool track_residual = true;  // record |D A D - I|_F per estimate

    void validate() const {
        if (eps < 0 || ns_iters < 1 || sample_stride < 1 || block_size < 1 ||
            momentum < 0 || momentum > 1)
            throw contract_error("whitening config out of range");
    }
};

// Per-group whitening state. Running averages start at zero and climb the
// geometric ramp (1-(1-m)^t); once frozen the live values are replaced by
// the running averages and never move again.
struct WhiteningState {
    Vecd mu;
    Matd d;
    Vecd running_mu;
    Matd running_d;
    long step = 0;
    bool frozen = false;
    double last_residual = -1.0;

    void init(long f) {
        mu = Vecd::Zero(f);
        d = Matd::Identity(f, f);
        running_mu = Vecd::Zero(f);
        running_d = Matd::Zero(f, f);
        step = 0;
        frozen = false;
    }
};

// Column means and covariance of the row-subsampled patch matrix. Rows are
// kept when their output position (i, j) has i % S == 0 and j % S == 0;
// batch entries are never subsampled. Uncentered mode still reports mu but
// does not subtract it.
std::pair<Vecd, Matd> covariance(const PatchMatrix& x, long s, bool centered);

// Covariance of a column slice, same subsampling rule.
std::pair<Vecd, Matd> covariance(const PatchMatrix& x, const GroupRange& g, long s,
                                 bool centered);

void update_running(WhiteningState& state, const Vecd& mu, const Matd& d,
                    const WhiteningConfig& cfg);

// Row (c, center) of D reshaped per output channel into C x k x k kernels.
Tensor extract_deconv_kernel(const Eigen::Ref<const Matd>& d, long k, long channels);

struct SparsityStats {
    std::vector<long> hist_before, hist_after;  // 64 bins over min-max range
    std::vector<double> log_density_before, log_density_after;
    double kurtosis_before = 0, kurtosis_after = 0;
};

SparsityStats sparsity_stats(const std::vector<double>& before,
                             const std::vector<double>& after);

double excess_kurtosis(const std::vector<double>& v);

} // namespace netdeconv
