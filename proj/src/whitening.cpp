#include "netdeconv/whitening.hpp"

#include <cmath>

#include "netdeconv/linalg.hpp"

namespace netdeconv {

namespace {

std::vector<long> subsampled_rows(const PatchMatrix& x, long s) {
    if (s < 1) throw contract_error("sample stride must be positive");
    std::vector<long> rows;
    const long per_image = x.h_out * x.w_out;
    for (long n = 0; n < x.batch; ++n)
        for (long i = 0; i < x.h_out; i += s)
            for (long j = 0; j < x.w_out; j += s)
                rows.push_back(n * per_image + i * x.w_out + j);
    return rows;
}

std::pair<Vecd, Matd> cov_of_block(const Eigen::Ref<const Matd>& xs, bool centered) {
    const long n = xs.rows();
    if (n < 2) throw contract_error("covariance needs at least 2 sampled rows");
    Vecd mu = xs.colwise().mean();
    Matd cov;
    if (centered) {
        Matd c = xs.rowwise() - mu.transpose();
        cov = matmul(c.transpose(), c) / double(n);
    } else {
        cov = matmul(xs.transpose(), xs) / double(n);
    }
    cov = ((cov + cov.transpose()) * 0.5).eval();
    return {std::move(mu), std::move(cov)};
}

} // namespace

std::pair<Vecd, Matd> covariance(const PatchMatrix& x, long s, bool centered) {
    const auto rows = subsampled_rows(x, s);
    Matd xs(long(rows.size()), x.data.cols());
    for (size_t r = 0; r < rows.size(); ++r) xs.row(long(r)) = x.data.row(rows[r]);
    return cov_of_block(xs, centered);
}

std::pair<Vecd, Matd> covariance(const PatchMatrix& x, const GroupRange& g, long s,
                                 bool centered) {
    const auto rows = subsampled_rows(x, s);
    Matd xs(long(rows.size()), g.cols);
    for (size_t r = 0; r < rows.size(); ++r)
        xs.row(long(r)) = x.data.row(rows[r]).segment(g.col0, g.cols);
    return cov_of_block(xs, centered);
}

void update_running(WhiteningState& state, const Vecd& mu, const Matd& d,
                    const WhiteningConfig& cfg) {
    if (state.frozen) return;
    state.mu = mu;
    state.d = d;
    state.running_mu = (1.0 - cfg.momentum) * state.running_mu + cfg.momentum * mu;
    state.running_d = (1.0 - cfg.momentum) * state.running_d + cfg.momentum * d;
    state.step += 1;
    if (cfg.freeze_after >= 0 && state.step >= cfg.freeze_after) {
        state.mu = state.running_mu;
        state.d = state.running_d;
        state.frozen = true;
    }
}

Tensor extract_deconv_kernel(const Eigen::Ref<const Matd>& d, long k, long channels) {
    if (k < 1 || k % 2 == 0)
        throw contract_error("kernel extraction needs an odd kernel size");
    if (d.rows() != d.cols() || d.rows() != channels * k * k)
        throw contract_error("whitening matrix does not match channels*k*k");
    const long center = (k / 2) * k + (k / 2);
    Tensor out;
    out.shape = {channels, channels, k, k};
    out.data.resize(size_t(channels * channels * k * k));
    for (long c = 0; c < channels; ++c) {
        // row of D that produces the whitened center pixel of channel c
        const long row = c * k * k + center;
        for (long ci = 0; ci < channels; ++ci)
            for (long dy = 0; dy < k; ++dy)
                for (long dx = 0; dx < k; ++dx)
                    out.data[size_t(((c * channels + ci) * k + dy) * k + dx)] =
                        d(row, (ci * k + dy) * k + dx);
    }
    return out;
}

double excess_kurtosis(const std::vector<double>& v) {
    const double n = double(v.size());
    if (n < 2) throw contract_error("kurtosis needs at least 2 samples");
    double mean = 0;
    for (double x : v) mean += x;
    mean /= n;
    double m2 = 0, m4 = 0;
    for (double x : v) {
        const double d = x - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    if (m2 <= 0) throw contract_error("kurtosis undefined for constant input");
    return m4 / (m2 * m2) - 3.0;
}

namespace {

std::vector<long> histogram64(const std::vector<double>& v, double lo, double hi) {
    std::vector<long> h(64, 0);
    const double span = hi - lo;
    for (double x : v) {
        long b = long(std::floor((x - lo) / span * 64.0));
        if (b < 0) b = 0;
        if (b > 63) b = 63;
        ++h[size_t(b)];
    }
    return h;
}

std::vector<double> log_density(const std::vector<long>& h, size_t n) {
    std::vector<double> out(h.size());
    for (size_t i = 0; i < h.size(); ++i)
        out[i] = h[i] > 0 ? std::log(double(h[i]) / double(n)) : -INFINITY;
    return out;
}

} // namespace

SparsityStats sparsity_stats(const std::vector<double>& before,
                             const std::vector<double>& after) {
    if (before.empty() || after.empty())
        throw contract_error("sparsity stats need non-empty samples");
    auto span = [](const std::vector<double>& v) {
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        if (!(hi > lo)) throw contract_error("sparsity stats undefined for constant input");
        return std::pair<double, double>{lo, hi};
    };
    const auto [blo, bhi] = span(before);
    const auto [alo, ahi] = span(after);
    SparsityStats s;
    s.hist_before = histogram64(before, blo, bhi);
    s.hist_after = histogram64(after, alo, ahi);
    s.log_density_before = log_density(s.hist_before, before.size());
    s.log_density_after = log_density(s.hist_after, after.size());
    s.kurtosis_before = excess_kurtosis(before);
    s.kurtosis_after = excess_kurtosis(after);
    return s;
}

} // namespace netdeconv
