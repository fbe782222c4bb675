#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace netdeconv {

// Deterministic random stream. mt19937_64 gives the same bit sequence on
// every platform; the uniform/gaussian transforms below are written out
// explicitly because the std::*_distribution wrappers are not portable
// across standard libraries.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, one spare cached
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // unbiased integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) {
        if (n <= 1) return 0;
        std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= lim);
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[next_below(i)]);
    }

    void fill_gaussian(double* out, long n, double mean = 0.0, double stddev = 1.0) {
        for (long i = 0; i < n; ++i) out[i] = gaussian(mean, stddev);
    }

    void fill_uniform(double* out, long n, double lo = 0.0, double hi = 1.0) {
        for (long i = 0; i < n; ++i) out[i] = uniform(lo, hi);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline RandomStream seeded_rng(std::uint64_t seed) { return RandomStream(seed); }

} // namespace netdeconv
