#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "netdeconv/linalg.hpp"
#include "netdeconv/patches.hpp"
#include "netdeconv/rng.hpp"

using namespace netdeconv;

namespace {

Tensor random_image(std::vector<long> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    RandomStream rng(seed);
    rng.fill_gaussian(t.data.data(), t.size());
    return t;
}

double dot(const Matd& a, const Matd& b) { return (a.array() * b.array()).sum(); }

double dot(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// direct sliding-window convolution, the matmul-free oracle
Tensor conv_direct(const Tensor& x, const PatchSpec& spec, const Matd& w) {
    const long n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const long k = spec.kernel, st = spec.stride, p = spec.padding;
    const long ho = spec.out_dim(h), wo = spec.out_dim(wd);
    const long co = w.cols();
    Tensor y({n, co, ho, wo});
    for (long img = 0; img < n; ++img)
        for (long oc = 0; oc < co; ++oc)
            for (long i = 0; i < ho; ++i)
                for (long j = 0; j < wo; ++j) {
                    double s = 0;
                    for (long ch = 0; ch < c; ++ch)
                        for (long dy = 0; dy < k; ++dy)
                            for (long dx = 0; dx < k; ++dx) {
                                const long yy = i * st - p + dy;
                                const long xx = j * st - p + dx;
                                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                                s += x.at4(img, ch, yy, xx) *
                                     w((ch * k + dy) * k + dx, oc);
                            }
                    y.at4(img, oc, i, j) = s;
                }
    return y;
}

} // namespace

// ---------------------------------------------------------------------------
// im2col

TEST_CASE("im2col on the 3x3 counting image, k=2") {
    Tensor x({1, 1, 3, 3});
    for (long i = 0; i < 9; ++i) x.data[size_t(i)] = double(i + 1);
    PatchSpec spec{2, 1, 0, 1};
    PatchMatrix pm = im2col(x, spec);
    CHECK(pm.batch == 1);
    CHECK(pm.h_out == 2);
    CHECK(pm.w_out == 2);
    REQUIRE(pm.rows() == 4);
    REQUIRE(pm.cols() == 4);
    Matd want(4, 4);
    want << 1, 2, 4, 5,
            2, 3, 5, 6,
            4, 5, 7, 8,
            5, 6, 8, 9;
    CHECK((pm.data - want).norm() == 0.0);
}

TEST_CASE("im2col with k=1 flattens to (N H W) x C rows") {
    Tensor x = random_image({2, 3, 4, 5}, 1);
    PatchSpec spec{1, 1, 0, 3};
    PatchMatrix pm = im2col(x, spec);
    REQUIRE(pm.rows() == 2 * 4 * 5);
    REQUIRE(pm.cols() == 3);
    for (long n = 0; n < 2; ++n)
        for (long i = 0; i < 4; ++i)
            for (long j = 0; j < 5; ++j)
                for (long c = 0; c < 3; ++c)
                    CHECK(pm.data((n * 4 + i) * 5 + j, c) == x.at4(n, c, i, j));
}

TEST_CASE("im2col columns are channel-major, kernel row-major") {
    Tensor x = random_image({1, 2, 2, 2}, 2);
    PatchSpec spec{2, 1, 0, 2};
    PatchMatrix pm = im2col(x, spec);
    REQUIRE(pm.rows() == 1);
    REQUIRE(pm.cols() == 8);
    long col = 0;
    for (long c = 0; c < 2; ++c)
        for (long dy = 0; dy < 2; ++dy)
            for (long dx = 0; dx < 2; ++dx)
                CHECK(pm.data(0, col++) == x.at4(0, c, dy, dx));
}

TEST_CASE("im2col gathers x(c, i s - p + dy, j s - p + dx) with zero padding") {
    Tensor x = random_image({2, 2, 9, 9}, 3);
    PatchSpec spec{3, 2, 1, 2};
    PatchMatrix pm = im2col(x, spec);
    const long ho = spec.out_dim(9), wo = spec.out_dim(9);
    for (long n = 0; n < 2; ++n)
        for (long i = 0; i < ho; ++i)
            for (long j = 0; j < wo; ++j)
                for (long c = 0; c < 2; ++c)
                    for (long dy = 0; dy < 3; ++dy)
                        for (long dx = 0; dx < 3; ++dx) {
                            const long yy = i * 2 - 1 + dy, xx = j * 2 - 1 + dx;
                            const double want =
                                (yy >= 0 && yy < 9 && xx >= 0 && xx < 9)
                                    ? x.at4(n, c, yy, xx)
                                    : 0.0;
                            CHECK(pm.data((n * ho + i) * wo + j,
                                          (c * 3 + dy) * 3 + dx) == want);
                        }
}

TEST_CASE("im2col input validation") {
    PatchSpec spec{2, 2, 0, 1};
    Tensor flat({4, 9});
    CHECK_THROWS_AS(im2col(flat, spec), contract_error);

    Tensor wrong_c({1, 2, 4, 4});
    CHECK_THROWS_AS(im2col(wrong_c, spec), contract_error);

    // (5 - 2) % 2 != 0: output grid not integral
    Tensor odd({1, 1, 5, 5});
    CHECK_THROWS_AS(im2col(odd, spec), contract_error);
}

// ---------------------------------------------------------------------------
// convolution as matrix multiplication

TEST_CASE("im2col + matmul equals the direct sliding-window convolution") {
    Tensor x = random_image({2, 3, 8, 8}, 4);
    RandomStream rng(5);
    for (long pad : {0L, 1L}) {
        PatchSpec spec{3, 1, pad, 3};
        Matd w(spec.cols(), 4);
        rng.fill_gaussian(w.data(), w.size());
        PatchMatrix pm = im2col(x, spec);
        Matd y = matmul(pm.data, w);
        Tensor want = conv_direct(x, spec, w);
        const long ho = spec.out_dim(8), wo = spec.out_dim(8);
        double worst = 0;
        for (long n = 0; n < 2; ++n)
            for (long oc = 0; oc < 4; ++oc)
                for (long i = 0; i < ho; ++i)
                    for (long j = 0; j < wo; ++j)
                        worst = std::max(worst,
                                         std::abs(y((n * ho + i) * wo + j, oc) -
                                                  want.at4(n, oc, i, j)));
        CHECK(worst < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// col2im

TEST_CASE("col2im is the adjoint of im2col over the kernel/stride/padding grid") {
    Tensor x = random_image({2, 2, 9, 9}, 6);
    RandomStream rng(7);
    int combos = 0;
    for (long k : {1L, 2L, 3L, 5L, 7L})
        for (long s : {1L, 2L, 3L})
            for (long p : {0L, 1L, 3L}) {
                PatchSpec spec{k, s, p, 2};
                if (!spec.divides(9) || spec.out_dim(9) < 1) continue;
                PatchMatrix g;
                g.batch = 2;
                g.h_out = spec.out_dim(9);
                g.w_out = spec.out_dim(9);
                g.data.resize(2 * g.h_out * g.w_out, spec.cols());
                rng.fill_gaussian(g.data.data(), g.data.size());

                PatchMatrix cols = im2col(x, spec);
                Tensor back = col2im(g, spec, {2, 2, 9, 9});
                CHECK(std::abs(dot(cols.data, g.data) - dot(x, back)) <
                      1e-10 * std::max(1.0, std::abs(dot(x, back))));
                ++combos;
            }
    // the grid must actually exercise a spread of shapes
    CHECK(combos >= 20);
}

TEST_CASE("col2im recovers a delta image exactly when stride equals kernel") {
    Tensor x({1, 1, 9, 9});
    x.at4(0, 0, 4, 7) = 1.0;
    PatchSpec spec{3, 3, 0, 1};
    Tensor back = col2im(im2col(x, spec), spec, {1, 1, 9, 9});
    for (long i = 0; i < x.size(); ++i) CHECK(back.data[size_t(i)] == x.data[size_t(i)]);
}

TEST_CASE("col2im accumulates overlap counts from an all-ones gradient") {
    PatchSpec spec{2, 1, 0, 1};
    PatchMatrix g;
    g.batch = 1;
    g.h_out = 2;
    g.w_out = 2;
    g.data = Matd::Ones(4, 4);
    Tensor back = col2im(g, spec, {1, 1, 3, 3});
    Matd want(3, 3);
    want << 1, 2, 1,
            2, 4, 2,
            1, 2, 1;
    for (long i = 0; i < 3; ++i)
        for (long j = 0; j < 3; ++j) CHECK(back.at4(0, 0, i, j) == want(i, j));
}

TEST_CASE("col2im validates shapes") {
    PatchSpec spec{2, 1, 0, 1};
    PatchMatrix g;
    g.batch = 1;
    g.h_out = 2;
    g.w_out = 2;
    g.data = Matd::Ones(4, 4);
    CHECK_THROWS_AS(col2im(g, spec, {1, 1, 3}), contract_error);
    CHECK_THROWS_AS(col2im(g, spec, {1, 2, 3, 3}), contract_error);
    CHECK_THROWS_AS(col2im(g, spec, {2, 1, 3, 3}), contract_error);
}

// ---------------------------------------------------------------------------
// partition_groups

TEST_CASE("partition_groups splits channels into B-sized blocks") {
    PatchSpec c128{3, 1, 1, 128};
    auto g = partition_groups(c128, 64);
    REQUIRE(g.size() == 2);
    CHECK(g[0].col0 == 0);
    CHECK(g[0].cols == 576);
    CHECK(g[0].channels == 64);
    CHECK(g[1].col0 == 576);
    CHECK(g[1].cols == 576);

    PatchSpec c3{3, 1, 1, 3};
    auto g3 = partition_groups(c3, 64);
    REQUIRE(g3.size() == 1);
    CHECK(g3[0].cols == 27);
    CHECK(g3[0].channels == 3);

    // remainder group takes what is left
    PatchSpec c96{3, 1, 1, 96};
    auto g96 = partition_groups(c96, 64);
    REQUIRE(g96.size() == 2);
    CHECK(g96[0].cols == 576);
    CHECK(g96[1].col0 == 576);
    CHECK(g96[1].cols == 288);
    CHECK(g96[1].channels == 32);

    CHECK_THROWS_AS(partition_groups(c96, 0), contract_error);
}

TEST_CASE("group ranges tile the column span exactly") {
    PatchSpec spec{5, 1, 2, 23};
    auto groups = partition_groups(spec, 4);
    long col = 0, ch = 0;
    for (const auto& g : groups) {
        CHECK(g.col0 == col);
        CHECK(g.cols == g.channels * 25);
        col += g.cols;
        ch += g.channels;
    }
    CHECK(col == spec.cols());
    CHECK(ch == 23);
}
