#include "netdeconv/patches.hpp"

#include "netdeconv/threading.hpp"

namespace netdeconv {

namespace {

void check_spec(const Tensor& x, const PatchSpec& spec) {
    if (x.rank() != 4) throw contract_error("im2col: expected N,C,H,W tensor");
    if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0)
        throw contract_error("im2col: invalid patch spec");
    if (x.dim(1) != spec.channels_in)
        throw contract_error("im2col: channel count disagrees with spec");
    if (!spec.divides(x.dim(2)) || !spec.divides(x.dim(3)))
        throw contract_error("im2col: output size not integral for these dims");
    if (spec.out_dim(x.dim(2)) < 1 || spec.out_dim(x.dim(3)) < 1)
        throw contract_error("im2col: kernel larger than padded input");
}

} // namespace

PatchMatrix im2col(const Tensor& x, const PatchSpec& spec) {
    check_spec(x, spec);
    const long n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const long k = spec.kernel, st = spec.stride, p = spec.padding;
    const long ho = spec.out_dim(h), wo = spec.out_dim(w);

    PatchMatrix out;
    out.batch = n;
    out.h_out = ho;
    out.w_out = wo;
    out.data.resize(n * ho * wo, c * k * k);

    parallel_for(n, [&](long img) {
        for (long i = 0; i < ho; ++i) {
            for (long j = 0; j < wo; ++j) {
                double* row = out.data.row((img * ho + i) * wo + j).data();
                const long y0 = i * st - p, x0 = j * st - p;
                for (long ch = 0; ch < c; ++ch) {
                    for (long dy = 0; dy < k; ++dy) {
                        const long y = y0 + dy;
                        for (long dx = 0; dx < k; ++dx) {
                            const long xx = x0 + dx;
                            row[(ch * k + dy) * k + dx] =
                                (y >= 0 && y < h && xx >= 0 && xx < w) ? x.at4(img, ch, y, xx)
                                                                       : 0.0;
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor col2im(const PatchMatrix& g, const PatchSpec& spec,
              const std::vector<long>& out_shape) {
    if (out_shape.size() != 4) throw contract_error("col2im: expected N,C,H,W shape");
    const long n = out_shape[0], c = out_shape[1], h = out_shape[2], w = out_shape[3];
    const long k = spec.kernel, st = spec.stride, p = spec.padding;
    const long ho = spec.out_dim(h), wo = spec.out_dim(w);
    if (c != spec.channels_in || g.rows() != n * ho * wo || g.cols() != c * k * k)
        throw contract_error("col2im: gradient shape disagrees with spec");

    Tensor x(out_shape);
    parallel_for(n, [&](long img) {
        for (long i = 0; i < ho; ++i) {
            for (long j = 0; j < wo; ++j) {
                const double* row = g.data.row((img * ho + i) * wo + j).data();
                const long y0 = i * st - p, x0 = j * st - p;
                for (long ch = 0; ch < c; ++ch) {
                    for (long dy = 0; dy < k; ++dy) {
                        const long y = y0 + dy;
                        if (y < 0 || y >= h) continue;
                        for (long dx = 0; dx < k; ++dx) {
                            const long xx = x0 + dx;
                            if (xx < 0 || xx >= w) continue;
                            x.at4(img, ch, y, xx) += row[(ch * k + dy) * k + dx];
                        }
                    }
                }
            }
        }
    });
    return x;
}

std::vector<GroupRange> partition_groups(const PatchSpec& spec, long block_size) {
    if (block_size < 1) throw contract_error("partition_groups: block size must be >= 1");
    const long kk = spec.kernel * spec.kernel;
    std::vector<GroupRange> groups;
    long ch = 0;
    while (ch < spec.channels_in) {
        long b = std::min(block_size, spec.channels_in - ch);
        groups.push_back({ch * kk, b * kk, b});
        ch += b;
    }
    return groups;
}

} // namespace netdeconv
