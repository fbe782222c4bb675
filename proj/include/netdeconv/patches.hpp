#pragma once

#include <vector>

#include "netdeconv/tensor.hpp"

namespace netdeconv {

struct PatchSpec {
    long kernel = 1;
    long stride = 1;
    long padding = 0;
    long channels_in = 1;

    long cols() const { return channels_in * kernel * kernel; }
    long out_dim(long in) const { return (in + 2 * padding - kernel) / stride + 1; }
    bool divides(long in) const { return (in + 2 * padding - kernel) % stride == 0; }
};

// Patch data matrix. Rows scan batch-major then row-major over output
// positions; columns are channel-major (channel block, then kernel row,
// then kernel column), matching Algorithm "horizontally concatenate".
struct PatchMatrix {
    Matd data;
    long batch = 0;
    long h_out = 0;
    long w_out = 0;

    long rows() const { return data.rows(); }
    long cols() const { return data.cols(); }
};

PatchMatrix im2col(const Tensor& x, const PatchSpec& spec);

// Adjoint scatter-add: <im2col(x), g> == <x, col2im(g)> for all x, g.
Tensor col2im(const PatchMatrix& g, const PatchSpec& spec,
              const std::vector<long>& out_shape);

// Column ranges of X per channel group of width B (last group takes the
// remainder when channels_in % B != 0). Views, not copies.
struct GroupRange {
    long col0 = 0;
    long cols = 0;
    long channels = 0;
};

std::vector<GroupRange> partition_groups(const PatchSpec& spec, long block_size);

} // namespace netdeconv
