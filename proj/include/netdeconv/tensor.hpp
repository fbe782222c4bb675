#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <numeric>
#include <vector>

#include "netdeconv/errors.hpp"

namespace netdeconv {

// Row-major double matrices everywhere: the data layout matches the Tensor
// contract and the NDCV on-disk format, so maps never reorder memory.
using Matd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vecd = Eigen::VectorXd;
using MapMatd = Eigen::Map<Matd>;
using ConstMapMatd = Eigen::Map<const Matd>;

// Dense n-d array, row-major, 64-bit floats. Views are explicit: map2d hands
// out an Eigen::Map sharing the buffer, reshape only relabels dims.
struct Tensor {
    std::vector<long> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<long> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::initializer_list<long> s) : Tensor(std::vector<long>(s)) {}

    static long count(const std::vector<long>& s) {
        long n = 1;
        for (long d : s) {
            if (d < 0) throw contract_error("tensor dim must be non-negative");
            n *= d;
        }
        return n;
    }

    long size() const { return static_cast<long>(data.size()); }
    long dim(int i) const { return shape.at(i); }
    int rank() const { return static_cast<int>(shape.size()); }

    void reshape(std::vector<long> s) {
        if (count(s) != size()) throw contract_error("reshape changes element count");
        shape = std::move(s);
    }

    MapMatd map2d() {
        if (rank() != 2) throw contract_error("map2d needs a rank-2 tensor");
        return MapMatd(data.data(), shape[0], shape[1]);
    }
    ConstMapMatd map2d() const {
        if (rank() != 2) throw contract_error("map2d needs a rank-2 tensor");
        return ConstMapMatd(data.data(), shape[0], shape[1]);
    }
    MapMatd map2d(long rows, long cols) {
        if (rows * cols != size()) throw contract_error("map2d shape mismatch");
        return MapMatd(data.data(), rows, cols);
    }
    ConstMapMatd map2d(long rows, long cols) const {
        if (rows * cols != size()) throw contract_error("map2d shape mismatch");
        return ConstMapMatd(data.data(), rows, cols);
    }

    // N,C,H,W accessors for the common image layout
    double& at4(long n, long c, long h, long w) {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at4(long n, long c, long h, long w) const {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
};

inline Tensor tensor_from(const Matd& m) {
    Tensor t({m.rows(), m.cols()});
    MapMatd(t.data.data(), m.rows(), m.cols()) = m;
    return t;
}

} // namespace netdeconv
