#pragma once

#include <string>

#include "netdeconv/tensor.hpp"

namespace netdeconv {

// Little-endian matrix container: "NDCV" magic, u32 version, u32 rows,
// u32 cols, then rows*cols float64 in row-major order.
inline constexpr uint32_t kNdcvVersion = 1;

void save_ndcv(const std::string& path, const Eigen::Ref<const Matd>& m);
Matd load_ndcv(const std::string& path);

} // namespace netdeconv
