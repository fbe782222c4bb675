#include "netdeconv/ndcv_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "netdeconv/errors.hpp"

namespace netdeconv {

namespace {

static_assert(std::endian::native == std::endian::little,
              "byte-swap support not implemented for big-endian hosts");

void put_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(std::ifstream& f, long offset) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw format_error("truncated header", offset);
    return v;
}

// row-major payload, so external readers can reshape straight off the header
using RowMajorMatd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

} // namespace

void save_ndcv(const std::string& path, const Eigen::Ref<const Matd>& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw contract_error("cannot open for writing: " + path);
    f.write("NDCV", 4);
    put_u32(f, kNdcvVersion);
    put_u32(f, uint32_t(m.rows()));
    put_u32(f, uint32_t(m.cols()));
    RowMajorMatd tmp = m;
    f.write(reinterpret_cast<const char*>(tmp.data()),
            std::streamsize(tmp.size()) * 8);
    if (!f) throw contract_error("write failed: " + path);
}

Matd load_ndcv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw contract_error("cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "NDCV", 4) != 0)
        throw format_error("bad magic, expected NDCV", 0);
    const uint32_t version = get_u32(f, 4);
    if (version != kNdcvVersion)
        throw format_error("unsupported version " + std::to_string(version), 4);
    const uint32_t rows = get_u32(f, 8);
    const uint32_t cols = get_u32(f, 12);
    RowMajorMatd m(static_cast<long>(rows), static_cast<long>(cols));
    const std::streamsize bytes = std::streamsize(rows) * cols * 8;
    f.read(reinterpret_cast<char*>(m.data()), bytes);
    if (f.gcount() != bytes)
        throw format_error("truncated payload", 16 + long(f.gcount()));
    return m;
}

} // namespace netdeconv
