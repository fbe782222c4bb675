#include "netdeconv/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "netdeconv/patches.hpp"

namespace netdeconv {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw contract_error("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return buf;
}

void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw contract_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
    if (!f) throw contract_error("short write to " + path);
}

uint32_t be32(const std::vector<unsigned char>& buf, size_t at) {
    if (at + 4 > buf.size())
        throw format_error("truncated IDX header", static_cast<long long>(buf.size()));
    return (uint32_t(buf[at]) << 24) | (uint32_t(buf[at + 1]) << 16) |
           (uint32_t(buf[at + 2]) << 8) | uint32_t(buf[at + 3]);
}

void push_be32(std::vector<unsigned char>& buf, uint32_t v) {
    buf.push_back(static_cast<unsigned char>(v >> 24));
    buf.push_back(static_cast<unsigned char>(v >> 16));
    buf.push_back(static_cast<unsigned char>(v >> 8));
    buf.push_back(static_cast<unsigned char>(v));
}

unsigned char quantize(double v) {
    double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<unsigned char>(q);
}

constexpr uint32_t kIdxImages = 0x00000803;  // u8 payload, 3 dims
constexpr uint32_t kIdxLabels = 0x00000801;  // u8 payload, 1 dim
constexpr long kCifarRecord = 1 + 3 * 32 * 32;

} // namespace

// ---------------------------------------------------------------------------

Tensor load_idx_images(const std::string& path) {
    auto buf = read_file(path);
    uint32_t magic = be32(buf, 0);
    if (magic == kIdxLabels)
        throw format_error("IDX labels magic on an images path", 0);
    if (magic != kIdxImages) throw format_error("bad IDX images magic", 0);
    long n = be32(buf, 4);
    long h = be32(buf, 8);
    long w = be32(buf, 12);
    size_t need = 16 + static_cast<size_t>(n) * h * w;
    if (buf.size() < need)
        throw format_error("truncated IDX image payload",
                           static_cast<long long>(buf.size()));
    Tensor t({n, 1, h, w});
    for (long i = 0; i < t.size(); ++i)
        t.data[static_cast<size_t>(i)] = buf[16 + static_cast<size_t>(i)] / 255.0;
    return t;
}

std::vector<uint8_t> load_idx_labels(const std::string& path) {
    auto buf = read_file(path);
    uint32_t magic = be32(buf, 0);
    if (magic == kIdxImages)
        throw format_error("IDX images magic on a labels path", 0);
    if (magic != kIdxLabels) throw format_error("bad IDX labels magic", 0);
    size_t n = be32(buf, 4);
    if (buf.size() < 8 + n)
        throw format_error("truncated IDX label payload",
                           static_cast<long long>(buf.size()));
    return std::vector<uint8_t>(buf.begin() + 8, buf.begin() + 8 + static_cast<long>(n));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split) {
    Dataset d;
    d.images = load_idx_images(images_path);
    d.labels = load_idx_labels(labels_path);
    d.split = split;
    if (d.images.dim(0) != static_cast<long>(d.labels.size()))
        throw format_error("IDX image/label count mismatch", 4);
    return d;
}

void save_idx_images(const std::string& path, const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != 1)
        throw contract_error("save_idx_images expects [N,1,H,W]");
    std::vector<unsigned char> buf;
    buf.reserve(16 + static_cast<size_t>(images.size()));
    push_be32(buf, kIdxImages);
    push_be32(buf, static_cast<uint32_t>(images.dim(0)));
    push_be32(buf, static_cast<uint32_t>(images.dim(2)));
    push_be32(buf, static_cast<uint32_t>(images.dim(3)));
    for (double v : images.data) buf.push_back(quantize(v));
    write_file(path, buf);
}

void save_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
    std::vector<unsigned char> buf;
    buf.reserve(8 + labels.size());
    push_be32(buf, kIdxLabels);
    push_be32(buf, static_cast<uint32_t>(labels.size()));
    buf.insert(buf.end(), labels.begin(), labels.end());
    write_file(path, buf);
}

// ---------------------------------------------------------------------------

Dataset load_cifar10(const std::string& path, const std::string& split) {
    auto buf = read_file(path);
    if (buf.empty() || buf.size() % kCifarRecord != 0)
        throw format_error("CIFAR file size is not a multiple of the 3073-byte record",
                           static_cast<long long>(buf.size()));
    long n = static_cast<long>(buf.size()) / kCifarRecord;
    Dataset d;
    d.images = Tensor({n, 3, 32, 32});
    d.labels.resize(static_cast<size_t>(n));
    d.split = split;
    for (long i = 0; i < n; ++i) {
        size_t at = static_cast<size_t>(i) * kCifarRecord;
        if (buf[at] > 9)
            throw format_error("CIFAR label out of range", static_cast<long long>(at));
        d.labels[static_cast<size_t>(i)] = buf[at];
        double* px = &d.images.at4(i, 0, 0, 0);
        for (long j = 0; j < kCifarRecord - 1; ++j)
            px[j] = buf[at + 1 + static_cast<size_t>(j)] / 255.0;
    }
    return d;
}

void save_cifar10(const std::string& path, const Dataset& data) {
    if (data.images.rank() != 4 || data.images.dim(1) != 3 || data.images.dim(2) != 32 ||
        data.images.dim(3) != 32)
        throw contract_error("save_cifar10 expects [N,3,32,32]");
    if (data.images.dim(0) != static_cast<long>(data.labels.size()))
        throw contract_error("save_cifar10 image/label count mismatch");
    std::vector<unsigned char> buf;
    buf.reserve(static_cast<size_t>(data.images.dim(0)) * kCifarRecord);
    for (long i = 0; i < data.images.dim(0); ++i) {
        buf.push_back(data.labels[static_cast<size_t>(i)]);
        const double* px = data.images.data.data() + i * (kCifarRecord - 1);
        for (long j = 0; j < kCifarRecord - 1; ++j) buf.push_back(quantize(px[j]));
    }
    write_file(path, buf);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<long> shuffled_indices(long n, uint64_t seed) {
    std::vector<long> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0L);
    RandomStream rng(seed);
    rng.shuffle(idx);
    return idx;
}

Tensor gather_images(const Tensor& images, const std::vector<long>& idx, long count) {
    std::vector<long> shape = images.shape;
    shape[0] = count;
    Tensor out(shape);
    long per = images.size() / images.dim(0);
    for (long i = 0; i < count; ++i)
        std::copy_n(images.data.begin() + idx[static_cast<size_t>(i)] * per, per,
                    out.data.begin() + i * per);
    return out;
}

} // namespace

Dataset subset(const Dataset& data, long count, uint64_t seed) {
    long n = data.images.dim(0);
    if (count < 1 || count > n) throw contract_error("subset count out of range");
    auto idx = shuffled_indices(n, seed);
    Dataset out;
    out.images = gather_images(data.images, idx, count);
    out.labels.resize(static_cast<size_t>(count));
    for (long i = 0; i < count; ++i)
        out.labels[static_cast<size_t>(i)] = data.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    out.split = data.split;
    return out;
}

Tensor sample_patch_batch(const Dataset& data, long count, uint64_t seed) {
    long n = data.images.dim(0);
    if (count < 1 || count > n)
        throw contract_error("sample without replacement needs 1 <= count <= dataset size");
    auto idx = shuffled_indices(n, seed);
    return gather_images(data.images, idx, count);
}

// ---------------------------------------------------------------------------

Matd gaussian_kernel(long k, double sigma) {
    if (k < 1) throw contract_error("kernel size must be positive");
    Matd ker = Matd::Zero(k, k);
    if (sigma <= 1e-12) {
        ker(k / 2, k / 2) = 1.0;  // delta in the zero-width limit
        return ker;
    }
    double c = (k - 1) / 2.0;
    for (long y = 0; y < k; ++y)
        for (long x = 0; x < k; ++x) {
            double dy = (y - c) / sigma, dx = (x - c) / sigma;
            ker(y, x) = std::exp(-0.5 * (dy * dy + dx * dx));
        }
    ker /= ker.sum();
    return ker;
}

BlurProblem make_blur_problem(const Tensor& image_hw, long k, double sigma_kernel,
                              double noise_sigma, uint64_t seed) {
    if (noise_sigma < 0) throw contract_error("noise sigma must be non-negative");
    if (k < 1 || k % 2 == 0) throw contract_error("blur kernel size must be odd");
    long h, w;
    const double* src;
    if (image_hw.rank() == 2) {
        h = image_hw.dim(0);
        w = image_hw.dim(1);
        src = image_hw.data.data();
    } else if (image_hw.rank() == 3 && image_hw.dim(0) == 1) {
        h = image_hw.dim(1);
        w = image_hw.dim(2);
        src = image_hw.data.data();
    } else {
        throw contract_error("make_blur_problem expects a single-channel image");
    }
    if (h < k || w < k) throw contract_error("image smaller than blur kernel");

    BlurProblem p;
    p.noise_sigma = noise_sigma;
    p.true_kernel = gaussian_kernel(k, sigma_kernel);
    p.x_clean = Tensor({1, 1, h, w});
    std::copy_n(src, h * w, p.x_clean.data.begin());

    PatchSpec spec;
    spec.kernel = k;
    spec.channels_in = 1;
    PatchMatrix pm = im2col(p.x_clean, spec);
    ConstMapMatd kv(p.true_kernel.data(), k * k, 1);
    p.y_blurred = pm.data * kv;
    RandomStream rng(seed);
    for (long i = 0; i < p.y_blurred.size(); ++i)
        p.y_blurred[i] += rng.gaussian(0.0, noise_sigma);
    return p;
}

} // namespace netdeconv
