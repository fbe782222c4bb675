#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "netdeconv/rng.hpp"
#include "netdeconv/tensor.hpp"

namespace netdeconv {

struct Dataset {
    Tensor images;  // [N,C,H,W], values in [0,1]
    std::vector<uint8_t> labels;
    std::string split;
};

// ---------------------------------------------------------------------------
// IDX container (big-endian header, u8 payload)

Tensor load_idx_images(const std::string& path);
std::vector<uint8_t> load_idx_labels(const std::string& path);
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split);

void save_idx_images(const std::string& path, const Tensor& images);
void save_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

// ---------------------------------------------------------------------------
// CIFAR-10 binary (per record: 1 label byte + 3072 CHW pixel bytes)

Dataset load_cifar10(const std::string& path, const std::string& split);
void save_cifar10(const std::string& path, const Dataset& data);

// first `count` samples after a seeded shuffle
Dataset subset(const Dataset& data, long count, uint64_t seed);

// uniform image sample without replacement
Tensor sample_patch_batch(const Dataset& data, long count, uint64_t seed);

// ---------------------------------------------------------------------------
// blur problem (valid-region convolution of one gray image)

struct BlurProblem {
    Matd true_kernel;  // k x k, sums to 1
    Tensor x_clean;    // [1,1,H,W]
    Vecd y_blurred;    // (H-k+1)(W-k+1)
    double noise_sigma;
};

Matd gaussian_kernel(long k, double sigma);
BlurProblem make_blur_problem(const Tensor& image_hw, long k, double sigma_kernel,
                              double noise_sigma, uint64_t seed);

// ---------------------------------------------------------------------------
// synthetic data
//
// natural_rgb: bilinear gradient background, opaque ellipses/rectangles,
// separable Gaussian blur, pixel noise. The generators below build datasets
// with a strong shared low-frequency background plus a small class signature,
// so that class information hides under heavy pixel correlation.

Tensor natural_rgb(RandomStream& rng, long h, long w, int shapes = 24,
                   double blur_sigma = 0.8, double noise = 0.01);

Dataset synth_natural_set(uint64_t seed, long n, long hw = 32);
Dataset synth_bg_digits(uint64_t seed, long n);               // 1x28x28, 10 classes
Dataset synth_fashion(uint64_t seed, long n, double noise = 0.1);  // 1x28x28
Dataset synth_bg_cifar(uint64_t seed, long n);                // 3x32x32, 10 classes

} // namespace netdeconv
