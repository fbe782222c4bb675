#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "netdeconv/patches.hpp"
#include "netdeconv/rng.hpp"
#include "netdeconv/whitening.hpp"

namespace netdeconv {

// train: batch statistics, running averages updated, caches set for backward.
// eval:  stored (frozen or running) statistics, no mutation, bit-deterministic.
// diag:  batch statistics but no state mutation; used by the covariance
//        identity diagnostic and by metric passes at scales where running
//        averages have not settled.
enum class Mode { train, eval, diag };

// Flattened view of one parameter tensor and its gradient slot. Weight decay
// applies only to slots with decay=true (weight matrices, not biases or
// normalization affines).
struct ParamSlot {
    double* value;
    double* grad;
    long n;
    bool decay;
};

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, Mode mode) = 0;
    virtual Tensor backward(const Tensor& grad_y) = 0;
    virtual std::vector<ParamSlot> params() { return {}; }
    virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// dense layers

class DenseLayer : public Layer {
public:
    DenseLayer(long f_in, long f_out, RandomStream& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::vector<ParamSlot> params() override;
    std::string name() const override { return "dense"; }

    Matd w;  // f_in x f_out
    Vecd b;
    Matd gw;
    Vecd gb;

private:
    Matd x_;  // cached input
};

class DeconvDenseLayer : public Layer {
public:
    DeconvDenseLayer(long f_in, long f_out, const WhiteningConfig& cfg,
                     RandomStream& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::vector<ParamSlot> params() override;
    std::string name() const override { return "deconv_dense"; }

    // folds the stored (mu, D) into the weights: w_eff = D w, b_eff = b - mu D w
    std::pair<Matd, Vecd> fold_implicit() const;

    Matd w;
    Vecd b;
    Matd gw;
    Vecd gb;
    std::vector<GroupRange> groups;
    std::vector<WhiteningState> states;
    WhiteningConfig cfg;

    const Matd& whitened_cols() const { return xw_; }

private:
    Matd xw_;               // whitened input cache
    std::vector<Matd> ds_;  // per-group D used in the cached forward
};

// ---------------------------------------------------------------------------
// convolution layers

class Conv2dLayer : public Layer {
public:
    Conv2dLayer(const PatchSpec& spec, long c_out, RandomStream& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::vector<ParamSlot> params() override;
    std::string name() const override { return "conv"; }

    PatchSpec spec;
    long c_out;
    Matd w;  // (C_in k k) x C_out
    Vecd b;
    Matd gw;
    Vecd gb;

private:
    Matd xcols_;
    std::vector<long> in_shape_;
};

class DeconvConv2dLayer : public Layer {
public:
    DeconvConv2dLayer(const PatchSpec& spec, long c_out, const WhiteningConfig& cfg,
                      RandomStream& rng);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::vector<ParamSlot> params() override;
    std::string name() const override { return "deconv_conv"; }

    std::pair<Matd, Vecd> fold_implicit() const;
    // eval through the folded weights, for the implicit-path equivalence check
    Tensor forward_folded(const Tensor& x) const;

    PatchSpec spec;
    long c_out;
    Matd w;
    Vecd b;
    Matd gw;
    Vecd gb;
    std::vector<GroupRange> groups;
    std::vector<WhiteningState> states;
    WhiteningConfig cfg;

    // whitened column cache from the last train/diag forward, read by the
    // covariance identity diagnostic
    const Matd& whitened_cols() const { return xcols_; }

private:
    Matd xcols_;
    std::vector<Matd> ds_;
    std::vector<long> in_shape_;
};

// ---------------------------------------------------------------------------
// normalization baseline

class BatchNormLayer : public Layer {
public:
    // rank 2 input: per feature; rank 4: per channel over N,H,W
    explicit BatchNormLayer(long channels, double eps = 1e-5, double momentum = 0.1);
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::vector<ParamSlot> params() override;
    std::string name() const override { return "batchnorm"; }

    Vecd gamma, beta, ggamma, gbeta;
    Vecd running_mean, running_var;
    double eps;
    double momentum;

private:
    Matd xhat_;  // rows = samples contributing to each channel statistic
    Vecd var_;
};

// ---------------------------------------------------------------------------
// activations and pooling

class ReluLayer : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::string name() const override { return "relu"; }

private:
    std::vector<bool> mask_;
};

class SigmoidLayer : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::string name() const override { return "sigmoid"; }

private:
    std::vector<double> y_;
};

class MaxPool2Layer : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::string name() const override { return "maxpool2"; }

private:
    std::vector<long> in_shape_;
    std::vector<long> argmax_;
};

class FlattenLayer : public Layer {
public:
    Tensor forward(const Tensor& x, Mode mode) override;
    Tensor backward(const Tensor& grad_y) override;
    std::string name() const override { return "flatten"; }

private:
    std::vector<long> in_shape_;
};

// ---------------------------------------------------------------------------
// losses: return (loss, grad wrt first argument), 1/N normalized

std::pair<double, Matd> l2_loss(const Eigen::Ref<const Matd>& pred,
                                const Eigen::Ref<const Matd>& target);
std::pair<double, Matd> softmax_xent(const Eigen::Ref<const Matd>& logits,
                                     const std::vector<int>& labels);
std::pair<double, Matd> logistic_loss(const Eigen::Ref<const Matd>& scores,
                                      const Eigen::Ref<const Matd>& targets);

double accuracy(const Eigen::Ref<const Matd>& logits, const std::vector<int>& labels);

// He-style fan-in uniform init, the network default
Matd he_uniform(RandomStream& rng, long f_in, long f_out);

// layout helpers shared by layers and the experiment harnesses
Tensor rows_to_nchw(const Matd& y, long n, long ho, long wo);
Matd nchw_to_rows(const Tensor& t);

// ---------------------------------------------------------------------------
// network container

struct Network {
    std::vector<std::unique_ptr<Layer>> layers;

    Tensor forward(Tensor x, Mode mode) {
        for (auto& l : layers) x = l->forward(x, mode);
        return x;
    }
    Tensor backward(Tensor g) {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it)
            g = (*it)->backward(g);
        return g;
    }
    std::vector<ParamSlot> params() {
        std::vector<ParamSlot> out;
        for (auto& l : layers) {
            auto p = l->params();
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }
};

} // namespace netdeconv
