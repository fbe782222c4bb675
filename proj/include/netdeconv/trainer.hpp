#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "netdeconv/layers.hpp"

namespace netdeconv {

enum class Schedule { constant, cosine };

struct TrainConfig {
    double lr = 0.1;
    double weight_decay = 1e-3;
    long batch_size = 128;
    long epochs = 1;
    Schedule schedule = Schedule::constant;
    uint64_t seed = 1;
    long eval_batch = 100;
    // batch statistics for metric passes; running statistics otherwise
    bool metric_batch_stats = true;
    WhiteningConfig whitening;
    std::map<int, WhiteningConfig> layer_whitening;

    void validate() const {
        if (lr < 0 || batch_size < 1 || epochs < 0 || eval_batch < 1)
            throw contract_error("train config out of range");
    }
    WhiteningConfig whitening_for(int layer) const {
        auto it = layer_whitening.find(layer);
        return it == layer_whitening.end() ? whitening : it->second;
    }
};

struct RunRow {
    long step;
    long epoch;
    std::string split;  // train | eval
    double loss;
    double acc;
    double wall_ms;
    std::vector<double> layer_diag;
};

struct RunRecord {
    std::vector<std::string> diag_names;
    std::vector<RunRow> rows;

    std::string csv_header() const;
    std::string csv_row(const RunRow& r) const;
};

// p <- p - lr (g + weight_decay p); decay applies only to slots marked decay
void sgd_step(const std::vector<ParamSlot>& params, double lr, double weight_decay);

double cosine_lr(double base, long step, long total_steps);

// Normal-equation solution of min 0.5/N ||X w - y||^2 through the
// eigendecomposition, with optional ridge added to (1/N) X^T X.
Matd closed_form_l2(const Eigen::Ref<const Matd>& x, const Eigen::Ref<const Matd>& y,
                    double eps = 0.0);

struct OneStepOptions {
    bool use_ns = false;  // oracle inverse root unless set
    double eps = 0.0;
    int ns_iters = 15;
};

struct OneStepReport {
    double loss_one_step;
    double loss_optimal;
    double relative_gap;
    bool ridged;
};

// Whitens X, takes one full-batch GD step at lr 1 from w = 0, and compares
// the resulting loss with the closed-form optimum.
OneStepReport one_step_convergence_check(const Eigen::Ref<const Matd>& x,
                                         const Eigen::Ref<const Matd>& y,
                                         const OneStepOptions& opt = {});

struct ClassificationData {
    Tensor images;            // [N,...] first dim indexes samples
    std::vector<int> labels;
};

Tensor gather_first_dim(const Tensor& t, const std::vector<long>& idx);

// SGD classification loop: seeded shuffle, softmax cross-entropy, metrics per
// step, eval at each epoch end. Optional CSV sink streams rows as they are
// produced (flushed every row).
RunRecord fit(Network& net, const ClassificationData& train,
              const ClassificationData& test, const TrainConfig& cfg,
              std::ostream* csv_sink = nullptr);

} // namespace netdeconv
