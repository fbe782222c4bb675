#include "netdeconv/layers.hpp"

#include <cmath>

#include "netdeconv/linalg.hpp"

namespace netdeconv {

namespace {

ConstMapMatd as_rows(const Tensor& t) {
    if (t.rank() != 2) throw contract_error("expected a rank-2 tensor");
    return t.map2d(t.shape[0], t.shape[1]);
}

ParamSlot wslot(Matd& v, Matd& g) { return {v.data(), g.data(), v.size(), true}; }
ParamSlot bslot(Vecd& v, Vecd& g) { return {v.data(), g.data(), v.size(), false}; }

// Whitens all columns of pm group by group. Train mode estimates statistics
// from the batch and moves the running averages; diag mode estimates but does
// not touch state; eval mode applies the stored statistics.
void whiten_groups(const PatchMatrix& pm, const std::vector<GroupRange>& groups,
                   std::vector<WhiteningState>& states, const WhiteningConfig& cfg,
                   Mode mode, const std::string& where, Matd& out,
                   std::vector<Matd>* used_ds) {
    out.resize(pm.data.rows(), pm.data.cols());
    if (used_ds) used_ds->assign(groups.size(), Matd());
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        auto& st = states[gi];
        Vecd mu;
        Matd d;
        const bool estimate =
            mode == Mode::diag || (mode == Mode::train && !st.frozen);
        if (estimate) {
            auto [m, cov] = covariance(pm, g, cfg.sample_stride, cfg.centered);
            try {
                d = coupled_newton_schulz(cov, cfg.eps, cfg.ns_iters);
            } catch (const numerical_error& e) {
                throw numerical_error(where + " group " + std::to_string(gi) + ": " +
                                          e.what(),
                                      e.step);
            }
            mu = std::move(m);
            if (cfg.track_residual) {
                Matd a = cov;
                a.diagonal().array() += cfg.eps;
                st.last_residual =
                    frobenius_norm(matmul(matmul(d, a), d) -
                                   Matd::Identity(d.rows(), d.cols()));
            }
            if (mode == Mode::train) {
                update_running(st, mu, d, cfg);
                // the freeze threshold may have replaced them just now
                mu = st.mu;
                d = st.d;
            }
        } else if (st.frozen) {
            mu = st.mu;
            d = st.d;
        } else {
            mu = st.running_mu;
            d = st.running_d;
        }
        Matd centered = pm.data.middleCols(g.col0, g.cols);
        if (cfg.centered) centered.rowwise() -= mu.transpose();
        out.middleCols(g.col0, g.cols) = matmul(centered, d);
        if (used_ds) (*used_ds)[gi] = std::move(d);
    }
}

void backprop_groups(Matd& gcols, const std::vector<GroupRange>& groups,
                     const std::vector<Matd>& ds) {
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        gcols.middleCols(g.col0, g.cols) =
            matmul(gcols.middleCols(g.col0, g.cols), ds[gi].transpose());
    }
}

std::pair<Matd, Vecd> fold_groups(const Matd& w, const Vecd& b,
                                  const std::vector<GroupRange>& groups,
                                  const std::vector<WhiteningState>& states,
                                  const WhiteningConfig& cfg) {
    Matd w_eff(w.rows(), w.cols());
    Vecd b_eff = b;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const auto& st = states[gi];
        if (!st.frozen && st.step == 0)
            throw contract_error("fold: no whitening statistics yet");
        const Matd& d = st.frozen ? st.d : st.running_d;
        const Vecd& mu = st.frozen ? st.mu : st.running_mu;
        w_eff.middleRows(g.col0, g.cols) = matmul(d, w.middleRows(g.col0, g.cols));
        if (cfg.centered)
            b_eff -= w_eff.middleRows(g.col0, g.cols).transpose() * mu;
    }
    return {std::move(w_eff), std::move(b_eff)};
}

} // namespace

Matd he_uniform(RandomStream& rng, long f_in, long f_out) {
    const double lim = std::sqrt(6.0 / double(f_in));
    Matd w(f_in, f_out);
    for (long i = 0; i < f_in; ++i)
        for (long j = 0; j < f_out; ++j) w(i, j) = (2.0 * rng.uniform() - 1.0) * lim;
    return w;
}

// rows ordered (n, i, j) -> NCHW tensor
Tensor rows_to_nchw(const Matd& y, long n, long ho, long wo) {
    Tensor out;
    const long c = y.cols();
    out.shape = {n, c, ho, wo};
    out.data.resize(size_t(n * c * ho * wo));
    for (long img = 0; img < n; ++img)
        for (long i = 0; i < ho; ++i)
            for (long j = 0; j < wo; ++j) {
                const long row = (img * ho + i) * wo + j;
                for (long ch = 0; ch < c; ++ch)
                    out.data[size_t(((img * c + ch) * ho + i) * wo + j)] = y(row, ch);
            }
    return out;
}

Matd nchw_to_rows(const Tensor& t) {
    if (t.rank() != 4) throw contract_error("expected a rank-4 tensor");
    const long n = t.shape[0], c = t.shape[1], h = t.shape[2], w = t.shape[3];
    Matd out(n * h * w, c);
    for (long img = 0; img < n; ++img)
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const long row = (img * h + i) * w + j;
                for (long ch = 0; ch < c; ++ch)
                    out(row, ch) = t.data[size_t(((img * c + ch) * h + i) * w + j)];
            }
    return out;
}

// ---------------------------------------------------------------------------
// DenseLayer

DenseLayer::DenseLayer(long f_in, long f_out, RandomStream& rng)
    : w(he_uniform(rng, f_in, f_out)),
      b(Vecd::Zero(f_out)),
      gw(Matd::Zero(f_in, f_out)),
      gb(Vecd::Zero(f_out)) {}

Tensor DenseLayer::forward(const Tensor& x, Mode) {
    ConstMapMatd xm = as_rows(x);
    if (xm.cols() != w.rows()) throw contract_error("dense: feature size mismatch");
    x_ = xm;
    Matd y = matmul(x_, w);
    y.rowwise() += b.transpose();
    return tensor_from(y);
}

Tensor DenseLayer::backward(const Tensor& grad_y) {
    if (x_.size() == 0) throw contract_error("dense: backward before forward");
    ConstMapMatd g = as_rows(grad_y);
    gw = matmul(x_.transpose(), g);
    gb = g.colwise().sum();
    return tensor_from(matmul(g, w.transpose()));
}

std::vector<ParamSlot> DenseLayer::params() { return {wslot(w, gw), bslot(b, gb)}; }

// ---------------------------------------------------------------------------
// DeconvDenseLayer

DeconvDenseLayer::DeconvDenseLayer(long f_in, long f_out, const WhiteningConfig& c,
                                   RandomStream& rng)
    : w(he_uniform(rng, f_in, f_out)),
      b(Vecd::Zero(f_out)),
      gw(Matd::Zero(f_in, f_out)),
      gb(Vecd::Zero(f_out)),
      cfg(c) {
    cfg.validate();
    PatchSpec unit{1, 1, 0, f_in};
    groups = partition_groups(unit, cfg.block_size);
    states.resize(groups.size());
    for (size_t i = 0; i < groups.size(); ++i) states[i].init(groups[i].cols);
}

Tensor DeconvDenseLayer::forward(const Tensor& x, Mode mode) {
    ConstMapMatd xm = as_rows(x);
    if (xm.cols() != w.rows())
        throw contract_error("deconv dense: feature size mismatch");
    PatchMatrix pm{xm, xm.rows(), 1, 1};
    const bool cache = mode != Mode::eval;
    if (!cache) ds_.clear();
    whiten_groups(pm, groups, states, cfg, mode, name(), xw_, cache ? &ds_ : nullptr);
    Matd y = matmul(xw_, w);
    y.rowwise() += b.transpose();
    return tensor_from(y);
}

Tensor DeconvDenseLayer::backward(const Tensor& grad_y) {
    if (ds_.empty()) throw contract_error("deconv dense: backward before train forward");
    ConstMapMatd g = as_rows(grad_y);
    gw = matmul(xw_.transpose(), g);
    gb = g.colwise().sum();
    Matd gx = matmul(g, w.transpose());
    backprop_groups(gx, groups, ds_);
    return tensor_from(gx);
}

std::vector<ParamSlot> DeconvDenseLayer::params() {
    return {wslot(w, gw), bslot(b, gb)};
}

std::pair<Matd, Vecd> DeconvDenseLayer::fold_implicit() const {
    return fold_groups(w, b, groups, states, cfg);
}

// ---------------------------------------------------------------------------
// Conv2dLayer

Conv2dLayer::Conv2dLayer(const PatchSpec& s, long co, RandomStream& rng)
    : spec(s),
      c_out(co),
      w(he_uniform(rng, s.cols(), co)),
      b(Vecd::Zero(co)),
      gw(Matd::Zero(s.cols(), co)),
      gb(Vecd::Zero(co)) {}

Tensor Conv2dLayer::forward(const Tensor& x, Mode) {
    in_shape_ = x.shape;
    PatchMatrix pm = im2col(x, spec);
    xcols_ = std::move(pm.data);
    Matd y = matmul(xcols_, w);
    y.rowwise() += b.transpose();
    return rows_to_nchw(y, pm.batch, pm.h_out, pm.w_out);
}

Tensor Conv2dLayer::backward(const Tensor& grad_y) {
    if (in_shape_.empty()) throw contract_error("conv: backward before forward");
    const long n = grad_y.shape[0], ho = grad_y.shape[2], wo = grad_y.shape[3];
    Matd g = nchw_to_rows(grad_y);
    gw = matmul(xcols_.transpose(), g);
    gb = g.colwise().sum();
    PatchMatrix gcols{matmul(g, w.transpose()), n, ho, wo};
    return col2im(gcols, spec, in_shape_);
}

std::vector<ParamSlot> Conv2dLayer::params() { return {wslot(w, gw), bslot(b, gb)}; }

// ---------------------------------------------------------------------------
// DeconvConv2dLayer

DeconvConv2dLayer::DeconvConv2dLayer(const PatchSpec& s, long co,
                                     const WhiteningConfig& c, RandomStream& rng)
    : spec(s),
      c_out(co),
      w(he_uniform(rng, s.cols(), co)),
      b(Vecd::Zero(co)),
      gw(Matd::Zero(s.cols(), co)),
      gb(Vecd::Zero(co)),
      cfg(c) {
    cfg.validate();
    groups = partition_groups(spec, cfg.block_size);
    states.resize(groups.size());
    for (size_t i = 0; i < groups.size(); ++i) states[i].init(groups[i].cols);
}

Tensor DeconvConv2dLayer::forward(const Tensor& x, Mode mode) {
    in_shape_ = x.shape;
    PatchMatrix pm = im2col(x, spec);
    const bool cache = mode != Mode::eval;
    if (!cache) ds_.clear();
    whiten_groups(pm, groups, states, cfg, mode, name(), xcols_,
                  cache ? &ds_ : nullptr);
    Matd y = matmul(xcols_, w);
    y.rowwise() += b.transpose();
    return rows_to_nchw(y, pm.batch, pm.h_out, pm.w_out);
}

Tensor DeconvConv2dLayer::backward(const Tensor& grad_y) {
    if (ds_.empty()) throw contract_error("deconv conv: backward before train forward");
    const long n = grad_y.shape[0], ho = grad_y.shape[2], wo = grad_y.shape[3];
    Matd g = nchw_to_rows(grad_y);
    gw = matmul(xcols_.transpose(), g);
    gb = g.colwise().sum();
    Matd gx = matmul(g, w.transpose());
    backprop_groups(gx, groups, ds_);
    PatchMatrix gcols{std::move(gx), n, ho, wo};
    return col2im(gcols, spec, in_shape_);
}

std::vector<ParamSlot> DeconvConv2dLayer::params() {
    return {wslot(w, gw), bslot(b, gb)};
}

std::pair<Matd, Vecd> DeconvConv2dLayer::fold_implicit() const {
    return fold_groups(w, b, groups, states, cfg);
}

Tensor DeconvConv2dLayer::forward_folded(const Tensor& x) const {
    auto [w_eff, b_eff] = fold_implicit();
    PatchMatrix pm = im2col(x, spec);
    Matd y = matmul(pm.data, w_eff);
    y.rowwise() += b_eff.transpose();
    return rows_to_nchw(y, pm.batch, pm.h_out, pm.w_out);
}

// ---------------------------------------------------------------------------
// BatchNormLayer

BatchNormLayer::BatchNormLayer(long channels, double e, double m)
    : gamma(Vecd::Ones(channels)),
      beta(Vecd::Zero(channels)),
      ggamma(Vecd::Zero(channels)),
      gbeta(Vecd::Zero(channels)),
      running_mean(Vecd::Zero(channels)),
      running_var(Vecd::Ones(channels)),
      eps(e),
      momentum(m) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
    Matd rows = x.rank() == 4 ? nchw_to_rows(x) : Matd(as_rows(x));
    if (rows.cols() != gamma.size()) throw contract_error("batchnorm: channel mismatch");
    Matd y;
    if (mode == Mode::eval) {
        xhat_.resize(0, 0);
        y = (rows.rowwise() - running_mean.transpose()).array().rowwise() *
            (gamma.array() / (running_var.array() + eps).sqrt()).transpose();
    } else {
        if (x.shape[0] < 2)
            throw contract_error("batchnorm: variance degenerate for batch of 1");
        Vecd mu = rows.colwise().mean();
        Matd c = rows.rowwise() - mu.transpose();
        Vecd var = c.array().square().colwise().mean();
        if (mode == Mode::train) {
            running_mean = (1.0 - momentum) * running_mean + momentum * mu;
            running_var = (1.0 - momentum) * running_var + momentum * var;
        }
        xhat_ = c.array().rowwise() / (var.array() + eps).sqrt().transpose();
        var_ = var;
        y = xhat_.array().rowwise() * gamma.array().transpose();
    }
    y.rowwise() += beta.transpose();
    if (x.rank() == 4) return rows_to_nchw(y, x.shape[0], x.shape[2], x.shape[3]);
    return tensor_from(y);
}

Tensor BatchNormLayer::backward(const Tensor& grad_y) {
    if (xhat_.size() == 0)
        throw contract_error("batchnorm: backward before train forward");
    Matd g = grad_y.rank() == 4 ? nchw_to_rows(grad_y) : Matd(as_rows(grad_y));
    ggamma = (g.array() * xhat_.array()).colwise().sum();
    gbeta = g.colwise().sum();
    Matd gxh = g.array().rowwise() * gamma.array().transpose();
    Vecd inv_sd = (var_.array() + eps).rsqrt();
    Vecd mean_gxh = gxh.colwise().mean();
    Vecd mean_gxh_xh = (gxh.array() * xhat_.array()).colwise().mean();
    Matd gx = ((gxh.rowwise() - mean_gxh.transpose()).array() -
               xhat_.array().rowwise() * mean_gxh_xh.array().transpose())
                  .rowwise() *
              inv_sd.array().transpose();
    if (grad_y.rank() == 4)
        return rows_to_nchw(gx, grad_y.shape[0], grad_y.shape[2], grad_y.shape[3]);
    return tensor_from(gx);
}

std::vector<ParamSlot> BatchNormLayer::params() {
    return {bslot(gamma, ggamma), bslot(beta, gbeta)};
}

// ---------------------------------------------------------------------------
// activations and pooling

Tensor ReluLayer::forward(const Tensor& x, Mode) {
    Tensor y = x;
    mask_.assign(y.data.size(), false);
    for (size_t i = 0; i < y.data.size(); ++i) {
        if (y.data[i] > 0)
            mask_[i] = true;
        else
            y.data[i] = 0;
    }
    return y;
}

Tensor ReluLayer::backward(const Tensor& grad_y) {
    if (mask_.size() != grad_y.data.size())
        throw contract_error("relu: backward shape mismatch");
    Tensor g = grad_y;
    for (size_t i = 0; i < g.data.size(); ++i)
        if (!mask_[i]) g.data[i] = 0;
    return g;
}

Tensor SigmoidLayer::forward(const Tensor& x, Mode) {
    Tensor y = x;
    for (auto& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
    y_.assign(y.data.begin(), y.data.end());
    return y;
}

Tensor SigmoidLayer::backward(const Tensor& grad_y) {
    if (y_.size() != grad_y.data.size())
        throw contract_error("sigmoid: backward shape mismatch");
    Tensor g = grad_y;
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] *= y_[i] * (1.0 - y_[i]);
    return g;
}

Tensor MaxPool2Layer::forward(const Tensor& x, Mode) {
    if (x.rank() != 4 || x.shape[2] % 2 || x.shape[3] % 2)
        throw contract_error("maxpool2 needs rank 4 with even spatial dims");
    in_shape_ = x.shape;
    const long n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor y;
    y.shape = {n, c, h / 2, w / 2};
    y.data.resize(size_t(n * c * (h / 2) * (w / 2)));
    argmax_.resize(y.data.size());
    size_t o = 0;
    for (long img = 0; img < n; ++img)
        for (long ch = 0; ch < c; ++ch)
            for (long i = 0; i < h; i += 2)
                for (long j = 0; j < w; j += 2) {
                    long best = ((img * c + ch) * h + i) * w + j;
                    double bv = x.data[size_t(best)];
                    for (long di = 0; di < 2; ++di)
                        for (long dj = 0; dj < 2; ++dj) {
                            const long idx = ((img * c + ch) * h + i + di) * w + j + dj;
                            if (x.data[size_t(idx)] > bv) {
                                bv = x.data[size_t(idx)];
                                best = idx;
                            }
                        }
                    y.data[o] = bv;
                    argmax_[long(o)] = best;
                    ++o;
                }
    return y;
}

Tensor MaxPool2Layer::backward(const Tensor& grad_y) {
    if (argmax_.size() != grad_y.data.size())
        throw contract_error("maxpool2: backward shape mismatch");
    Tensor g;
    g.shape = in_shape_;
    g.data.assign(size_t(Tensor::count(g.shape)), 0.0);
    for (size_t i = 0; i < grad_y.data.size(); ++i)
        g.data[size_t(argmax_[long(i)])] += grad_y.data[i];
    return g;
}

Tensor FlattenLayer::forward(const Tensor& x, Mode) {
    in_shape_ = x.shape;
    Tensor y = x;
    y.shape = {x.shape[0], x.size() / x.shape[0]};
    return y;
}

Tensor FlattenLayer::backward(const Tensor& grad_y) {
    Tensor g = grad_y;
    g.shape = in_shape_;
    return g;
}

// ---------------------------------------------------------------------------
// losses

std::pair<double, Matd> l2_loss(const Eigen::Ref<const Matd>& pred,
                                const Eigen::Ref<const Matd>& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw contract_error("l2 loss: shape mismatch");
    const double n = double(pred.rows());
    Matd diff = pred - target;
    const double loss = 0.5 * diff.squaredNorm() / n;
    return {loss, diff / n};
}

std::pair<double, Matd> softmax_xent(const Eigen::Ref<const Matd>& logits,
                                     const std::vector<int>& labels) {
    const long n = logits.rows(), k = logits.cols();
    if (long(labels.size()) != n) throw contract_error("xent: label count mismatch");
    Matd p(n, k);
    double loss = 0;
    for (long i = 0; i < n; ++i) {
        if (labels[size_t(i)] < 0 || labels[size_t(i)] >= k)
            throw contract_error("xent: label out of range");
        const double m = logits.row(i).maxCoeff();
        Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
        p.row(i) = e / e.sum();
        loss -= std::log(std::max(p(i, labels[size_t(i)]), 1e-300));
    }
    loss /= double(n);
    for (long i = 0; i < n; ++i) p(i, labels[size_t(i)]) -= 1.0;
    return {loss, p / double(n)};
}

std::pair<double, Matd> logistic_loss(const Eigen::Ref<const Matd>& scores,
                                      const Eigen::Ref<const Matd>& targets) {
    if (scores.rows() != targets.rows() || scores.cols() != targets.cols())
        throw contract_error("logistic loss: shape mismatch");
    const double n = double(scores.rows());
    double loss = 0;
    Matd g(scores.rows(), scores.cols());
    for (long i = 0; i < scores.rows(); ++i)
        for (long j = 0; j < scores.cols(); ++j) {
            const double a = -targets(i, j) * scores(i, j);
            // softplus(a) = log(1 + e^a), stable in both tails
            loss += a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
            g(i, j) = -targets(i, j) / (1.0 + std::exp(-a)) / n;
        }
    return {loss / n, std::move(g)};
}

double accuracy(const Eigen::Ref<const Matd>& logits, const std::vector<int>& labels) {
    if (long(labels.size()) != logits.rows())
        throw contract_error("accuracy: label count mismatch");
    long correct = 0;
    for (long i = 0; i < logits.rows(); ++i) {
        long arg = 0;
        logits.row(i).maxCoeff(&arg);
        if (int(arg) == labels[size_t(i)]) ++correct;
    }
    return double(correct) / double(logits.rows());
}

} // namespace netdeconv
