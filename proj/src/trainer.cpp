#include "netdeconv/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>

#include "netdeconv/linalg.hpp"

namespace netdeconv {

namespace {

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

double now_ms() {
    using namespace std::chrono;
    return double(duration_cast<microseconds>(steady_clock::now().time_since_epoch())
                      .count()) /
           1000.0;
}

} // namespace

std::string RunRecord::csv_header() const {
    std::string h = "step,epoch,split,loss,acc,wall_ms";
    for (const auto& n : diag_names) h += "," + n;
    return h;
}

std::string RunRecord::csv_row(const RunRow& r) const {
    std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," +
                    r.split + "," + fmt(r.loss) + "," + fmt(r.acc) + "," +
                    fmt(r.wall_ms);
    for (size_t i = 0; i < diag_names.size(); ++i)
        s += "," + (i < r.layer_diag.size() ? fmt(r.layer_diag[i]) : std::string("nan"));
    return s;
}

void sgd_step(const std::vector<ParamSlot>& params, double lr, double weight_decay) {
    for (const auto& p : params) {
        Eigen::Map<Eigen::VectorXd> v(p.value, p.n);
        Eigen::Map<const Eigen::VectorXd> g(p.grad, p.n);
        if (p.decay && weight_decay != 0.0)
            v -= lr * (g + weight_decay * v);
        else
            v -= lr * g;
    }
}

double cosine_lr(double base, long step, long total_steps) {
    if (total_steps <= 0) return base;
    const double t = double(step) / double(total_steps);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

Matd closed_form_l2(const Eigen::Ref<const Matd>& x, const Eigen::Ref<const Matd>& y,
                    double eps) {
    if (x.rows() != y.rows()) throw contract_error("closed form: row mismatch");
    const double n = double(x.rows());
    Matd cov = matmul(x.transpose(), x) / n;
    cov = ((cov + cov.transpose()) * 0.5).eval();
    cov.diagonal().array() += eps;
    EigResult eig = sym_eig(cov);
    const double lmax = eig.values.cwiseAbs().maxCoeff();
    if (eig.values.minCoeff() <= 1e-12 * lmax)
        throw numerical_error("singular normal equations, ridge required", 0);
    Matd rhs = matmul(x.transpose(), y) / n;
    Matd tmp = matmul(eig.vectors.transpose(), rhs);
    tmp.array().colwise() /= eig.values.array();
    return matmul(eig.vectors, tmp);
}

OneStepReport one_step_convergence_check(const Eigen::Ref<const Matd>& x,
                                         const Eigen::Ref<const Matd>& y,
                                         const OneStepOptions& opt) {
    const double n = double(x.rows());
    Matd cov = matmul(x.transpose(), x) / n;
    cov = ((cov + cov.transpose()) * 0.5).eval();
    EigResult eig = sym_eig(cov);
    const double lmax = eig.values.cwiseAbs().maxCoeff();
    OneStepReport rep{};
    rep.ridged = eig.values.minCoeff() <= 1e-12 * lmax;
    const double ridge = rep.ridged ? 1e-8 * lmax : 0.0;

    Matd d = opt.use_ns ? coupled_newton_schulz(cov, opt.eps + ridge, opt.ns_iters)
                        : inverse_sqrt_oracle(cov, opt.eps + ridge);
    Matd xw = matmul(x, d);
    Matd w1 = matmul(xw.transpose(), y) / n;
    rep.loss_one_step = l2_loss(matmul(xw, w1), y).first;

    Matd wstar = closed_form_l2(x, y, ridge);
    rep.loss_optimal = l2_loss(matmul(x, wstar), y).first;
    rep.relative_gap = (rep.loss_one_step - rep.loss_optimal) /
                       std::max(rep.loss_optimal, 1e-300);
    return rep;
}

Tensor gather_first_dim(const Tensor& t, const std::vector<long>& idx) {
    if (t.rank() < 1) throw contract_error("gather: rank-0 tensor");
    const long n = t.shape[0];
    const long stride = t.size() / n;
    Tensor out;
    out.shape = t.shape;
    out.shape[0] = long(idx.size());
    out.data.resize(size_t(stride) * idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n) throw contract_error("gather: index out of range");
        std::copy(t.data.begin() + idx[i] * stride,
                  t.data.begin() + (idx[i] + 1) * stride,
                  out.data.begin() + long(i) * stride);
    }
    return out;
}

namespace {

struct DiagSource {
    std::string label;
    const std::vector<WhiteningState>* states;
};

std::vector<DiagSource> diag_sources(Network& net) {
    std::vector<DiagSource> out;
    int i = 0;
    for (auto& l : net.layers) {
        if (auto* dc = dynamic_cast<DeconvConv2dLayer*>(l.get()))
            out.push_back({"layer" + std::to_string(i) + "_residual", &dc->states});
        else if (auto* dd = dynamic_cast<DeconvDenseLayer*>(l.get()))
            out.push_back({"layer" + std::to_string(i) + "_residual", &dd->states});
        ++i;
    }
    return out;
}

std::vector<double> read_diags(const std::vector<DiagSource>& srcs) {
    std::vector<double> out;
    out.reserve(srcs.size());
    for (const auto& s : srcs) {
        double sum = 0;
        for (const auto& st : *s.states) sum += st.last_residual;
        out.push_back(s.states->empty() ? -1.0 : sum / double(s.states->size()));
    }
    return out;
}

std::pair<double, double> evaluate(Network& net, const ClassificationData& data,
                                   long chunk, Mode mode) {
    double loss_sum = 0;
    long correct = 0;
    const long n = data.images.shape[0];
    for (long s = 0; s < n; s += chunk) {
        const long m = std::min(chunk, n - s);
        std::vector<long> idx(static_cast<size_t>(m));
        for (long i = 0; i < m; ++i) idx[size_t(i)] = s + i;
        Tensor xb = gather_first_dim(data.images, idx);
        std::vector<int> yb(data.labels.begin() + s, data.labels.begin() + s + m);
        Tensor logits = net.forward(std::move(xb), mode);
        auto [loss, g] = softmax_xent(logits.map2d(), yb);
        loss_sum += loss * double(m);
        correct += long(std::lround(accuracy(logits.map2d(), yb) * double(m)));
    }
    return {loss_sum / double(n), double(correct) / double(n)};
}

} // namespace

RunRecord fit(Network& net, const ClassificationData& train,
              const ClassificationData& test, const TrainConfig& cfg,
              std::ostream* csv_sink) {
    cfg.validate();
    if (train.images.shape[0] != long(train.labels.size()))
        throw contract_error("fit: train labels do not match images");
    if (test.images.shape[0] != long(test.labels.size()))
        throw contract_error("fit: test labels do not match images");

    RunRecord rec;
    auto srcs = diag_sources(net);
    for (const auto& s : srcs) rec.diag_names.push_back(s.label);
    if (csv_sink) {
        *csv_sink << rec.csv_header() << "\n";
        csv_sink->flush();
    }
    auto emit = [&](RunRow row) {
        if (csv_sink) {
            *csv_sink << rec.csv_row(row) << "\n";
            csv_sink->flush();
        }
        rec.rows.push_back(std::move(row));
    };

    RandomStream rng = seeded_rng(cfg.seed);
    const long n = train.images.shape[0];
    const long steps_per_epoch = n / cfg.batch_size;
    const long total_steps = steps_per_epoch * cfg.epochs;
    const Mode metric_mode = cfg.metric_batch_stats ? Mode::diag : Mode::eval;

    std::vector<long> order(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) order[size_t(i)] = i;

    long step = 0;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (long s = 0; s + cfg.batch_size <= n; s += cfg.batch_size) {
            const double t0 = now_ms();
            std::vector<long> idx(order.begin() + s, order.begin() + s + cfg.batch_size);
            Tensor xb = gather_first_dim(train.images, idx);
            std::vector<int> yb(size_t(cfg.batch_size));
            for (long i = 0; i < cfg.batch_size; ++i)
                yb[size_t(i)] = train.labels[size_t(idx[size_t(i)])];

            Tensor logits = net.forward(std::move(xb), Mode::train);
            auto [loss, grad] = softmax_xent(logits.map2d(), yb);
            const double acc = accuracy(logits.map2d(), yb);
            if (!std::isfinite(loss)) {
                emit({step, epoch, "train", loss, acc, now_ms() - t0, read_diags(srcs)});
                throw numerical_error("loss is not finite", int(step));
            }
            net.backward(tensor_from(grad));
            const double lr = cfg.schedule == Schedule::cosine
                                  ? cosine_lr(cfg.lr, step, total_steps)
                                  : cfg.lr;
            sgd_step(net.params(), lr, cfg.weight_decay);
            ++step;
            emit({step, epoch, "train", loss, acc, now_ms() - t0, read_diags(srcs)});
        }
        const double t0 = now_ms();
        auto [eloss, eacc] = evaluate(net, test, cfg.eval_batch, metric_mode);
        emit({step, epoch, "eval", eloss, eacc, now_ms() - t0, {}});
    }
    return rec;
}

} // namespace netdeconv
