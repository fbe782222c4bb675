#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "netdeconv/experiments.hpp"
#include "netdeconv/linalg.hpp"
#include "netdeconv/whitening.hpp"

using namespace netdeconv;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// reporting: exactly one pass/fail line per criterion

void report(int n, const std::string& what, bool ok) {
    std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", n, what.c_str());
    std::fflush(stdout);
    CHECK_MESSAGE(ok, "criterion " << n << ": " << what);
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// CLI plumbing

const std::string& bin_path() {
    static const std::string p = [] {
        const char* env = std::getenv("NETDECONV_BIN");
        return env ? std::string(env) : std::string("./netdeconv");
    }();
    return p;
}

const fs::path& scratch_root() {
    static const fs::path p = [] {
        fs::path r = fs::temp_directory_path() / "netdeconv_acceptance";
        fs::remove_all(r);
        fs::create_directories(r);
        return r;
    }();
    return p;
}

int run_cli(const std::string& args) {
    static int counter = 0;
    fs::path log = scratch_root() / ("log_" + std::to_string(counter++) + ".txt");
    std::string cmd =
        "\"" + bin_path() + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

const fs::path& data_dir() {
    static const fs::path d = [] {
        fs::path p = scratch_root() / "data";
        if (run_cli("gen-data --data-dir \"" + p.string() + "\" --out \"" +
                    (scratch_root() / "gen_out").string() + "\"") != 0)
            throw std::runtime_error("gen-data failed");
        return p;
    }();
    return d;
}

std::vector<std::vector<std::string>> csv_cells(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("missing file " + p.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

double cell_value(const std::vector<std::vector<std::string>>& rows,
                  const std::string& col, size_t row) {
    for (size_t i = 0; i < rows.at(0).size(); ++i)
        if (rows[0][i] == col) return std::stod(rows.at(row + 1).at(i));
    throw std::runtime_error("no column " + col);
}

double wall_s(const std::function<void()>& f) {
    auto t0 = std::chrono::steady_clock::now();
    f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

// ---------------------------------------------------------------------------
// shared data helpers

Matd random_mat(long r, long c, uint64_t seed) {
    RandomStream rng(seed);
    Matd m(r, c);
    rng.fill_gaussian(m.data(), m.size());
    return m;
}

Dataset natural_corpus() {
    return load_cifar10((data_dir() / "natural" / "natural.bin").string(),
                        "natural");
}

// central finite differences against the analytic gradient already stored in
// `grads`; `loss` must re-run the forward pass off the current parameter values
double fd_rel_err(const std::function<double()>& loss, double* values,
                  const double* grads, long n, long max_probes = 0) {
    const long stride = (max_probes > 0 && n > max_probes) ? n / max_probes : 1;
    double num2 = 0, gfd2 = 0, gan2 = 0;
    for (long i = 0; i < n; i += stride) {
        const double v0 = values[i];
        const double h = 1e-4 * std::max(1.0, std::abs(v0));
        values[i] = v0 + h;
        const double lp = loss();
        values[i] = v0 - h;
        const double lm = loss();
        values[i] = v0;
        const double gfd = (lp - lm) / (2 * h);
        num2 += (gfd - grads[i]) * (gfd - grads[i]);
        gfd2 += gfd * gfd;
        gan2 += grads[i] * grads[i];
    }
    const double scale = std::max({std::sqrt(gfd2), std::sqrt(gan2), 1e-12});
    return std::sqrt(num2) / scale;
}

Tensor random_tensor(const std::vector<long>& shape, uint64_t seed) {
    Tensor t(shape);
    RandomStream rng(seed);
    rng.fill_gaussian(t.data.data(), t.size());
    return t;
}

} // namespace

// ---------------------------------------------------------------------------

TEST_CASE("criterion 1: one-step convergence") {
    Matd xs = random_mat(1000, 20, 11);
    Matd ys = random_mat(1000, 3, 12);
    OneStepReport syn = one_step_convergence_check(xs, ys);

    Dataset tr = load_idx((data_dir() / "fashion" / "train-images-idx3-ubyte").string(),
                          (data_dir() / "fashion" / "train-labels-idx1-ubyte").string(),
                          "train");
    const long n = tr.images.dim(0);
    Matd x = tr.images.map2d(n, tr.images.size() / n);
    Matd xc = x.rowwise() - x.colwise().mean();
    Matd y(n, 1);
    for (long i = 0; i < n; ++i) y(i, 0) = tr.labels[size_t(i)] < 5 ? 1.0 : -1.0;

    OneStepOptions opt;
    opt.use_ns = true;
    opt.ns_iters = 15;
    opt.eps = 1e-5;
    OneStepReport fash = one_step_convergence_check(xc, y, opt);

    const bool ok = std::abs(syn.relative_gap) < 1e-10 &&
                    std::abs(fash.relative_gap) < 1e-3 && !syn.ridged;
    report(1,
           "one full-batch step at lr 1 is optimal (synthetic gap " +
               num(syn.relative_gap) + " < 1e-10, fashion gap " +
               num(fash.relative_gap) + " < 1e-3)",
           ok);
}

TEST_CASE("criterion 2: whitening identity inside the cnn") {
    ExperimentConfig ec = cnn_defaults(1);
    ec.train.whitening.ns_iters = 15;
    ec.train.layer_whitening.clear();
    WhiteningConfig head = ec.train.whitening;
    head.block_size = 32;
    ec.train.layer_whitening[4] = head;

    Network net = build_cnn("deconv", 1, ec.train);
    Dataset cif = load_cifar10((data_dir() / "cifar" / "data_batch_1.bin").string(),
                               "train");
    std::vector<long> idx(64);
    for (long i = 0; i < 64; ++i) idx[size_t(i)] = i;
    Tensor batch = gather_first_dim(cif.images, idx);
    net.forward(std::move(batch), Mode::diag);

    // spatial extent of each deconv layer input, in network order
    const std::vector<long> hw = {32, 16, 8, 8, 1};
    size_t li = 0;
    double worst_lo = 1.0, worst_hi = 1.0, worst_off = 0.0;
    for (auto& l : net.layers) {
        const Matd* cols = nullptr;
        const std::vector<GroupRange>* groups = nullptr;
        const WhiteningConfig* wc = nullptr;
        if (auto* dc = dynamic_cast<DeconvConv2dLayer*>(l.get())) {
            cols = &dc->whitened_cols();
            groups = &dc->groups;
            wc = &dc->cfg;
        } else if (auto* dd = dynamic_cast<DeconvDenseLayer*>(l.get())) {
            cols = &dd->whitened_cols();
            groups = &dd->groups;
            wc = &dd->cfg;
        } else {
            continue;
        }
        REQUIRE(li < hw.size());
        PatchMatrix pmw{*cols, 64, hw[li], hw[li]};
        for (const GroupRange& g : *groups) {
            auto [mu, cov] = covariance(pmw, g, wc->sample_stride, wc->centered);
            (void)mu;
            const long f = cov.rows();
            worst_lo = std::min(worst_lo, cov.diagonal().minCoeff());
            worst_hi = std::max(worst_hi, cov.diagonal().maxCoeff());
            const double off =
                (cov.cwiseAbs().sum() - cov.diagonal().cwiseAbs().sum()) /
                double(f * f - f);
            worst_off = std::max(worst_off, off);
        }
        ++li;
    }
    REQUIRE(li == hw.size());
    const bool ok = worst_lo >= 0.9 && worst_hi <= 1.1 && worst_off < 1e-2;
    report(2,
           "first-batch whitened covariance is the identity in every deconv "
           "layer (diag range [" +
               num(worst_lo) + ", " + num(worst_hi) + "] in [0.9, 1.1], worst "
               "off-diagonal mean " +
               num(worst_off) + " < 1e-2)",
           ok);
}

TEST_CASE("criterion 3: newton-schulz stability on the natural covariance") {
    Dataset nat = natural_corpus();
    Tensor one = sample_patch_batch(nat, 1, 1);
    PatchSpec spec;
    spec.kernel = 3;
    spec.channels_in = one.dim(1);
    PatchMatrix pm = im2col(one, spec);
    auto [mu, cov] = covariance(pm, 1, true);
    (void)mu;
    const long nc = cov.rows();
    REQUIRE(nc == 27);
    const Matd eye = Matd::Identity(nc, nc);

    const int iters = 1000;
    std::vector<double> res(size_t(iters) + 1);
    NsObserver obs = [&](int k, const Matd& dk) {
        res[size_t(k)] = (dk * dk * cov - eye).norm();
    };
    coupled_newton_schulz(cov, 1e-5, iters, obs);
    size_t kmin = 0;
    for (size_t k = 1; k < res.size(); ++k)
        if (res[k] < res[kmin]) kmin = k;
    double post_max = 0;
    for (size_t k = kmin; k < res.size(); ++k) post_max = std::max(post_max, res[k]);
    const double coupled_ratio = post_max / res[kmin];

    VanillaResult van = vanilla_newton_schulz(cov, 1e-5, iters);
    double vmin = INFINITY;
    for (double r : van.residual_trace)
        if (std::isfinite(r)) vmin = std::min(vmin, r);
    bool vanilla_explodes = false;
    for (size_t k = 0; k < van.residual_trace.size() && k < 100; ++k)
        if (van.residual_trace[k] > 1e3 * vmin) vanilla_explodes = true;

    EigResult eg = sym_eig(cov);
    const double eps_match = 0.01 * eg.values(eg.values.size() - 1);
    Matd oracle = inverse_sqrt_oracle(cov, eps_match);
    Matd dc = coupled_newton_schulz(cov, eps_match, 20);
    VanillaResult v20 = vanilla_newton_schulz(cov, eps_match, 20);
    const double rc = (dc - oracle).norm() / oracle.norm();
    const double rv = (v20.d - oracle).norm() / oracle.norm();

    const bool ok =
        coupled_ratio <= 2.0 && vanilla_explodes && rc < 1e-4 && rv < 1e-4;
    report(3,
           "coupled iteration holds its floor (post-minimum ratio " +
               num(coupled_ratio) + " <= 2 over 1000 iters), vanilla exceeds "
               "1e3x its minimum before step 100, both match the oracle at 20 "
               "(relerr " +
               num(rc) + ", " + num(rv) + " < 1e-4)",
           ok);
}

TEST_CASE("criterion 4: deconvolution identity on natural crops") {
    Dataset nat = natural_corpus();
    Tensor crops = sample_patch_batch(nat, 10, 7);
    const long c = crops.dim(1), h = crops.dim(2), w = crops.dim(3);
    PatchSpec spec;
    spec.kernel = 3;
    spec.channels_in = c;

    double worst = 0;
    for (long i = 0; i < 10; ++i) {
        Tensor one({1, c, h, w});
        std::copy_n(crops.data.begin() + i * c * h * w, c * h * w, one.data.begin());
        PatchMatrix pm = im2col(one, spec);
        Matd cov = covariance(pm, 1, false).second;
        Matd d = inverse_sqrt_oracle(cov, 0.0);
        Matd s = sqrt_oracle(cov, 0.0);
        for (long ch = 0; ch < c; ++ch) {
            const long tap = ch * 9 + 4;  // center of the 3x3 window
            Vecd delta = Vecd::Zero(pm.cols());
            delta(tap) = 1.0;
            Vecd recon = pm.data * (d * (s * delta));
            Vecd want = pm.data.col(tap);
            worst = std::max(worst, (recon - want).norm() / want.norm());
        }
    }
    report(4,
           "X inv-sqrt(Cov) sqrt(Cov) delta reproduces the interior pixels on "
           "10 crops (worst relative error " +
               num(worst) + " < 1e-6)",
           worst < 1e-6);
}

TEST_CASE("criterion 5: whitened step equals the covariance-corrected step") {
    const long n = 500, f = 12;
    Matd x = random_mat(n, f, 21) * random_mat(f, f, 22);
    Matd y = random_mat(n, 2, 23);
    Matd cov = x.transpose() * x / double(n);
    cov = 0.5 * (cov + Matd(cov.transpose()));
    Matd d = inverse_sqrt_oracle(cov, 0.0);

    const double lr = 0.7;
    Matd xw = x * d;
    Matd w_white = lr * xw.transpose() * y / double(n);  // step from w = 0
    Matd back_in_raw = d * w_white;

    EigResult eg = sym_eig(cov);
    Matd covinv =
        eg.vectors * eg.values.cwiseInverse().asDiagonal() * eg.vectors.transpose();
    Matd w_corr = lr * covinv * (x.transpose() * y) / double(n);

    const double rel = (back_in_raw - w_corr).norm() / w_corr.norm();
    const double l_white = l2_loss(x * back_in_raw, y).first;
    const double l_corr = l2_loss(x * w_corr, y).first;
    const double loss_rel = std::abs(l_white - l_corr) / l_corr;

    const bool ok = rel < 1e-8 && loss_rel < 1e-8;
    report(5,
           "one SGD step in whitened coordinates equals the Cov^-1-corrected "
           "raw step (weight relerr " +
               num(rel) + ", loss relerr " + num(loss_rel) + " < 1e-8)",
           ok);
}

TEST_CASE("criterion 6: analytic gradients match finite differences") {
    double worst = 0;
    auto track = [&](double e) { worst = std::max(worst, e); };

    {  // dense: w, b, x
        RandomStream rng(31);
        DenseLayer l(6, 4, rng);
        Tensor x = random_tensor({5, 6}, 32);
        auto loss = [&] {
            Tensor y = l.forward(x, Mode::train);
            return 0.5 * y.map2d().squaredNorm();
        };
        Tensor y = l.forward(x, Mode::train);
        Tensor gx = l.backward(y);
        track(fd_rel_err(loss, l.w.data(), l.gw.data(), l.w.size()));
        track(fd_rel_err(loss, l.b.data(), l.gb.data(), l.b.size()));
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size()));
    }
    {  // sigmoid
        SigmoidLayer l;
        Tensor x = random_tensor({4, 7}, 33);
        auto loss = [&] { return 0.5 * l.forward(x, Mode::train).map2d().squaredNorm(); };
        Tensor y = l.forward(x, Mode::train);
        Tensor gx = l.backward(y);
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size()));
    }
    {  // relu, inputs pushed away from the kink
        ReluLayer l;
        Tensor x = random_tensor({4, 7}, 34);
        for (double& v : x.data) v += (v >= 0 ? 0.2 : -0.2);
        auto loss = [&] { return 0.5 * l.forward(x, Mode::train).map2d().squaredNorm(); };
        Tensor y = l.forward(x, Mode::train);
        Tensor gx = l.backward(y);
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size()));
    }
    {  // maxpool
        MaxPool2Layer l;
        Tensor x = random_tensor({2, 2, 4, 4}, 35);
        auto loss = [&] {
            Tensor y = l.forward(x, Mode::train);
            return 0.5 * y.map2d(y.dim(0), y.size() / y.dim(0)).squaredNorm();
        };
        Tensor y = l.forward(x, Mode::train);
        Tensor gy = y;
        Tensor gx = l.backward(gy);
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size()));
    }
    {  // conv: w, b, x
        RandomStream rng(36);
        PatchSpec spec;
        spec.kernel = 3;
        spec.padding = 1;
        spec.channels_in = 2;
        Conv2dLayer l(spec, 3, rng);
        Tensor x = random_tensor({2, 2, 5, 5}, 37);
        auto loss = [&] {
            Tensor y = l.forward(x, Mode::train);
            return 0.5 * y.map2d(y.dim(0), y.size() / y.dim(0)).squaredNorm();
        };
        Tensor y = l.forward(x, Mode::train);
        Tensor gx = l.backward(y);
        track(fd_rel_err(loss, l.w.data(), l.gw.data(), l.w.size()));
        track(fd_rel_err(loss, l.b.data(), l.gb.data(), l.b.size()));
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size(), 40));
    }
    {  // batchnorm: gamma, beta, x, through batch statistics in diag mode.
       // beta must be nonzero: normalized activations have zero column sums,
       // so at beta = 0 its gradient vanishes identically
        BatchNormLayer l(5);
        l.beta = Vecd::LinSpaced(5, -0.6, 0.8);
        Tensor x = random_tensor({8, 5}, 38);
        auto loss = [&] { return 0.5 * l.forward(x, Mode::diag).map2d().squaredNorm(); };
        Tensor y = l.forward(x, Mode::diag);
        Tensor gx = l.backward(y);
        track(fd_rel_err(loss, l.gamma.data(), l.ggamma.data(), l.gamma.size()));
        track(fd_rel_err(loss, l.beta.data(), l.gbeta.data(), l.beta.size()));
        track(fd_rel_err(loss, x.data.data(), gx.data.data(), x.size()));
    }

    WhiteningConfig wc;
    wc.eps = 1e-4;
    wc.ns_iters = 20;
    wc.sample_stride = 1;
    wc.block_size = 64;
    {  // deconv conv: w and b under batch statistics, x with frozen D
        RandomStream rng(39);
        PatchSpec spec;
        spec.kernel = 3;
        spec.padding = 1;
        spec.channels_in = 2;
        DeconvConv2dLayer l(spec, 3, wc, rng);
        l.b = Vecd::LinSpaced(3, -0.4, 0.9);  // centered whitening, same reason
        Tensor x = random_tensor({2, 2, 5, 5}, 40);
        auto loss = [&] {
            Tensor y = l.forward(x, Mode::diag);
            return 0.5 * y.map2d(y.dim(0), y.size() / y.dim(0)).squaredNorm();
        };
        Tensor y = l.forward(x, Mode::diag);
        l.backward(y);
        track(fd_rel_err(loss, l.w.data(), l.gw.data(), l.w.size()));
        track(fd_rel_err(loss, l.b.data(), l.gb.data(), l.b.size()));

        WhiteningConfig fz = wc;
        fz.momentum = 1.0;
        fz.freeze_after = 1;
        RandomStream rng2(39);
        DeconvConv2dLayer lf(spec, 3, fz, rng2);
        lf.forward(x, Mode::train);
        REQUIRE(lf.states[0].frozen);
        auto loss_f = [&] {
            Tensor y2 = lf.forward(x, Mode::train);
            return 0.5 * y2.map2d(y2.dim(0), y2.size() / y2.dim(0)).squaredNorm();
        };
        Tensor y2 = lf.forward(x, Mode::train);
        Tensor gx = lf.backward(y2);
        track(fd_rel_err(loss_f, x.data.data(), gx.data.data(), x.size(), 40));
    }
    {  // deconv dense, same split
        RandomStream rng(41);
        DeconvDenseLayer l(6, 4, wc, rng);
        l.b = Vecd::LinSpaced(4, -0.5, 0.7);
        Tensor x = random_tensor({9, 6}, 42);
        auto loss = [&] { return 0.5 * l.forward(x, Mode::diag).map2d().squaredNorm(); };
        Tensor y = l.forward(x, Mode::diag);
        l.backward(y);
        track(fd_rel_err(loss, l.w.data(), l.gw.data(), l.w.size()));
        track(fd_rel_err(loss, l.b.data(), l.gb.data(), l.b.size()));

        WhiteningConfig fz = wc;
        fz.momentum = 1.0;
        fz.freeze_after = 1;
        RandomStream rng2(41);
        DeconvDenseLayer lf(6, 4, fz, rng2);
        lf.forward(x, Mode::train);
        REQUIRE(lf.states[0].frozen);
        auto loss_f = [&] { return 0.5 * lf.forward(x, Mode::train).map2d().squaredNorm(); };
        Tensor y2 = lf.forward(x, Mode::train);
        Tensor gx = lf.backward(y2);
        track(fd_rel_err(loss_f, x.data.data(), gx.data.data(), x.size()));
    }

    report(6,
           "every layer backward matches central finite differences (worst "
           "relative error " +
               num(worst) + " < 1e-5)",
           worst < 1e-5);
}

TEST_CASE("criterion 7: desk-scale ordinal training claims") {
    fs::path cfgp = scratch_root() / "mlp_modes.json";
    {
        std::ofstream f(cfgp);
        f << "{\"modes\": [\"bn\", \"deconv\"]}";
    }

    int mlp_wins = 0, cnn_wins = 0;
    std::string detail;
    for (int seed = 1; seed <= 3; ++seed) {
        fs::path out = scratch_root() / ("mlp_s" + std::to_string(seed));
        REQUIRE(run_cli("mlp --config \"" + cfgp.string() + "\" --data-dir \"" +
                        data_dir().string() + "\" --out \"" + out.string() +
                        "\" --seed " + std::to_string(seed)) == 0);
        auto sum = csv_cells(out / "mlp_summary.csv");
        const double bn = cell_value(sum, "eval_acc", 0);
        const double dc = cell_value(sum, "eval_acc", 1);
        if (dc > bn) ++mlp_wins;
        detail += " mlp s" + std::to_string(seed) + " " + num(dc) + ">" + num(bn);
    }
    for (int seed = 1; seed <= 3; ++seed) {
        fs::path out = scratch_root() / ("cnn_s" + std::to_string(seed));
        REQUIRE(run_cli("cnn --data-dir \"" + data_dir().string() + "\" --out \"" +
                        out.string() + "\" --seed " + std::to_string(seed)) == 0);
        auto sum = csv_cells(out / "cnn_summary.csv");
        const double bn = cell_value(sum, "eval_acc", 0);
        const double dc = cell_value(sum, "eval_acc", 1);
        if (dc > bn) ++cnn_wins;
        detail += " cnn s" + std::to_string(seed) + " " + num(dc) + "v" + num(bn);
    }
    const bool ok = mlp_wins == 3 && cnn_wins >= 2;
    report(7,
           "epoch-1 deconv beats batch norm (mlp " + std::to_string(mlp_wins) +
               "/3 need 3, cnn " + std::to_string(cnn_wins) + "/3 need 2;" +
               detail + ")",
           ok);
}

TEST_CASE("criterion 8: implicit deconvolution equivalence and speed") {
    WhiteningConfig wc;
    wc.eps = 1e-5;
    wc.ns_iters = 15;
    wc.sample_stride = 3;
    wc.block_size = 64;
    wc.momentum = 1.0;
    wc.freeze_after = 1;
    PatchSpec spec;
    spec.kernel = 3;
    spec.padding = 1;
    spec.channels_in = 64;

    RandomStream rng(3);
    DeconvConv2dLayer layer(spec, 64, wc, rng);
    Tensor x = random_tensor({2, 64, 64, 64}, 4);
    layer.forward(x, Mode::train);
    REQUIRE(layer.states[0].frozen);

    Tensor ye = layer.forward(x, Mode::eval);
    Tensor yf = layer.forward_folded(x);
    double diff = 0, ref = 0;
    for (long i = 0; i < ye.size(); ++i) {
        diff = std::max(diff, std::abs(ye.data[size_t(i)] - yf.data[size_t(i)]));
        ref = std::max(ref, std::abs(ye.data[size_t(i)]));
    }
    const double rel = diff / ref;

    double t_eval = INFINITY, t_fold = INFINITY;
    for (int rep = 0; rep < 3; ++rep) {
        t_eval = std::min(t_eval, wall_s([&] { layer.forward(x, Mode::eval); }));
        t_fold = std::min(t_fold, wall_s([&] { layer.forward_folded(x); }));
    }
    const double speedup = t_eval / t_fold;

    const bool ok = rel < 1e-10 && speedup >= 1.5;
    report(8,
           "folded eval equals the explicit path (relerr " + num(rel) +
               " < 1e-10) and is " + num(speedup) + "x faster (need 1.5x) at "
               "64ch k3 on 64x64",
           ok);
}

TEST_CASE("criterion 9: center-surround kernels and sparsity") {
    Dataset nat = natural_corpus();
    PatchMatrix pm = natural_patch_rows(nat, 1024, 1, 15, 3);
    auto [mu, cov] = covariance(pm, 1, true);
    Matd d = coupled_newton_schulz(cov, 1e-5, 30);
    Tensor kern = extract_deconv_kernel(d, 15, 3);

    bool signs_ok = true;
    std::string sgn;
    for (long c = 0; c < 3; ++c) {
        const long c0 = 7;
        double center = kern.at4(c, c, c0, c0);
        double surround = 0;
        long nsur = 0;
        for (long y = 0; y < 15; ++y)
            for (long x = 0; x < 15; ++x) {
                long cheb = std::max(std::abs(y - c0), std::abs(x - c0));
                if (cheb >= 1 && cheb <= 3) {
                    surround += kern.at4(c, c, y, x);
                    ++nsur;
                }
            }
        surround /= double(nsur);
        if (!(center > 0 && surround < 0)) signs_ok = false;
        sgn += " ch" + std::to_string(c) + " " + num(center) + "/" + num(surround);
    }

    Matd centered = pm.data.rowwise() - mu.transpose();
    Matd xw = centered * d;
    const long ctr = 7 * 15 + 7;
    std::vector<double> before(size_t(centered.rows())), after(size_t(xw.rows()));
    for (long r = 0; r < centered.rows(); ++r) {
        before[size_t(r)] = centered(r, ctr);
        after[size_t(r)] = xw(r, ctr);
    }
    SparsityStats st = sparsity_stats(before, after);
    const double gain = st.kurtosis_after - st.kurtosis_before;

    const bool ok = signs_ok && gain > 0;
    report(9,
           "kernel signs oppose center vs surround in all 3 channels (" + sgn +
               " ) and whitening raises kurtosis by " + num(gain) + " (" +
               num(st.kurtosis_before) + " -> " + num(st.kurtosis_after) + ")",
           ok);
}

TEST_CASE("criterion 10: deconvolution preparation is cheaper than convolution") {
    fs::path out = scratch_root() / "timing";
    REQUIRE(run_cli("timing --out \"" + out.string() + "\" --seed 1") == 0);
    auto t = csv_cells(out / "timing.csv");
    REQUIRE(t.size() == 23);  // header plus the 22-row grid

    const double prep = cell_value(t, "ms_im2col", 0) + cell_value(t, "ms_cov", 0) +
                        cell_value(t, "ms_ns", 0);
    const double conv = cell_value(t, "ms_conv", 0);
    const double ratio = cell_value(t, "ratio_prep_vs_conv", 0);

    const bool ok = prep < conv && ratio < 1.0;
    report(10,
           "row 0 (256x256, 3->64, k3, stride 3): im2col+cov+ns " + num(prep) +
               " ms < conv " + num(conv) + " ms, full 22-row grid emitted",
           ok);
}
