#include "netdeconv/experiments.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "netdeconv/errors.hpp"
#include "netdeconv/layers.hpp"
#include "netdeconv/linalg.hpp"
#include "netdeconv/patches.hpp"
#include "netdeconv/whitening.hpp"

namespace netdeconv {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// small shared utilities

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

std::ofstream open_out(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw contract_error("cannot open " + p.string() + " for writing");
    return f;
}

// Every artifact carries the same caveat so no number gets quoted without it.
void desk_header(std::ostream& f, const std::string& what) {
    f << "# " << what << "\n";
    f << "# desk-scale run: synthetic stand-in corpora and reduced sizes, "
         "protocol otherwise unchanged\n";
}

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// CSV reading, used both for summaries and for --self-check

struct CsvTable {
    std::vector<std::string> cols;
    std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv_line(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, ',')) out.push_back(cur);
    if (!s.empty() && s.back() == ',') out.push_back("");
    return out;
}

CsvTable read_csv(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw contract_error("cannot open " + p.string());
    CsvTable t;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (t.cols.empty()) {
            t.cols = split_csv_line(line);
        } else {
            auto r = split_csv_line(line);
            if (r.size() != t.cols.size())
                throw format_error("ragged csv row in " + p.string(), 0);
            t.rows.push_back(std::move(r));
        }
    }
    if (t.cols.empty()) throw format_error("csv without header: " + p.string(), 0);
    return t;
}

bool numeric_cell(const std::string& s) {
    if (s.empty()) return false;
    char* end = nullptr;
    std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size();
}

const std::set<std::string>& text_columns() {
    static const std::set<std::string> cols = {"split", "mode", "run", "loss_kind",
                                               "name", "kind", "file", "schedule"};
    return cols;
}

// Re-reads what the command just wrote and validates shape plus cell types.
void check_artifacts(const CliOptions& opt, const std::vector<std::string>& files) {
    if (!opt.self_check) return;
    for (const auto& rel : files) {
        fs::path p = fs::path(opt.out_dir) / rel;
        if (p.extension() == ".pgm") {
            read_pgm(p.string());
            continue;
        }
        if (p.extension() == ".json") {
            std::ifstream in(p);
            if (!in) throw contract_error("cannot open " + p.string());
            json j = json::parse(in);
            continue;
        }
        CsvTable t = read_csv(p);
        for (size_t c = 0; c < t.cols.size(); ++c) {
            if (text_columns().count(t.cols[c])) continue;
            for (const auto& r : t.rows)
                if (!numeric_cell(r[c]))
                    throw format_error("non-numeric cell '" + r[c] + "' in column '" +
                                           t.cols[c] + "' of " + p.string(),
                                       0);
        }
    }
    std::cout << "self-check ok: " << files.size() << " artifacts\n";
}

// ---------------------------------------------------------------------------
// manifest

json whitening_json(const WhiteningConfig& w) {
    return {{"eps", w.eps},
            {"ns_iters", w.ns_iters},
            {"sample_stride", w.sample_stride},
            {"block_size", w.block_size},
            {"freeze_after", w.freeze_after},
            {"momentum", w.momentum},
            {"centered", w.centered},
            {"track_residual", w.track_residual}};
}

json config_json(const ExperimentConfig& cfg) {
    const TrainConfig& t = cfg.train;
    json lw = json::object();
    for (const auto& [k, v] : t.layer_whitening) lw[std::to_string(k)] = whitening_json(v);
    return {{"lr", t.lr},
            {"weight_decay", t.weight_decay},
            {"batch_size", t.batch_size},
            {"epochs", t.epochs},
            {"schedule", t.schedule == Schedule::cosine ? "cosine" : "constant"},
            {"seed", t.seed},
            {"eval_batch", t.eval_batch},
            {"metric_batch_stats", t.metric_batch_stats},
            {"whitening", whitening_json(t.whitening)},
            {"layer_whitening", lw},
            {"train_count", cfg.train_count},
            {"test_count", cfg.test_count},
            {"modes", cfg.modes}};
}

void write_manifest(const CliOptions& opt, const std::string& name,
                    const ExperimentConfig& cfg, const std::vector<std::string>& artifacts,
                    const json& extra = json::object()) {
    json j = {{"command", name},     {"seed", opt.seed},
              {"data_dir", opt.data_dir}, {"uncentered", opt.uncentered},
              {"config", config_json(cfg)}, {"artifacts", artifacts}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    auto f = open_out(fs::path(opt.out_dir) / "manifest.json");
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// worker pool: forked processes, disjoint output files per task

void run_jobs(const std::vector<std::function<void()>>& work, int jobs) {
    if (jobs <= 1 || work.size() <= 1) {
        for (const auto& w : work) w();
        return;
    }
    std::cout.flush();
    std::cerr.flush();
    std::fflush(nullptr);
    std::map<pid_t, size_t> live;
    size_t next = 0;
    int worst = 0;
    auto spawn = [&](size_t i) {
        pid_t p = fork();
        if (p < 0) throw contract_error("fork failed");
        if (p == 0) {
            int code = 0;
            try {
                work[i]();
            } catch (const numerical_error& e) {
                std::fprintf(stderr, "worker %zu: %s\n", i, e.what());
                code = 3;
            } catch (const std::exception& e) {
                std::fprintf(stderr, "worker %zu: %s\n", i, e.what());
                code = 2;
            }
            std::fflush(nullptr);
            _exit(code);
        }
        live[p] = i;
    };
    while (next < work.size() || !live.empty()) {
        while (next < work.size() && int(live.size()) < jobs) spawn(next++);
        int status = 0;
        pid_t p = wait(&status);
        if (p < 0) throw contract_error("wait failed");
        live.erase(p);
        worst = std::max(worst, WIFEXITED(status) ? WEXITSTATUS(status) : 2);
    }
    if (worst == 3) throw numerical_error("a worker process hit a numerical failure");
    if (worst != 0) throw contract_error("a worker process failed");
}

// ---------------------------------------------------------------------------
// dataset plumbing

ClassificationData take(const Dataset& d, long count, uint64_t seed) {
    if (count > 0 && count < d.images.dim(0)) return to_classification(subset(d, count, seed));
    return to_classification(d);
}

void flatten_images(ClassificationData& c) {
    long n = c.images.dim(0);
    c.images.reshape({n, c.images.size() / n});
}

template <typename F>
auto with_gen_data_hint(F&& f) {
    try {
        return f();
    } catch (const contract_error& e) {
        throw contract_error(std::string(e.what()) +
                             " (generate the desk corpora with the gen-data subcommand)");
    }
}

struct SplitPair {
    ClassificationData train, test;
};

SplitPair load_idx_pair(const CliOptions& opt, const std::string& corpus,
                        const ExperimentConfig& cfg, long def_train, long def_test) {
    fs::path dir = fs::path(opt.data_dir) / corpus;
    Dataset tr = with_gen_data_hint([&] {
        return load_idx((dir / "train-images-idx3-ubyte").string(),
                        (dir / "train-labels-idx1-ubyte").string(), "train");
    });
    Dataset te = with_gen_data_hint([&] {
        return load_idx((dir / "t10k-images-idx3-ubyte").string(),
                        (dir / "t10k-labels-idx1-ubyte").string(), "test");
    });
    long ntr = cfg.train_count > 0 ? cfg.train_count : def_train;
    long nte = cfg.test_count > 0 ? cfg.test_count : def_test;
    return {take(tr, ntr, 12345), take(te, nte, 54321)};
}

SplitPair load_cifar_pair(const CliOptions& opt, const ExperimentConfig& cfg, long def_train,
                          long def_test) {
    fs::path dir = fs::path(opt.data_dir) / "cifar";
    Dataset tr = with_gen_data_hint(
        [&] { return load_cifar10((dir / "data_batch_1.bin").string(), "train"); });
    Dataset te = with_gen_data_hint(
        [&] { return load_cifar10((dir / "test_batch.bin").string(), "test"); });
    long ntr = cfg.train_count > 0 ? cfg.train_count : def_train;
    long nte = cfg.test_count > 0 ? cfg.test_count : def_test;
    return {take(tr, ntr, 12345), take(te, nte, 54321)};
}

Dataset load_natural(const CliOptions& opt) {
    fs::path p = fs::path(opt.data_dir) / "natural" / "natural.bin";
    return with_gen_data_hint([&] { return load_cifar10(p.string(), "natural"); });
}

struct EvalSummary {
    double loss = NAN;
    double acc = NAN;
    bool found = false;
};

EvalSummary last_eval(const fs::path& csv) {
    CsvTable t = read_csv(csv);
    long ls = -1, ll = -1, la = -1;
    for (size_t i = 0; i < t.cols.size(); ++i) {
        if (t.cols[i] == "split") ls = long(i);
        if (t.cols[i] == "loss") ll = long(i);
        if (t.cols[i] == "acc") la = long(i);
    }
    EvalSummary s;
    if (ls < 0 || ll < 0 || la < 0) return s;
    for (const auto& r : t.rows)
        if (r[size_t(ls)] == "eval") {
            s.loss = std::stod(r[size_t(ll)]);
            s.acc = std::stod(r[size_t(la)]);
            s.found = true;
        }
    return s;
}

// ---------------------------------------------------------------------------
// config file handling

void merge_whitening(WhiteningConfig& w, const json& j) {
    static const std::set<std::string> keys = {"eps",          "ns_iters", "sample_stride",
                                               "block_size",   "freeze_after", "momentum",
                                               "centered",     "track_residual"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!keys.count(it.key()))
            throw contract_error("config: unknown whitening key '" + it.key() + "'");
    if (j.contains("eps")) w.eps = j["eps"].get<double>();
    if (j.contains("ns_iters")) w.ns_iters = j["ns_iters"].get<long>();
    if (j.contains("sample_stride")) w.sample_stride = j["sample_stride"].get<long>();
    if (j.contains("block_size")) w.block_size = j["block_size"].get<long>();
    if (j.contains("freeze_after")) w.freeze_after = j["freeze_after"].get<long>();
    if (j.contains("momentum")) w.momentum = j["momentum"].get<double>();
    if (j.contains("centered")) w.centered = j["centered"].get<bool>();
    if (j.contains("track_residual")) w.track_residual = j["track_residual"].get<bool>();
}

void apply_seed_and_centering(const CliOptions& opt, ExperimentConfig& cfg) {
    cfg.train.seed = opt.seed;
    if (opt.uncentered) {
        cfg.train.whitening.centered = false;
        for (auto& [k, w] : cfg.train.layer_whitening) w.centered = false;
    }
}

} // namespace

void apply_config(const std::string& path, ExperimentConfig& cfg) {
    if (path.empty()) return;
    std::ifstream f(path);
    if (!f) throw contract_error("cannot open config " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw format_error(std::string("config parse: ") + e.what(), 0);
    }
    if (!j.is_object()) throw format_error("config must be a JSON object", 0);
    static const std::set<std::string> keys = {
        "lr",        "weight_decay", "batch_size",        "epochs",
        "schedule",  "eval_batch",   "metric_batch_stats", "whitening",
        "layer_whitening", "train_count", "test_count",    "modes"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!keys.count(it.key())) throw contract_error("config: unknown key '" + it.key() + "'");
    TrainConfig& t = cfg.train;
    if (j.contains("lr")) t.lr = j["lr"].get<double>();
    if (j.contains("weight_decay")) t.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("batch_size")) t.batch_size = j["batch_size"].get<long>();
    if (j.contains("epochs")) t.epochs = j["epochs"].get<long>();
    if (j.contains("eval_batch")) t.eval_batch = j["eval_batch"].get<long>();
    if (j.contains("metric_batch_stats")) t.metric_batch_stats = j["metric_batch_stats"].get<bool>();
    if (j.contains("schedule")) {
        std::string s = j["schedule"].get<std::string>();
        if (s == "constant")
            t.schedule = Schedule::constant;
        else if (s == "cosine")
            t.schedule = Schedule::cosine;
        else
            throw contract_error("config: unknown schedule '" + s + "'");
    }
    if (j.contains("whitening")) merge_whitening(t.whitening, j["whitening"]);
    if (j.contains("layer_whitening")) {
        cfg.layer_whitening_from_config = true;
        t.layer_whitening.clear();
        for (auto it = j["layer_whitening"].begin(); it != j["layer_whitening"].end(); ++it) {
            int idx = 0;
            try {
                idx = std::stoi(it.key());
            } catch (...) {
                throw contract_error("config: layer_whitening keys must be layer ordinals");
            }
            WhiteningConfig w = t.whitening;
            merge_whitening(w, it.value());
            t.layer_whitening[idx] = w;
        }
    }
    if (j.contains("train_count")) cfg.train_count = j["train_count"].get<long>();
    if (j.contains("test_count")) cfg.test_count = j["test_count"].get<long>();
    if (j.contains("modes")) cfg.modes = j["modes"].get<std::vector<std::string>>();
    t.validate();
}

ClassificationData to_classification(const Dataset& d) {
    ClassificationData c;
    c.images = d.images;
    c.labels.assign(d.labels.begin(), d.labels.end());
    return c;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::string& path, const Eigen::Ref<const Matd>& img) {
    if (img.size() == 0) throw contract_error("write_pgm: empty image");
    const double lo = img.minCoeff(), hi = img.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    auto f = open_out(path);
    f << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
    for (long y = 0; y < img.rows(); ++y)
        for (long x = 0; x < img.cols(); ++x)
            f.put(char(static_cast<unsigned char>(
                std::lround(255.0 * (img(y, x) - lo) / span))));
}

Matd read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw contract_error("cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") throw format_error("not a binary PGM: " + path, 0);
    auto next_int = [&]() {
        for (;;) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
                continue;
            }
            if (c != EOF && std::isspace(c)) {
                f.get();
                continue;
            }
            break;
        }
        long v = 0;
        f >> v;
        if (!f) throw format_error("truncated PGM header: " + path, 0);
        return v;
    };
    const long w = next_int(), h = next_int(), maxv = next_int();
    if (w < 1 || h < 1) throw format_error("bad PGM dimensions: " + path, 0);
    if (maxv != 255) throw format_error("unsupported PGM depth: " + path, 0);
    f.get();
    Matd img(h, w);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            int c = f.get();
            if (c == EOF) throw format_error("truncated PGM payload: " + path, 0);
            img(y, x) = double(c) / 255.0;
        }
    return img;
}

// ---------------------------------------------------------------------------
// patch sampling shared by kernel-viz and sparsity

PatchMatrix natural_patch_rows(const Dataset& natural, long count, uint64_t seed, long k,
                               long stride) {
    if (stride < 1) throw contract_error("patch stride must be positive");
    Dataset s;
    {
        // sample_patch_batch already validates count against the corpus size
        s.images = sample_patch_batch(natural, count, seed);
        s.labels.assign(size_t(count), 0);
    }
    const long c = s.images.dim(1), h = s.images.dim(2), w = s.images.dim(3);
    if (h < k || w < k) throw contract_error("images smaller than the requested patch size");
    PatchSpec spec;
    spec.kernel = k;
    spec.stride = 1;
    spec.padding = 0;
    spec.channels_in = c;
    const long ho = h - k + 1, wo = w - k + 1;
    const long keep_h = (ho + stride - 1) / stride, keep_w = (wo + stride - 1) / stride;
    PatchMatrix out;
    out.batch = count;
    out.h_out = keep_h;
    out.w_out = keep_w;
    out.data.resize(count * keep_h * keep_w, c * k * k);
    const long per = c * h * w;
    long r = 0;
    Tensor one({1, c, h, w});
    for (long i = 0; i < count; ++i) {
        std::copy(s.images.data.begin() + i * per, s.images.data.begin() + (i + 1) * per,
                  one.data.begin());
        PatchMatrix pm = im2col(one, spec);
        for (long y = 0; y < ho; y += stride)
            for (long x = 0; x < wo; x += stride) out.data.row(r++) = pm.data.row(y * wo + x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// model builders

Network build_mlp(const std::string& mode, uint64_t seed, const TrainConfig& cfg) {
    if (mode != "plain" && mode != "bn" && mode != "deconv")
        throw contract_error("unknown mlp mode '" + mode + "'");
    RandomStream rng(seed);
    const std::vector<long> dims = {784, 128, 128, 128, 10};
    Network net;
    for (int li = 0; li < 4; ++li) {
        if (mode == "deconv") {
            net.layers.push_back(std::make_unique<DeconvDenseLayer>(
                dims[li], dims[li + 1], cfg.whitening_for(li), rng));
        } else {
            net.layers.push_back(std::make_unique<DenseLayer>(dims[li], dims[li + 1], rng));
            if (mode == "bn" && li < 3)
                net.layers.push_back(std::make_unique<BatchNormLayer>(dims[li + 1]));
        }
        if (li < 3) net.layers.push_back(std::make_unique<SigmoidLayer>());
    }
    return net;
}

Network build_cnn(const std::string& mode, uint64_t seed, const TrainConfig& cfg) {
    if (mode != "plain" && mode != "bn" && mode != "deconv")
        throw contract_error("unknown cnn mode '" + mode + "'");
    RandomStream rng(seed);
    Network net;
    int wi = 0;
    auto conv = [&](long c_in, long c_out) {
        PatchSpec s;
        s.kernel = 3;
        s.stride = 1;
        s.padding = 1;
        s.channels_in = c_in;
        if (mode == "deconv") {
            net.layers.push_back(
                std::make_unique<DeconvConv2dLayer>(s, c_out, cfg.whitening_for(wi), rng));
        } else {
            net.layers.push_back(std::make_unique<Conv2dLayer>(s, c_out, rng));
            if (mode == "bn") net.layers.push_back(std::make_unique<BatchNormLayer>(c_out));
        }
        ++wi;
        net.layers.push_back(std::make_unique<ReluLayer>());
    };
    conv(3, 64);
    net.layers.push_back(std::make_unique<MaxPool2Layer>());
    conv(64, 128);
    net.layers.push_back(std::make_unique<MaxPool2Layer>());
    conv(128, 256);
    conv(256, 256);
    net.layers.push_back(std::make_unique<MaxPool2Layer>());
    net.layers.push_back(std::make_unique<FlattenLayer>());
    if (mode == "deconv")
        net.layers.push_back(
            std::make_unique<DeconvDenseLayer>(4096, 10, cfg.whitening_for(wi), rng));
    else
        net.layers.push_back(std::make_unique<DenseLayer>(4096, 10, rng));
    return net;
}

ExperimentConfig mlp_defaults(uint64_t seed) {
    ExperimentConfig c;
    c.train.lr = 0.1;
    c.train.weight_decay = 1e-3;
    c.train.batch_size = 128;
    c.train.epochs = 1;
    c.train.seed = seed;
    c.train.eval_batch = 1000;
    c.train.metric_batch_stats = true;
    c.train.whitening.eps = 1e-5;
    c.train.whitening.ns_iters = 5;
    c.train.whitening.sample_stride = 1;
    c.train.whitening.block_size = 512;
    c.modes = {"plain", "bn", "deconv"};
    return c;
}

ExperimentConfig cnn_defaults(uint64_t seed) {
    ExperimentConfig c;
    c.train.lr = 0.1;
    c.train.weight_decay = 1e-3;
    c.train.batch_size = 64;
    c.train.epochs = 1;
    c.train.seed = seed;
    c.train.eval_batch = 100;
    c.train.metric_batch_stats = true;
    c.train.whitening.eps = 1e-5;
    c.train.whitening.ns_iters = 5;
    c.train.whitening.sample_stride = 3;
    c.train.whitening.block_size = 64;
    c.train_count = 640;
    c.test_count = 500;
    c.modes = {"bn", "deconv"};
    return c;
}

// ---------------------------------------------------------------------------
// gen-data: canonical desk corpora, fixed seeds so re-runs are byte-identical

void cmd_gen_data(const CliOptions& opt) {
    fs::path root(opt.data_dir);
    struct Out {
        std::string path;
        long n;
    };
    std::vector<Out> written;

    auto save_idx_pair = [&](const std::string& dir, const std::string& stem, const Dataset& d) {
        fs::create_directories(root / dir);
        std::string img = (root / dir / (stem + "-images-idx3-ubyte")).string();
        std::string lab = (root / dir / (stem + "-labels-idx1-ubyte")).string();
        save_idx_images(img, d.images);
        save_idx_labels(lab, d.labels);
        written.push_back({img, d.images.dim(0)});
        written.push_back({lab, long(d.labels.size())});
    };
    auto save_cifar = [&](const std::string& rel, const Dataset& d) {
        fs::path p = root / rel;
        fs::create_directories(p.parent_path());
        save_cifar10(p.string(), d);
        written.push_back({p.string(), d.images.dim(0)});
    };

    save_idx_pair("mnist", "train", synth_bg_digits(100, 3000));
    save_idx_pair("mnist", "t10k", synth_bg_digits(999, 1000));
    save_idx_pair("fashion", "train", synth_fashion(7, 6000));
    save_idx_pair("fashion", "t10k", synth_fashion(8, 1000));
    save_cifar("cifar/data_batch_1.bin", synth_bg_cifar(100, 2000));
    save_cifar("cifar/test_batch.bin", synth_bg_cifar(999, 1000));
    save_cifar("natural/natural.bin", synth_natural_set(3, 1200, 32));

    for (const auto& o : written) std::cout << "wrote " << o.path << " (" << o.n << ")\n";

    if (opt.self_check) {
        load_idx((root / "mnist/train-images-idx3-ubyte").string(),
                 (root / "mnist/train-labels-idx1-ubyte").string(), "train");
        load_idx((root / "fashion/train-images-idx3-ubyte").string(),
                 (root / "fashion/train-labels-idx1-ubyte").string(), "train");
        load_cifar10((root / "cifar/data_batch_1.bin").string(), "train");
        load_cifar10((root / "natural/natural.bin").string(), "natural");
        std::cout << "self-check ok: corpora reload cleanly\n";
    }

    ExperimentConfig cfg;
    json extra;
    extra["corpora"] = json::object();
    for (const auto& o : written) extra["corpora"][o.path] = o.n;
    extra["note"] = "corpus seeds are fixed constants; --seed does not affect gen-data";
    write_manifest(opt, "gen-data", cfg, {}, extra);
}

// ---------------------------------------------------------------------------
// regress: linear models on the fashion corpus

namespace {

Matd take_rows(const Matd& m, const std::vector<long>& idx, long lo, long hi) {
    Matd out(hi - lo, m.cols());
    for (long r = lo; r < hi; ++r) out.row(r - lo) = m.row(idx[size_t(r)]);
    return out;
}

} // namespace

void cmd_regress(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.batch_size = 128;
    cfg.train.whitening.eps = 1e-5;
    cfg.train.whitening.ns_iters = 15;
    cfg.train.whitening.sample_stride = 1;
    cfg.train.whitening.block_size = 784;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);

    SplitPair data = load_idx_pair(opt, "fashion", cfg, 6000, 0);
    flatten_images(data.train);
    const long n = data.train.images.dim(0);
    const long f = data.train.images.dim(1);
    Matd x = data.train.images.map2d(n, f);
    Matd y = Matd::Constant(n, 10, -1.0);
    for (long i = 0; i < n; ++i) y(i, data.train.labels[size_t(i)]) = 1.0;

    // closed-form optimum of the bias-folded least squares problem
    Vecd xmu = x.colwise().mean();
    Eigen::RowVectorXd ymu = y.colwise().mean();
    Matd xc = x.rowwise() - xmu.transpose();
    Matd yc = y.rowwise() - ymu;
    Matd wstar = closed_form_l2(xc, yc, 0.0);
    const double loss_star = 0.5 * (matmul(xc, wstar) - yc).squaredNorm() / double(n);

    // whitened design for the deconvolution runs
    PatchMatrix pmx{x, n, 1, 1};
    const bool centered = cfg.train.whitening.centered;
    auto [mu, cov] = covariance(pmx, 1, centered);
    Matd d = coupled_newton_schulz(cov, cfg.train.whitening.eps, int(cfg.train.whitening.ns_iters));
    Matd xw = centered ? matmul(Matd(x.rowwise() - mu.transpose()), d) : matmul(x, d);

    struct RegRun {
        std::string run;
        std::string kind;
        double lr;
        bool full_batch;
    };
    const std::vector<RegRun> runs = {
        {"sgd", "plain", 0.02, false}, {"sgd", "plain", 0.05, false},
        {"sgd", "plain", 0.1, false},  {"sgd", "plain", 1.0, false},
        {"bn", "bn", 0.01, false},     {"bn", "bn", 0.1, false},
        {"deconv", "deconv", 1.0, true},
    };

    auto csv = open_out(fs::path(opt.out_dir) / "regress.csv");
    desk_header(csv, "linear regression suite on the fashion corpus");
    csv << "# deconv runs use full-batch descent, baselines mini-batch "
        << cfg.train.batch_size << "\n";
    csv << "loss_kind,run,lr,step,loss_full,loss_smooth,diverged\n";

    struct SummaryRow {
        std::string loss_kind, run;
        double lr, final_loss = NAN, loss_at_5 = NAN;
        bool diverged = false;
    };
    std::vector<SummaryRow> summary;

    for (const std::string loss_kind : {"l2", "logistic"}) {
        for (const RegRun& rr : runs) {
            const Matd& xin = rr.kind == "deconv" ? xw : x;
            Network net;
            if (rr.kind == "bn") net.layers.push_back(std::make_unique<BatchNormLayer>(f));
            {
                RandomStream wrng(cfg.train.seed);
                net.layers.push_back(std::make_unique<DenseLayer>(f, 10, wrng));
            }
            auto loss_fn = [&](const Matd& pred, const Matd& tgt) {
                return loss_kind == "l2" ? l2_loss(pred, tgt) : logistic_loss(pred, tgt);
            };
            auto full_loss = [&]() {
                Tensor out = net.forward(tensor_from(xin), Mode::diag);
                return loss_fn(out.map2d(n, 10), y).first;
            };
            const long bsz = cfg.train.batch_size;
            const long steps = rr.full_batch ? 10 : n / bsz;
            std::vector<long> order(static_cast<size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            if (!rr.full_batch) {
                RandomStream srng(cfg.train.seed + 17);
                srng.shuffle(order);
            }
            SummaryRow sr{loss_kind, rr.run, rr.lr};
            double smooth = INFINITY;
            for (long s = 1; s <= steps; ++s) {
                Matd xb, yb;
                if (rr.full_batch) {
                    xb = xin;
                    yb = y;
                } else {
                    xb = take_rows(xin, order, (s - 1) * bsz, s * bsz);
                    yb = take_rows(y, order, (s - 1) * bsz, s * bsz);
                }
                Tensor out = net.forward(tensor_from(xb), Mode::train);
                auto [bl, g] = loss_fn(out.map2d(xb.rows(), 10), yb);
                (void)bl;
                net.backward(tensor_from(g));
                sgd_step(net.params(), rr.lr, 0.0);
                double lf = full_loss();
                bool bad = !std::isfinite(lf) || lf > 1e12;
                if (bad) {
                    sr.diverged = true;
                    lf = INFINITY;
                }
                smooth = std::min(smooth, lf);
                if (s == 5) sr.loss_at_5 = lf;
                sr.final_loss = lf;
                csv << loss_kind << "," << rr.run << "," << num(rr.lr) << "," << s << ","
                    << num(lf) << "," << num(smooth) << "," << (sr.diverged ? 1 : 0) << "\n";
                if (bad) break;
            }
            summary.push_back(sr);
        }
    }

    auto sf = open_out(fs::path(opt.out_dir) / "regress_summary.csv");
    desk_header(sf, "regression summary, l2 rows compared against the closed form");
    sf << "loss_kind,run,lr,final_loss,loss_at_5,optimal_loss,rel_gap_at_5,diverged\n";
    for (const auto& sr : summary) {
        const bool is_l2 = sr.loss_kind == "l2";
        const double opt_loss = is_l2 ? loss_star : NAN;
        const double gap =
            is_l2 && std::isfinite(sr.loss_at_5) ? (sr.loss_at_5 - loss_star) / loss_star : NAN;
        sf << sr.loss_kind << "," << sr.run << "," << num(sr.lr) << "," << num(sr.final_loss)
           << "," << num(sr.loss_at_5) << "," << num(opt_loss) << "," << num(gap) << ","
           << (sr.diverged ? 1 : 0) << "\n";
    }
    sf.close();
    csv.close();

    write_manifest(opt, "regress", cfg, {"regress.csv", "regress_summary.csv"},
                   {{"optimal_l2_loss", loss_star}});
    check_artifacts(opt, {"regress.csv", "regress_summary.csv", "manifest.json"});
}

// ---------------------------------------------------------------------------
// mlp / cnn classification

void cmd_mlp(const CliOptions& opt) {
    ExperimentConfig cfg = mlp_defaults(opt.seed);
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    SplitPair data = load_idx_pair(opt, "mnist", cfg, 3000, 1000);
    flatten_images(data.train);
    flatten_images(data.test);

    std::vector<std::string> files;
    std::vector<std::function<void()>> work;
    for (const auto& mode : cfg.modes) {
        std::string file = "mlp_" + mode + ".csv";
        files.push_back(file);
        work.push_back([&, mode, file] {
            Network net = build_mlp(mode, cfg.train.seed, cfg.train);
            auto f = open_out(fs::path(opt.out_dir) / file);
            desk_header(f, "mlp " + mode + " seed " + std::to_string(cfg.train.seed));
            fit(net, data.train, data.test, cfg.train, &f);
        });
    }
    run_jobs(work, opt.jobs);

    auto s = open_out(fs::path(opt.out_dir) / "mlp_summary.csv");
    desk_header(s, "mlp summary, last eval row per mode");
    s << "mode,eval_loss,eval_acc\n";
    for (size_t i = 0; i < cfg.modes.size(); ++i) {
        EvalSummary e = last_eval(fs::path(opt.out_dir) / files[i]);
        s << cfg.modes[i] << "," << num(e.loss) << "," << num(e.acc) << "\n";
    }
    s.close();
    files.push_back("mlp_summary.csv");
    write_manifest(opt, "mlp", cfg, files);
    files.push_back("manifest.json");
    check_artifacts(opt, files);
}

void cmd_cnn(const CliOptions& opt) {
    ExperimentConfig cfg = cnn_defaults(opt.seed);
    apply_config(opt.config_path, cfg);
    if (!cfg.layer_whitening_from_config) {
        // first conv sees raw pixels and needs the tighter inverse root; the
        // classifier head covariance is rank-limited by the eval batch
        WhiteningConfig first = cfg.train.whitening;
        first.ns_iters = 15;
        WhiteningConfig head = cfg.train.whitening;
        head.block_size = 32;
        cfg.train.layer_whitening[0] = first;
        cfg.train.layer_whitening[4] = head;
    }
    apply_seed_and_centering(opt, cfg);
    SplitPair data = load_cifar_pair(opt, cfg, 640, 500);

    std::vector<std::string> files;
    std::vector<std::function<void()>> work;
    for (const auto& mode : cfg.modes) {
        std::string file = "cnn_" + mode + ".csv";
        files.push_back(file);
        work.push_back([&, mode, file] {
            Network net = build_cnn(mode, cfg.train.seed, cfg.train);
            auto f = open_out(fs::path(opt.out_dir) / file);
            desk_header(f, "cnn " + mode + " seed " + std::to_string(cfg.train.seed));
            fit(net, data.train, data.test, cfg.train, &f);
        });
    }
    run_jobs(work, opt.jobs);

    auto s = open_out(fs::path(opt.out_dir) / "cnn_summary.csv");
    desk_header(s, "cnn summary, last eval row per mode");
    s << "mode,eval_loss,eval_acc\n";
    for (size_t i = 0; i < cfg.modes.size(); ++i) {
        EvalSummary e = last_eval(fs::path(opt.out_dir) / files[i]);
        s << cfg.modes[i] << "," << num(e.loss) << "," << num(e.acc) << "\n";
    }
    s.close();
    files.push_back("cnn_summary.csv");
    write_manifest(opt, "cnn", cfg, files);
    files.push_back("manifest.json");
    check_artifacts(opt, files);
}

// ---------------------------------------------------------------------------
// kernel-viz and sparsity share the 15x15 natural patch pipeline

namespace {

struct PatchModel {
    PatchMatrix pm;
    Vecd mu;
    Matd d;
    bool centered = true;
};

PatchModel natural_patch_model(const CliOptions& opt, const ExperimentConfig& cfg, long count,
                               long k) {
    Dataset nat = load_natural(opt);
    PatchModel m;
    m.centered = cfg.train.whitening.centered;
    m.pm = natural_patch_rows(nat, count, opt.seed, k, cfg.train.whitening.sample_stride);
    auto [mu, cov] = covariance(m.pm, 1, m.centered);
    m.mu = mu;
    m.d = coupled_newton_schulz(cov, cfg.train.whitening.eps, int(cfg.train.whitening.ns_iters));
    return m;
}

} // namespace

void cmd_kernel_viz(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.whitening.eps = 1e-5;
    cfg.train.whitening.ns_iters = 30;
    cfg.train.whitening.sample_stride = 3;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    const long k = 15, channels = 3;
    const long count = cfg.train_count > 0 ? cfg.train_count : 1024;

    PatchModel m = natural_patch_model(opt, cfg, count, k);
    Tensor kern = extract_deconv_kernel(m.d, k, channels);

    std::vector<std::string> files;
    auto cs = open_out(fs::path(opt.out_dir) / "center_surround.csv");
    desk_header(cs, "deconvolution kernel center and surround means");
    cs << "channel,center,ring1,ring2,ring3,surround_mean,sign_ok\n";
    const long c0 = k / 2;
    for (long c = 0; c < channels; ++c) {
        Matd img(k, k);
        for (long yy = 0; yy < k; ++yy)
            for (long xx = 0; xx < k; ++xx) img(yy, xx) = kern.at4(c, c, yy, xx);

        std::string pgm = "kernel_ch" + std::to_string(c) + ".pgm";
        write_pgm((fs::path(opt.out_dir) / pgm).string(), img);
        files.push_back(pgm);

        std::string raw = "kernel_ch" + std::to_string(c) + ".csv";
        auto rf = open_out(fs::path(opt.out_dir) / raw);
        desk_header(rf, "raw self-kernel values, channel " + std::to_string(c));
        rf << "y,x,value\n";
        for (long yy = 0; yy < k; ++yy)
            for (long xx = 0; xx < k; ++xx)
                rf << yy << "," << xx << "," << num(img(yy, xx)) << "\n";
        files.push_back(raw);

        double rings[4] = {0, 0, 0, 0};
        long counts[4] = {0, 0, 0, 0};
        for (long yy = 0; yy < k; ++yy)
            for (long xx = 0; xx < k; ++xx) {
                long cheb = std::max(std::abs(yy - c0), std::abs(xx - c0));
                if (cheb <= 3) {
                    rings[cheb] += img(yy, xx);
                    counts[cheb] += 1;
                }
            }
        const double center = rings[0];
        double surround = 0;
        long nsur = 0;
        for (int r = 1; r <= 3; ++r) {
            surround += rings[r];
            nsur += counts[r];
        }
        surround /= double(nsur);
        const bool ok = center > 0 && surround < 0;
        cs << c << "," << num(center) << "," << num(rings[1] / counts[1]) << ","
           << num(rings[2] / counts[2]) << "," << num(rings[3] / counts[3]) << ","
           << num(surround) << "," << (ok ? 1 : 0) << "\n";
    }
    cs.close();
    files.push_back("center_surround.csv");
    write_manifest(opt, "kernel-viz", cfg, files, {{"patch_count", count}, {"kernel", k}});
    files.push_back("manifest.json");
    check_artifacts(opt, files);
}

void cmd_sparsity(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.whitening.eps = 1e-5;
    cfg.train.whitening.ns_iters = 30;
    cfg.train.whitening.sample_stride = 3;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    const long k = 15;
    const long count = cfg.train_count > 0 ? cfg.train_count : 1024;

    PatchModel m = natural_patch_model(opt, cfg, count, k);
    if (m.centered) m.pm.data.rowwise() -= m.mu.transpose();
    const long ctr = (k / 2) * k + k / 2;  // channel 0 center tap
    std::vector<double> before(size_t(m.pm.data.rows()));
    for (long r = 0; r < m.pm.data.rows(); ++r) before[size_t(r)] = m.pm.data(r, ctr);
    Matd xw = matmul(m.pm.data, m.d);
    std::vector<double> after(size_t(xw.rows()));
    for (long r = 0; r < xw.rows(); ++r) after[size_t(r)] = xw(r, ctr);

    SparsityStats st = sparsity_stats(before, after);
    auto edges = [](const std::vector<double>& v) {
        auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        return std::pair<double, double>(*lo, *hi);
    };
    auto [blo, bhi] = edges(before);
    auto [alo, ahi] = edges(after);
    const long bins = long(st.hist_before.size());

    auto hf = open_out(fs::path(opt.out_dir) / "sparsity_hist.csv");
    desk_header(hf, "center-tap response histograms before and after whitening");
    hf << "bin,before_lo,before_hi,count_before,log_density_before,after_lo,after_hi,"
          "count_after,log_density_after\n";
    for (long b = 0; b < bins; ++b) {
        const double bl = blo + (bhi - blo) * double(b) / double(bins);
        const double bh = blo + (bhi - blo) * double(b + 1) / double(bins);
        const double al = alo + (ahi - alo) * double(b) / double(bins);
        const double ah = alo + (ahi - alo) * double(b + 1) / double(bins);
        hf << b << "," << num(bl) << "," << num(bh) << "," << st.hist_before[size_t(b)] << ","
           << num(st.log_density_before[size_t(b)]) << "," << num(al) << "," << num(ah) << ","
           << st.hist_after[size_t(b)] << "," << num(st.log_density_after[size_t(b)]) << "\n";
    }
    hf.close();

    auto sf = open_out(fs::path(opt.out_dir) / "sparsity_summary.csv");
    desk_header(sf, "excess kurtosis of the center tap before and after whitening");
    sf << "samples,kurtosis_before,kurtosis_after,increase\n";
    sf << before.size() << "," << num(st.kurtosis_before) << "," << num(st.kurtosis_after) << ","
       << num(st.kurtosis_after - st.kurtosis_before) << "\n";
    sf.close();

    write_manifest(opt, "sparsity", cfg, {"sparsity_hist.csv", "sparsity_summary.csv"},
                   {{"patch_count", count}, {"kernel", k}});
    check_artifacts(opt, {"sparsity_hist.csv", "sparsity_summary.csv", "manifest.json"});
}

// ---------------------------------------------------------------------------
// ns-bench: residual traces for the two inverse-root iterations

void cmd_ns_bench(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.whitening.eps = 1e-5;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);

    Dataset nat = load_natural(opt);
    Tensor one = sample_patch_batch(nat, 1, opt.seed);
    PatchSpec spec;
    spec.kernel = 3;
    spec.stride = 1;
    spec.padding = 0;
    spec.channels_in = one.dim(1);
    PatchMatrix pm = im2col(one, spec);
    auto [mu, cov] = covariance(pm, 1, cfg.train.whitening.centered);
    (void)mu;
    const long nc = cov.rows();
    const double eps = cfg.train.whitening.eps;
    const long iters = 1000;

    Matd eye = Matd::Identity(nc, nc);
    Matd ridged = cov;
    ridged.diagonal().array() += eps;
    std::vector<double> res_ridged(size_t(iters) + 1), res_raw(size_t(iters) + 1);
    NsObserver obs = [&](int k, const Matd& dk) {
        Matd dd = matmul(dk, dk);
        res_ridged[size_t(k)] = (matmul(dd, ridged) - eye).norm();
        res_raw[size_t(k)] = (matmul(dd, cov) - eye).norm();
    };
    coupled_newton_schulz(cov, eps, int(iters), obs);
    VanillaResult van = vanilla_newton_schulz(cov, eps, int(iters));

    auto f = open_out(fs::path(opt.out_dir) / "ns_bench.csv");
    desk_header(f, "inverse square root residuals, coupled vs vanilla");
    f << "# residuals are frobenius norms; coupled_raw drops the eps ridge from the target\n";
    f << "step,coupled_ridged,coupled_raw,vanilla_ridged\n";
    for (long s = 0; s <= iters; ++s) {
        const double v = size_t(s) < van.residual_trace.size() ? van.residual_trace[size_t(s)]
                                                               : INFINITY;
        f << s << "," << num(res_ridged[size_t(s)]) << "," << num(res_raw[size_t(s)]) << ","
          << num(v) << "\n";
    }
    f.close();

    // eigenvalue-matched comparison: ridge proportional to the spectrum top so
    // both iterations sit in their convergent regime, then check against the
    // dense oracle
    EigResult eg = sym_eig(cov);
    const double eps_match = 0.01 * eg.values(eg.values.size() - 1);
    Matd oracle = inverse_sqrt_oracle(cov, eps_match);
    Matd ridged_match = cov;
    ridged_match.diagonal().array() += eps_match;
    double res15_coupled = NAN;
    NsObserver obs15 = [&](int k, const Matd& dk) {
        if (k == 15) {
            Matd dd = matmul(dk, dk);
            res15_coupled = (matmul(dd, ridged_match) - eye).norm();
        }
    };
    Matd dc = coupled_newton_schulz(cov, eps_match, 20, obs15);
    VanillaResult v20 = vanilla_newton_schulz(cov, eps_match, 20);
    const double res15_vanilla =
        v20.residual_trace.size() > 15 ? v20.residual_trace[15] : INFINITY;
    const double relerr_c = (dc - oracle).norm() / oracle.norm();
    const double relerr_v = (v20.d - oracle).norm() / oracle.norm();

    auto mf = open_out(fs::path(opt.out_dir) / "ns_match.csv");
    desk_header(mf, "oracle agreement at a spectrum-matched ridge");
    mf << "eps_match,relerr_coupled_20,relerr_vanilla_20,res15_coupled,res15_vanilla\n";
    mf << num(eps_match) << "," << num(relerr_c) << "," << num(relerr_v) << ","
       << num(res15_coupled) << "," << num(res15_vanilla) << "\n";
    mf.close();

    write_manifest(opt, "ns-bench", cfg, {"ns_bench.csv", "ns_match.csv"},
                   {{"cov_dim", nc}, {"eps", eps}, {"eps_match", eps_match}});
    check_artifacts(opt, {"ns_bench.csv", "ns_match.csv", "manifest.json"});
}

// ---------------------------------------------------------------------------
// timing: the full layer grid at a desk-scale batch

void cmd_timing(const CliOptions& opt) {
    struct GridRow {
        long h, w, c_in, c_out, groups, k, stride;
    };
    static const GridRow grid[] = {
        {256, 256, 3, 64, 1, 3, 3},     {128, 128, 64, 128, 1, 3, 3},
        {64, 64, 128, 256, 2, 3, 3},    {32, 32, 256, 512, 4, 3, 3},
        {16, 16, 512, 512, 8, 3, 3},    {128, 128, 64, 128, 64, 3, 3},
        {64, 64, 128, 256, 128, 3, 3},  {32, 32, 256, 512, 256, 3, 3},
        {16, 16, 512, 512, 512, 3, 3},  {128, 128, 64, 128, 32, 3, 3},
        {64, 64, 128, 256, 32, 3, 3},   {32, 32, 256, 512, 32, 3, 3},
        {16, 16, 512, 512, 32, 3, 3},   {256, 256, 3, 64, 1, 3, 5},
        {128, 128, 64, 128, 1, 3, 5},   {256, 256, 3, 64, 1, 7, 3},
        {256, 256, 3, 64, 1, 7, 5},     {256, 256, 3, 64, 1, 7, 7},
        {256, 256, 3, 64, 1, 11, 3},    {256, 256, 3, 64, 1, 11, 5},
        {256, 256, 3, 64, 1, 11, 7},    {256, 256, 3, 64, 1, 11, 11},
    };

    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.batch_size = 8;
    cfg.train.whitening.eps = 1e-5;
    cfg.train.whitening.ns_iters = 5;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    const long batch = cfg.train.batch_size;

    auto f = open_out(fs::path(opt.out_dir) / "timing.csv");
    desk_header(f, "per-stage wall clock over the layer grid");
    f << "# batch=" << batch << ", ns_iters=" << cfg.train.whitening.ns_iters
      << "; times are milliseconds and machine dependent\n";
    f << "row,h,w,c_in,c_out,groups,kernel,cov_stride,block_channels,ms_im2col,ms_cov,ms_ns,"
         "ms_conv,ratio_prep_vs_conv\n";

    RandomStream rng(opt.seed);
    long row_id = 0;
    for (const GridRow& g : grid) {
        PatchSpec spec;
        spec.kernel = g.k;
        spec.stride = 1;
        spec.padding = g.k / 2;
        spec.channels_in = g.c_in;
        const long block = g.c_in / g.groups;

        Tensor x({batch, g.c_in, g.h, g.w});
        for (double& v : x.data) v = rng.uniform();

        double t0 = now_ms();
        PatchMatrix pm = im2col(x, spec);
        double t1 = now_ms();
        std::vector<GroupRange> ranges = partition_groups(spec, block);
        std::vector<Matd> covs;
        covs.reserve(ranges.size());
        for (const GroupRange& gr : ranges)
            covs.push_back(covariance(pm, gr, g.stride, cfg.train.whitening.centered).second);
        double t2 = now_ms();
        for (const Matd& c : covs)
            coupled_newton_schulz(c, cfg.train.whitening.eps,
                                  int(cfg.train.whitening.ns_iters));
        double t3 = now_ms();
        Matd w;
        {
            RandomStream wrng(opt.seed + 7);
            w = he_uniform(wrng, spec.cols(), g.c_out);
        }
        Matd y = matmul(pm.data, w);
        double t4 = now_ms();
        (void)y;

        const double prep = (t1 - t0) + (t2 - t1) + (t3 - t2);
        const double conv = t4 - t3;
        f << row_id++ << "," << g.h << "," << g.w << "," << g.c_in << "," << g.c_out << ","
          << g.groups << "," << g.k << "," << g.stride << "," << block << "," << num(t1 - t0)
          << "," << num(t2 - t1) << "," << num(t3 - t2) << "," << num(conv) << ","
          << num(prep / conv) << "\n";
        f.flush();
    }
    f.close();

    write_manifest(opt, "timing", cfg, {"timing.csv"}, {{"batch", batch}});
    check_artifacts(opt, {"timing.csv", "manifest.json"});
}

// ---------------------------------------------------------------------------
// blur: kernel recovery, whitened descent vs raw descent at its best stable lr

void cmd_blur(const CliOptions& opt) {
    ExperimentConfig cfg;
    cfg.train.seed = opt.seed;
    cfg.train.whitening.eps = 1e-5;
    cfg.train.whitening.ns_iters = 15;
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);

    RandomStream rng(opt.seed);
    Tensor rgb = natural_rgb(rng, 64, 64);
    Tensor gray({64, 64});
    for (long y = 0; y < 64; ++y)
        for (long x = 0; x < 64; ++x) gray.data[size_t(y * 64 + x)] = rgb.data[size_t(y * 64 + x)];

    const long k = 5;
    BlurProblem prob = make_blur_problem(gray, k, 1.0, 0.0, opt.seed + 1);
    PatchSpec spec;
    spec.kernel = k;
    spec.stride = 1;
    spec.padding = 0;
    spec.channels_in = 1;
    PatchMatrix pm = im2col(prob.x_clean, spec);
    const Matd& x = pm.data;
    const long n = x.rows();

    // the model has no intercept, so second moments are the right statistics
    auto [mu, cov] = covariance(pm, 1, false);
    (void)mu;
    EigResult eg = sym_eig(cov);
    const double lmin = eg.values(0), lmax = eg.values(eg.values.size() - 1);
    const double lr_raw = 2.0 / (lmax + lmin);
    Matd d = coupled_newton_schulz(cov, cfg.train.whitening.eps, int(cfg.train.whitening.ns_iters));
    Matd xw = matmul(x, d);

    Vecd kvec(k * k);
    for (long yy = 0; yy < k; ++yy)
        for (long xx = 0; xx < k; ++xx) kvec(yy * k + xx) = prob.true_kernel(yy, xx);
    const Vecd& y = prob.y_blurred;
    const double knorm = kvec.norm();

    const long iters_w = 10, iters_r = 60;
    std::vector<double> err_w(size_t(iters_w) + 1, NAN), err_r(size_t(iters_r) + 1, NAN);
    {
        Vecd v = Vecd::Zero(k * k);
        err_w[0] = 1.0;
        for (long it = 1; it <= iters_w; ++it) {
            Vecd grad = xw.transpose() * (xw * v - y) / double(n);
            v -= grad;
            err_w[size_t(it)] = (d * v - kvec).norm() / knorm;
        }
    }
    {
        Vecd w = Vecd::Zero(k * k);
        err_r[0] = 1.0;
        for (long it = 1; it <= iters_r; ++it) {
            Vecd grad = x.transpose() * (x * w - y) / double(n);
            w -= lr_raw * grad;
            err_r[size_t(it)] = (w - kvec).norm() / knorm;
        }
    }
    auto first_below = [](const std::vector<double>& e, double tol) {
        for (size_t i = 1; i < e.size(); ++i)
            if (std::isfinite(e[i]) && e[i] < tol) return double(i);
        return double(NAN);
    };

    auto f = open_out(fs::path(opt.out_dir) / "blur.csv");
    desk_header(f, "gaussian blur kernel recovery from a synthetic natural image");
    f << "# whitened descent at lr 1, raw descent at its best stable lr 2/(lmax+lmin)\n";
    f << "iter,relerr_whitened,relerr_raw\n";
    for (long it = 0; it <= iters_r; ++it) {
        const double ew = it <= iters_w ? err_w[size_t(it)] : NAN;
        f << it << "," << num(ew) << "," << num(err_r[size_t(it)]) << "\n";
    }
    f.close();

    auto sf = open_out(fs::path(opt.out_dir) / "blur_summary.csv");
    desk_header(sf, "blur recovery summary");
    sf << "cond,lr_raw,relerr_whitened_at_5,relerr_raw_at_50,iters_to_1e3_whitened,"
          "iters_to_1e3_raw\n";
    sf << num(lmax / lmin) << "," << num(lr_raw) << "," << num(err_w[5]) << "," << num(err_r[50])
       << "," << num(first_below(err_w, 1e-3)) << "," << num(first_below(err_r, 1e-3)) << "\n";
    sf.close();

    write_manifest(opt, "blur", cfg, {"blur.csv", "blur_summary.csv"},
                   {{"kernel", k}, {"image", "synthetic natural 64x64"}});
    check_artifacts(opt, {"blur.csv", "blur_summary.csv", "manifest.json"});
}

// ---------------------------------------------------------------------------
// batchsize: published presets that fit on a desk machine

void cmd_batchsize(const CliOptions& opt) {
    ExperimentConfig cfg = mlp_defaults(opt.seed);
    cfg.modes = {"deconv"};
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    SplitPair data = load_idx_pair(opt, "mnist", cfg, 1500, 1000);
    flatten_images(data.train);
    flatten_images(data.test);
    const long ntrain = data.train.images.dim(0);

    struct Preset {
        long batch;
        double lr, eps;
        long iters;
    };
    // the batch-2 and batch-2048 presets are omitted: one is a desk-runtime
    // problem, the other exceeds the desk corpus
    const std::vector<Preset> presets = {
        {8, 0.01, 0.01, 2}, {32, 0.01, 1e-5, 5}, {128, 0.1, 1e-5, 5}, {512, 0.5, 1e-5, 5}};

    std::vector<std::string> files;
    std::vector<std::function<void()>> work;
    std::vector<Preset> ran;
    for (const Preset& p : presets) {
        if (p.batch > ntrain) continue;
        ran.push_back(p);
        std::string file = "batchsize_b" + std::to_string(p.batch) + ".csv";
        files.push_back(file);
        work.push_back([&, p, file] {
            TrainConfig t = cfg.train;
            t.batch_size = p.batch;
            t.lr = p.lr;
            t.whitening.eps = p.eps;
            t.whitening.ns_iters = p.iters;
            Network net = build_mlp("deconv", t.seed, t);
            auto f = open_out(fs::path(opt.out_dir) / file);
            desk_header(f, "deconv mlp at batch " + std::to_string(p.batch));
            fit(net, data.train, data.test, t, &f);
        });
    }
    run_jobs(work, opt.jobs);

    auto s = open_out(fs::path(opt.out_dir) / "batchsize.csv");
    desk_header(s, "batch size presets, deconv mlp, last eval row each");
    s << "batch,lr,eps,ns_iters,eval_loss,eval_acc\n";
    for (size_t i = 0; i < ran.size(); ++i) {
        EvalSummary e = last_eval(fs::path(opt.out_dir) / files[i]);
        s << ran[i].batch << "," << num(ran[i].lr) << "," << num(ran[i].eps) << ","
          << ran[i].iters << "," << num(e.loss) << "," << num(e.acc) << "\n";
    }
    s.close();
    files.push_back("batchsize.csv");
    write_manifest(opt, "batchsize", cfg, files);
    files.push_back("manifest.json");
    check_artifacts(opt, files);
}

// ---------------------------------------------------------------------------
// decay: weight decay sweep for the bn and deconv classifiers

void cmd_decay(const CliOptions& opt) {
    ExperimentConfig cfg = mlp_defaults(opt.seed);
    cfg.modes = {"bn", "deconv"};
    apply_config(opt.config_path, cfg);
    apply_seed_and_centering(opt, cfg);
    SplitPair data = load_idx_pair(opt, "mnist", cfg, 3000, 1000);
    flatten_images(data.train);
    flatten_images(data.test);

    const std::vector<double> wds = {5e-4, 5e-3};
    std::vector<std::string> files;
    std::vector<std::pair<std::string, double>> runs;
    std::vector<std::function<void()>> work;
    for (const auto& mode : cfg.modes) {
        for (double wd : wds) {
            runs.push_back({mode, wd});
            std::string file = "decay_" + mode + "_" + num(wd) + ".csv";
            files.push_back(file);
            work.push_back([&, mode, wd, file] {
                TrainConfig t = cfg.train;
                t.weight_decay = wd;
                Network net = build_mlp(mode, t.seed, t);
                auto f = open_out(fs::path(opt.out_dir) / file);
                desk_header(f, "mlp " + mode + " weight decay " + num(wd));
                fit(net, data.train, data.test, t, &f);
            });
        }
    }
    run_jobs(work, opt.jobs);

    auto s = open_out(fs::path(opt.out_dir) / "decay.csv");
    desk_header(s, "weight decay sweep, last eval row each");
    s << "mode,weight_decay,eval_loss,eval_acc\n";
    for (size_t i = 0; i < runs.size(); ++i) {
        EvalSummary e = last_eval(fs::path(opt.out_dir) / files[i]);
        s << runs[i].first << "," << num(runs[i].second) << "," << num(e.loss) << ","
          << num(e.acc) << "\n";
    }
    s.close();
    files.push_back("decay.csv");
    write_manifest(opt, "decay", cfg, files);
    files.push_back("manifest.json");
    check_artifacts(opt, files);
}

// ---------------------------------------------------------------------------

int run_subcommand(const CliOptions& opt) {
    using Fn = void (*)(const CliOptions&);
    static const std::map<std::string, Fn> cmds = {
        {"gen-data", cmd_gen_data}, {"regress", cmd_regress},   {"mlp", cmd_mlp},
        {"cnn", cmd_cnn},           {"kernel-viz", cmd_kernel_viz}, {"ns-bench", cmd_ns_bench},
        {"sparsity", cmd_sparsity}, {"timing", cmd_timing},     {"blur", cmd_blur},
        {"batchsize", cmd_batchsize}, {"decay", cmd_decay},
    };
    auto it = cmds.find(opt.subcommand);
    if (it == cmds.end()) {
        std::cerr << "unknown subcommand '" << opt.subcommand << "'\n";
        return 2;
    }
    try {
        if (opt.jobs < 1) throw contract_error("--jobs must be positive");
        fs::create_directories(opt.out_dir);
        it->second(opt);
    } catch (const numerical_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const format_error& e) {
        std::cerr << "bad input: " << e.what() << "\n";
        return 2;
    } catch (const contract_error& e) {
        std::cerr << "bad input: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "bad input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace netdeconv
