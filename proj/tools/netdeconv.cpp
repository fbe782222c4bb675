#include <CLI11.hpp>

#include "netdeconv/experiments.hpp"

int main(int argc, char** argv) {
    CLI::App app{"network deconvolution experiments"};
    app.fallthrough();
    netdeconv::CliOptions opt;

    app.add_option("--data-dir", opt.data_dir, "dataset root directory")->capture_default_str();
    app.add_option("--out", opt.out_dir, "output directory for artifacts")->capture_default_str();
    app.add_option("--seed", opt.seed, "rng seed")->capture_default_str();
    app.add_option("--config", opt.config_path, "JSON file with config overrides");
    app.add_flag("--uncentered", opt.uncentered, "use second moments instead of covariance");
    app.add_option("--jobs", opt.jobs, "worker processes for independent runs")
        ->capture_default_str();
    app.add_flag("--self-check", opt.self_check, "re-parse artifacts after writing them");

    app.require_subcommand(1);
    const std::vector<std::pair<std::string, std::string>> subs = {
        {"gen-data", "write the synthetic desk corpora under --data-dir"},
        {"regress", "linear regression suite with plain, bn and deconv runs"},
        {"mlp", "train the 784-128-128-128-10 classifier per mode"},
        {"cnn", "train the small convolutional classifier per mode"},
        {"kernel-viz", "deconvolution kernel images from natural patches"},
        {"ns-bench", "residual traces for coupled and vanilla iterations"},
        {"sparsity", "center-tap response histograms before and after whitening"},
        {"timing", "per-stage wall clock over the layer grid"},
        {"blur", "blur kernel recovery, whitened vs raw descent"},
        {"batchsize", "batch size presets for the deconv mlp"},
        {"decay", "weight decay sweep for bn and deconv"},
    };
    for (const auto& [name, help] : subs) app.add_subcommand(name, help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    opt.subcommand = app.get_subcommands().at(0)->get_name();
    return netdeconv::run_subcommand(opt);
}
