#pragma once

#include <string>
#include <vector>

#include "netdeconv/data_io.hpp"
#include "netdeconv/trainer.hpp"

namespace netdeconv {

struct CliOptions {
    std::string subcommand;
    std::string data_dir = "data";
    std::string out_dir = "out";
    uint64_t seed = 1;
    std::string config_path;
    bool uncentered = false;
    int jobs = 1;
    bool self_check = false;
};

// Knobs on top of the trainer config, overridable from --config JSON.
// Subset counts of -1 mean "use the command default".
struct ExperimentConfig {
    TrainConfig train;
    long train_count = -1;
    long test_count = -1;
    std::vector<std::string> modes;
    bool layer_whitening_from_config = false;
};

// Merges FILE.json onto cfg. Unknown keys are rejected so typos surface as
// exit code 2 instead of silently running the defaults.
void apply_config(const std::string& path, ExperimentConfig& cfg);

// Dispatches opt.subcommand; translates errors into process exit codes
// (0 ok, 2 bad input, 3 numerical failure).
int run_subcommand(const CliOptions& opt);

void cmd_gen_data(const CliOptions& opt);
void cmd_regress(const CliOptions& opt);
void cmd_mlp(const CliOptions& opt);
void cmd_cnn(const CliOptions& opt);
void cmd_kernel_viz(const CliOptions& opt);
void cmd_ns_bench(const CliOptions& opt);
void cmd_sparsity(const CliOptions& opt);
void cmd_timing(const CliOptions& opt);
void cmd_blur(const CliOptions& opt);
void cmd_batchsize(const CliOptions& opt);
void cmd_decay(const CliOptions& opt);

// model builders and their training defaults, shared with the test drivers
Network build_mlp(const std::string& mode, uint64_t seed, const TrainConfig& cfg);
Network build_cnn(const std::string& mode, uint64_t seed, const TrainConfig& cfg);
ExperimentConfig mlp_defaults(uint64_t seed);
ExperimentConfig cnn_defaults(uint64_t seed);

ClassificationData to_classification(const Dataset& d);

// 8-bit binary PGM (P5), min-max normalized on write
void write_pgm(const std::string& path, const Eigen::Ref<const Matd>& img);
Matd read_pgm(const std::string& path);

// patch rows of `count` sampled images, spatially subsampled by `stride`
PatchMatrix natural_patch_rows(const Dataset& natural, long count, uint64_t seed,
                               long k, long stride);

} // namespace netdeconv
