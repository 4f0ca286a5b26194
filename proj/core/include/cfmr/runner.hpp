#pragma once

// End-to-end command implementations shared by the CLI and the test suites:
// dataset generation, training with checkpointing and averaging, evaluation,
// decoding, and the gradient suite.

#include <map>
#include <string>
#include <vector>

#include "cfmr/data.hpp"
#include "cfmr/model_config.hpp"
#include "cfmr/train.hpp"

namespace cfmr {

struct RunConfig {
    TaskSpec task;
    std::string data_path;  // when set, load the dataset instead of generating

    std::string preset;  // starting point for the model config
    ModelConfig model;

    SchedulerConfig sched;

    int64_t steps = 1000;
    int64_t batch_size = 8;
    int64_t eval_every = 0;  // 0: steps / 10
    int64_t keep_best = 10;
    double clip_norm = 5.0;
    uint64_t seed = 0;
    std::string out_dir = "run";
    bool resume = false;

    bool specaugment = false;
    SpecAugmentConfig specaug;

    std::string checkpoint;   // eval/decode input; defaults to out_dir/averaged.cfmr
    int64_t val_samples = 16; // held-in validation subset for checkpoint selection
};

// key = value with [section] headers; keys are returned as "section.key".
std::map<std::string, std::string> read_config_file(const std::string& path);

// Applies one "section.key" assignment; unknown keys raise ConfigError.
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// Fills model fields that are dictated by the task/dataset (feature widths,
// vocabulary, speaker count) and validates everything. Prints a warning when
// the learning-rate coefficient is outside the conventional {1, 2, 5, 10}.
void reconcile_run_config(RunConfig& cfg);

// Subcommands. All return a process exit code (0 on success); they throw
// ConfigError / NumericError / IoError for the CLI to map onto exit codes.
int cmd_gen(const RunConfig& cfg, const std::string& out_path);
int cmd_train(RunConfig cfg);

struct EvalReport {
    std::vector<std::pair<std::string, double>> metrics;
};

EvalReport cmd_eval(RunConfig cfg);
int cmd_decode(RunConfig cfg, int64_t n_show);
int cmd_average(const std::vector<std::string>& inputs, const std::string& out_path);

// The 64-bit module gradient suite (also the first acceptance criterion).
struct GradSuiteEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool ok = false;
};

std::vector<GradSuiteEntry> run_gradient_suite(double tol = 1e-4);

}  // namespace cfmr
