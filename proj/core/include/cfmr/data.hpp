#pragma once

// Synthetic desk-scale tasks. Generation is a pure function of (spec, seed):
// the same spec always yields the same bytes.

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "cfmr/common.hpp"

namespace cfmr {

struct TaskSpec {
    enum class Kind { copy, mixture, tts_toy };
    Kind kind = Kind::copy;
    int64_t vocab = 8;
    int64_t min_len = 3;
    int64_t max_len = 10;
    int64_t feat_dim = 16;  // copy feature width / tts feature width
    int64_t sources = 2;    // mixture speakers
    int64_t samples = 64;
    double noise = 0.05;
    double mix_seconds = 0.8;  // mixture duration (8 kHz analogue)
    uint64_t seed = 0;

    void validate() const;
};

std::string task_kind_name(TaskSpec::Kind k);
TaskSpec::Kind task_kind_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// STFT with a sqrt-Hann window, 50% overlap, centered. 256-point frames give
// 129 bins (the 8 kHz / 32 ms / 16 ms analogue).
// ---------------------------------------------------------------------------

struct Stft {
    int64_t frame = 256;
    int64_t shift = 128;

    int64_t bins() const { return frame / 2 + 1; }
    int64_t frames_for(int64_t n_samples) const;

    // [frames x bins] row-major complex spectrum.
    std::vector<std::complex<double>> forward(const std::vector<double>& x) const;
    // overlap-add inverse, trimmed back to n_samples.
    std::vector<double> inverse(const std::vector<std::complex<double>>& z, int64_t n_samples) const;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct CopySample {
    std::vector<int64_t> tokens;
    std::vector<float> feats;  // [T x F], T = 4 * tokens.size()
    int64_t T = 0, F = 0;
};

struct CopyDataset {
    TaskSpec spec;
    std::vector<CopySample> items;
};

struct MixtureSample {
    int64_t T = 0, F = 0;  // STFT frames and bins
    std::vector<float> mix_mag;                               // [T x F]
    std::vector<std::complex<double>> mix_spec;               // [T x F]
    std::vector<std::vector<std::complex<double>>> src_spec;  // [S][T x F]
    std::vector<double> mix_wave;
    std::vector<std::vector<double>> src_wave;  // [S][N]
};

struct MixtureDataset {
    TaskSpec spec;
    std::vector<MixtureSample> items;
};

struct TtsSample {
    std::vector<int64_t> tokens;
    std::vector<int64_t> durations;  // per token, in [1, 5]
    std::vector<float> feats;        // [T x D], T = sum(durations)
    int64_t T = 0, D = 0;
};

struct TtsDataset {
    TaskSpec spec;
    std::vector<TtsSample> items;
};

CopyDataset gen_copy_task(const TaskSpec& spec);
MixtureDataset gen_mixture_task(const TaskSpec& spec);
TtsDataset gen_tts_task(const TaskSpec& spec);

// ---------------------------------------------------------------------------
// Dataset files ("CFDS"): binary, little-endian, written by `gen` and read
// back by train/eval/decode.
// ---------------------------------------------------------------------------

void save_copy_dataset(const std::string& path, const CopyDataset& ds);
void save_mixture_dataset(const std::string& path, const MixtureDataset& ds);
void save_tts_dataset(const std::string& path, const TtsDataset& ds);

TaskSpec::Kind peek_dataset_kind(const std::string& path);
CopyDataset load_copy_dataset(const std::string& path);
MixtureDataset load_mixture_dataset(const std::string& path);
TtsDataset load_tts_dataset(const std::string& path);

}  // namespace cfmr
