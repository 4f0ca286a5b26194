#pragma once

// Architectural hyperparameters and the named presets.

#include <cstdint>
#include <string>
#include <vector>

namespace cfmr {

enum class Task { asr, st, ss, tts };

std::string task_name(Task t);
Task task_from_name(const std::string& name);

struct ModelConfig {
    Task task = Task::asr;

    int64_t enc_blocks = 12;
    int64_t dec_blocks = 6;
    int64_t d_att = 256;
    int64_t d_ff = 2048;
    int64_t d_ff_dec = -1;  // -1: same as d_ff
    int64_t heads = 4;
    int64_t kernel = 15;
    double dropout = 0.1;

    int64_t vocab = 1000;    // output tokens (asr/st) or input tokens (tts)
    int64_t feat_dim = 83;   // input feature width
    int64_t subsample_channels = 256;

    int64_t ss_speakers = 2;

    int64_t tts_feat_dim = 80;
    int64_t dur_hidden = 256;

    double ctc_weight = 0.3;
    double label_smoothing = 0.1;
    double dur_loss_weight = 1.0;
    double psm_clamp = 1.0;

    // Block variants: turning both off yields a plain Transformer encoder
    // (single-scale attention with absolute positions would also drop the
    // paired feed-forwards; those stay, see the transformer preset notes).
    bool use_conv_module = true;
    bool use_rel_pos = true;
    bool scale_per_head = false;  // score scale 1/sqrt(d_att/H) instead of 1/sqrt(d_att)

    double ln_eps = 1e-12;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    int64_t dec_ff() const { return d_ff_dec > 0 ? d_ff_dec : d_ff; }

    // Throws ConfigError naming the offending field.
    void validate() const;
};

// Presets: default, librispeech, ss, tts-fs, tts-fs2, st-small, transformer.
ModelConfig preset_config(const std::string& name);
const std::vector<std::string>& preset_names();

}  // namespace cfmr
