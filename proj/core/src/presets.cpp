#include "cfmr/model_config.hpp"

#include "cfmr/common.hpp"

namespace cfmr {

std::string task_name(Task t) {
    switch (t) {
        case Task::asr: return "asr";
        case Task::st: return "st";
        case Task::ss: return "ss";
        case Task::tts: return "tts";
    }
    return "?";
}

Task task_from_name(const std::string& name) {
    if (name == "asr") return Task::asr;
    if (name == "st") return Task::st;
    if (name == "ss") return Task::ss;
    if (name == "tts") return Task::tts;
    throw ConfigError("unknown task '" + name + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("invalid config field " + field + ": " + why);
    };
    if (d_att <= 0) fail("d_att", "must be positive");
    if (heads <= 0) fail("heads", "must be positive");
    if (d_att % heads != 0) fail("heads", "must divide d_att");
    if (d_ff <= 0) fail("d_ff", "must be positive");
    if (d_ff_dec == 0 || d_ff_dec < -1) fail("d_ff_dec", "must be positive or -1");
    if (enc_blocks < 0) fail("enc_blocks", "must be non-negative");
    if (dec_blocks < 0) fail("dec_blocks", "must be non-negative");
    if (kernel <= 0 || kernel % 2 == 0) fail("kernel", "must be a positive odd number");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout", "must be in [0, 1)");
    if (ctc_weight < 0.0 || ctc_weight > 1.0) fail("ctc_weight", "must be in [0, 1]");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) fail("label_smoothing", "must be in [0, 1)");
    if (feat_dim <= 0) fail("feat_dim", "must be positive");
    if (vocab <= 0 && task != Task::ss) fail("vocab", "must be positive");
    if (task == Task::ss && (ss_speakers < 1 || ss_speakers > 4)) {
        fail("ss_speakers", "must be in [1, 4]");
    }
    if (task == Task::tts && tts_feat_dim <= 0) fail("tts_feat_dim", "must be positive");
    if (subsample_channels <= 0) fail("subsample_channels", "must be positive");
    if (dur_hidden <= 0) fail("dur_hidden", "must be positive");
    if (psm_clamp <= 0.0) fail("psm_clamp", "must be positive");
}

ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    if (name == "default") {
        // Enc=12, Dec=6, d_ff=2048, H=4, d_att=256
    } else if (name == "librispeech") {
        c.heads = 8;
        c.d_att = 512;
    } else if (name == "ss") {
        c.task = Task::ss;
        c.enc_blocks = 3;
        c.dec_blocks = 0;
        c.d_ff = 896;
        c.d_att = 1024;
        c.heads = 8;
        c.feat_dim = 129;
        c.ss_speakers = 2;
    } else if (name == "tts-fs") {
        c.task = Task::tts;
        c.enc_blocks = 6;
        c.dec_blocks = 6;
        c.d_att = 368;
        c.d_ff = 1536;
        c.heads = 2;
        c.vocab = 80;
    } else if (name == "tts-fs2") {
        c.task = Task::tts;
        c.enc_blocks = 4;
        c.dec_blocks = 4;
        c.d_att = 368;
        c.d_ff = 1536;
        c.heads = 2;
        c.vocab = 80;
    } else if (name == "st-small") {
        // halved encoder feed-forward width; decoder keeps 2048
        c.task = Task::st;
        c.d_ff = 1024;
        c.d_ff_dec = 2048;
    } else if (name == "transformer") {
        // attention + feed-forward control model: no convolution module,
        // absolute positions instead of the relative scheme
        c.use_conv_module = false;
        c.use_rel_pos = false;
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    c.validate();
    return c;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{
        "default", "librispeech", "ss", "tts-fs", "tts-fs2", "st-small", "transformer",
    };
    return names;
}

}  // namespace cfmr
