#include "cfmr/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace cfmr {

void TaskSpec::validate() const {
    if (vocab < 1) throw ConfigError("task vocab must be positive");
    if (min_len < 1 || max_len < min_len) throw ConfigError("task length range invalid");
    if (kind == Kind::copy && min_len < 2) {
        throw ConfigError("copy task needs min_len >= 2 so the stride-4 frontend has enough frames");
    }
    if (feat_dim < 1) throw ConfigError("task feat_dim must be positive");
    if (kind == Kind::mixture && (sources < 2 || sources > 3)) {
        throw ConfigError("mixture task supports 2 or 3 sources");
    }
    if (samples < 1) throw ConfigError("task sample count must be positive");
    if (noise < 0.0) throw ConfigError("task noise must be non-negative");
    if (mix_seconds <= 0.1) throw ConfigError("mixture duration too short");
}

std::string task_kind_name(TaskSpec::Kind k) {
    switch (k) {
        case TaskSpec::Kind::copy: return "copy";
        case TaskSpec::Kind::mixture: return "mixture";
        case TaskSpec::Kind::tts_toy: return "tts_toy";
    }
    return "?";
}

TaskSpec::Kind task_kind_from_name(const std::string& name) {
    if (name == "copy") return TaskSpec::Kind::copy;
    if (name == "mixture") return TaskSpec::Kind::mixture;
    if (name == "tts_toy") return TaskSpec::Kind::tts_toy;
    throw ConfigError("unknown task '" + name + "'");
}

// ---------------------------------------------------------------------------
// STFT
// ---------------------------------------------------------------------------

int64_t Stft::frames_for(int64_t n_samples) const {
    const int64_t padded = n_samples + frame;  // frame/2 of centering each side
    return (padded - frame) / shift + 1;
}

namespace {

std::vector<double> sqrt_hann(int64_t n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double h = 0.5 * (1.0 - std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n)));
        w[static_cast<size_t>(i)] = std::sqrt(h);
    }
    return w;
}

}  // namespace

std::vector<std::complex<double>> Stft::forward(const std::vector<double>& x) const {
    const int64_t n = static_cast<int64_t>(x.size());
    const int64_t pad = frame / 2;
    const int64_t n_frames = frames_for(n);
    const int64_t n_bins = bins();
    const auto win = sqrt_hann(frame);

    std::vector<std::complex<double>> out(static_cast<size_t>(n_frames * n_bins));
    std::vector<double> buf(static_cast<size_t>(frame));
    for (int64_t m = 0; m < n_frames; ++m) {
        const int64_t start = m * shift - pad;
        for (int64_t i = 0; i < frame; ++i) {
            const int64_t t = start + i;
            buf[static_cast<size_t>(i)] = (t >= 0 && t < n) ? x[static_cast<size_t>(t)] * win[static_cast<size_t>(i)] : 0.0;
        }
        // direct DFT; 256 points is cheap at this scale
        for (int64_t k = 0; k < n_bins; ++k) {
            double re = 0.0, im = 0.0;
            for (int64_t i = 0; i < frame; ++i) {
                const double arg = -2.0 * M_PI * static_cast<double>(k * i) / static_cast<double>(frame);
                re += buf[static_cast<size_t>(i)] * std::cos(arg);
                im += buf[static_cast<size_t>(i)] * std::sin(arg);
            }
            out[static_cast<size_t>(m * n_bins + k)] = {re, im};
        }
    }
    return out;
}

std::vector<double> Stft::inverse(const std::vector<std::complex<double>>& z, int64_t n_samples) const {
    const int64_t n_bins = bins();
    const int64_t n_frames = static_cast<int64_t>(z.size()) / n_bins;
    const int64_t pad = frame / 2;
    const auto win = sqrt_hann(frame);

    const int64_t total = (n_frames - 1) * shift + frame;
    std::vector<double> acc(static_cast<size_t>(total), 0.0);
    std::vector<double> wsum(static_cast<size_t>(total), 0.0);
    std::vector<double> buf(static_cast<size_t>(frame));
    for (int64_t m = 0; m < n_frames; ++m) {
        // inverse DFT using conjugate symmetry of a real signal's spectrum
        for (int64_t i = 0; i < frame; ++i) {
            double v = 0.0;
            for (int64_t k = 0; k < n_bins; ++k) {
                const double arg = 2.0 * M_PI * static_cast<double>(k * i) / static_cast<double>(frame);
                const auto& c = z[static_cast<size_t>(m * n_bins + k)];
                const double term = c.real() * std::cos(arg) - c.imag() * std::sin(arg);
                v += (k == 0 || k == n_bins - 1) ? term : 2.0 * term;
            }
            buf[static_cast<size_t>(i)] = v / static_cast<double>(frame);
        }
        for (int64_t i = 0; i < frame; ++i) {
            acc[static_cast<size_t>(m * shift + i)] += buf[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
            wsum[static_cast<size_t>(m * shift + i)] += win[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
        }
    }
    std::vector<double> out(static_cast<size_t>(n_samples), 0.0);
    for (int64_t t = 0; t < n_samples; ++t) {
        const int64_t s = t + pad;
        if (s < total && wsum[static_cast<size_t>(s)] > 1e-8) {
            out[static_cast<size_t>(t)] = acc[static_cast<size_t>(s)] / wsum[static_cast<size_t>(s)];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

CopyDataset gen_copy_task(const TaskSpec& spec) {
    spec.validate();
    CopyDataset ds;
    ds.spec = spec;
    const Rng rng(spec.seed);
    const Rng patterns = rng.child("patterns");

    // per-token feature patterns in [-1, 1]
    std::vector<float> table(static_cast<size_t>(spec.vocab * spec.feat_dim));
    for (size_t i = 0; i < table.size(); ++i) {
        table[i] = static_cast<float>(patterns.uniform(i, -1.0, 1.0));
    }

    for (int64_t s = 0; s < spec.samples; ++s) {
        const Rng r = rng.child("sample").child(static_cast<uint64_t>(s));
        CopySample item;
        const int64_t len = spec.min_len + r.below(0, spec.max_len - spec.min_len + 1);
        for (int64_t i = 0; i < len; ++i) {
            item.tokens.push_back(r.below(1 + static_cast<uint64_t>(i), spec.vocab));
        }
        item.T = 4 * len;
        item.F = spec.feat_dim;
        item.feats.resize(static_cast<size_t>(item.T * item.F));
        const Rng rn = r.child("noise");
        for (int64_t t = 0; t < item.T; ++t) {
            const int64_t tok = item.tokens[static_cast<size_t>(t / 4)];
            for (int64_t f = 0; f < item.F; ++f) {
                const double base = table[static_cast<size_t>(tok * spec.feat_dim + f)];
                const double eps = spec.noise * rn.normal(static_cast<uint64_t>(t * item.F + f));
                item.feats[static_cast<size_t>(t * item.F + f)] = static_cast<float>(base + eps);
            }
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

MixtureDataset gen_mixture_task(const TaskSpec& spec) {
    spec.validate();
    MixtureDataset ds;
    ds.spec = spec;
    const Rng rng(spec.seed);
    const Stft stft;
    const double fs = 8000.0;
    const int64_t n = static_cast<int64_t>(spec.mix_seconds * fs);

    for (int64_t s = 0; s < spec.samples; ++s) {
        const Rng r = rng.child("sample").child(static_cast<uint64_t>(s));
        MixtureSample item;
        item.F = stft.bins();
        item.T = stft.frames_for(n);
        item.mix_wave.assign(static_cast<size_t>(n), 0.0);

        for (int64_t src = 0; src < spec.sources; ++src) {
            // disjoint dominant bands: [400, 1200), [1600, 2400), [2800, 3600) Hz
            const double lo = 400.0 + 1200.0 * static_cast<double>(src);
            const double hi = lo + 800.0;
            const Rng rs = r.child(static_cast<uint64_t>(src));
            std::vector<double> wave(static_cast<size_t>(n), 0.0);
            const int64_t n_tones = 3 + rs.below(0, 3);
            for (int64_t tone = 0; tone < n_tones; ++tone) {
                const double f0 = rs.uniform(10 + 3 * static_cast<uint64_t>(tone), lo, hi);
                const double amp = rs.uniform(11 + 3 * static_cast<uint64_t>(tone), 0.3, 1.0) /
                                   static_cast<double>(n_tones);
                const double phase = rs.uniform(12 + 3 * static_cast<uint64_t>(tone), 0.0, 2.0 * M_PI);
                for (int64_t t = 0; t < n; ++t) {
                    wave[static_cast<size_t>(t)] += amp * std::sin(2.0 * M_PI * f0 * static_cast<double>(t) / fs + phase);
                }
            }
            for (int64_t t = 0; t < n; ++t) item.mix_wave[static_cast<size_t>(t)] += wave[static_cast<size_t>(t)];
            item.src_spec.push_back(stft.forward(wave));
            item.src_wave.push_back(std::move(wave));
        }
        item.mix_spec = stft.forward(item.mix_wave);
        item.mix_mag.resize(item.mix_spec.size());
        for (size_t i = 0; i < item.mix_spec.size(); ++i) {
            item.mix_mag[i] = static_cast<float>(std::abs(item.mix_spec[i]));
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

TtsDataset gen_tts_task(const TaskSpec& spec) {
    spec.validate();
    TtsDataset ds;
    ds.spec = spec;
    const Rng rng(spec.seed);
    const Rng patterns = rng.child("patterns");
    const int64_t max_dur = 5;

    // deterministic pattern per (token, within-duration index)
    std::vector<float> table(static_cast<size_t>(spec.vocab * max_dur * spec.feat_dim));
    for (size_t i = 0; i < table.size(); ++i) {
        table[i] = static_cast<float>(patterns.uniform(i, -1.0, 1.0));
    }

    for (int64_t s = 0; s < spec.samples; ++s) {
        const Rng r = rng.child("sample").child(static_cast<uint64_t>(s));
        TtsSample item;
        const int64_t len = spec.min_len + r.below(0, spec.max_len - spec.min_len + 1);
        int64_t total = 0;
        for (int64_t i = 0; i < len; ++i) {
            item.tokens.push_back(r.below(1 + 2 * static_cast<uint64_t>(i), spec.vocab));
            const int64_t d = 1 + r.below(2 + 2 * static_cast<uint64_t>(i), max_dur);
            item.durations.push_back(d);
            total += d;
        }
        item.T = total;
        item.D = spec.feat_dim;
        item.feats.resize(static_cast<size_t>(total * spec.feat_dim));
        const Rng rn = r.child("noise");
        int64_t t = 0;
        for (int64_t i = 0; i < len; ++i) {
            for (int64_t p = 0; p < item.durations[static_cast<size_t>(i)]; ++p, ++t) {
                const int64_t phase = std::min<int64_t>(p, max_dur - 1);
                for (int64_t f = 0; f < spec.feat_dim; ++f) {
                    const double base = table[static_cast<size_t>((item.tokens[static_cast<size_t>(i)] * max_dur + phase) * spec.feat_dim + f)];
                    const double eps = spec.noise * rn.normal(static_cast<uint64_t>(t * spec.feat_dim + f));
                    item.feats[static_cast<size_t>(t * spec.feat_dim + f)] = static_cast<float>(base + eps);
                }
            }
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'F', 'D', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}

void put_f64(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(os, u);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("dataset file truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("dataset file truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    const uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

double get_f64(std::istream& is) {
    const uint64_t u = get_u64(is);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void put_i64_vec(std::ostream& os, const std::vector<int64_t>& v) {
    put_u64(os, v.size());
    for (int64_t x : v) put_u64(os, static_cast<uint64_t>(x));
}

std::vector<int64_t> get_i64_vec(std::istream& is) {
    std::vector<int64_t> v(get_u64(is));
    for (auto& x : v) x = static_cast<int64_t>(get_u64(is));
    return v;
}

void put_f32_vec(std::ostream& os, const std::vector<float>& v) {
    put_u64(os, v.size());
    for (float x : v) put_f32(os, x);
}

std::vector<float> get_f32_vec(std::istream& is) {
    std::vector<float> v(get_u64(is));
    for (auto& x : v) x = get_f32(is);
    return v;
}

void put_f64_vec(std::ostream& os, const std::vector<double>& v) {
    put_u64(os, v.size());
    for (double x : v) put_f64(os, x);
}

std::vector<double> get_f64_vec(std::istream& is) {
    std::vector<double> v(get_u64(is));
    for (auto& x : v) x = get_f64(is);
    return v;
}

void put_cplx_vec(std::ostream& os, const std::vector<std::complex<double>>& v) {
    put_u64(os, v.size());
    for (const auto& x : v) {
        put_f64(os, x.real());
        put_f64(os, x.imag());
    }
}

std::vector<std::complex<double>> get_cplx_vec(std::istream& is) {
    std::vector<std::complex<double>> v(get_u64(is));
    for (auto& x : v) {
        const double re = get_f64(is);
        const double im = get_f64(is);
        x = {re, im};
    }
    return v;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    return os;
}

std::ifstream open_in(const std::string& path, TaskSpec::Kind expect) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("'" + path + "' is not a dataset file");
    if (get_u32(is) != kVersion) throw IoError("unsupported dataset version");
    const auto kind = static_cast<TaskSpec::Kind>(get_u32(is));
    if (kind != expect) {
        throw IoError("'" + path + "' holds a " + task_kind_name(kind) + " dataset");
    }
    return is;
}

void put_header(std::ostream& os, const TaskSpec& spec) {
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(spec.kind));
    put_u64(os, static_cast<uint64_t>(spec.vocab));
    put_u64(os, static_cast<uint64_t>(spec.min_len));
    put_u64(os, static_cast<uint64_t>(spec.max_len));
    put_u64(os, static_cast<uint64_t>(spec.feat_dim));
    put_u64(os, static_cast<uint64_t>(spec.sources));
    put_u64(os, static_cast<uint64_t>(spec.samples));
    put_f64(os, spec.noise);
    put_f64(os, spec.mix_seconds);
    put_u64(os, spec.seed);
}

TaskSpec get_header_rest(std::istream& is, TaskSpec::Kind kind) {
    TaskSpec spec;
    spec.kind = kind;
    spec.vocab = static_cast<int64_t>(get_u64(is));
    spec.min_len = static_cast<int64_t>(get_u64(is));
    spec.max_len = static_cast<int64_t>(get_u64(is));
    spec.feat_dim = static_cast<int64_t>(get_u64(is));
    spec.sources = static_cast<int64_t>(get_u64(is));
    spec.samples = static_cast<int64_t>(get_u64(is));
    spec.noise = get_f64(is);
    spec.mix_seconds = get_f64(is);
    spec.seed = get_u64(is);
    return spec;
}

}  // namespace

TaskSpec::Kind peek_dataset_kind(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("'" + path + "' is not a dataset file");
    if (get_u32(is) != kVersion) throw IoError("unsupported dataset version");
    return static_cast<TaskSpec::Kind>(get_u32(is));
}

void save_copy_dataset(const std::string& path, const CopyDataset& ds) {
    auto os = open_out(path);
    put_header(os, ds.spec);
    put_u64(os, ds.items.size());
    for (const auto& item : ds.items) {
        put_i64_vec(os, item.tokens);
        put_u64(os, static_cast<uint64_t>(item.T));
        put_u64(os, static_cast<uint64_t>(item.F));
        put_f32_vec(os, item.feats);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

CopyDataset load_copy_dataset(const std::string& path) {
    auto is = open_in(path, TaskSpec::Kind::copy);
    CopyDataset ds;
    ds.spec = get_header_rest(is, TaskSpec::Kind::copy);
    ds.items.resize(get_u64(is));
    for (auto& item : ds.items) {
        item.tokens = get_i64_vec(is);
        item.T = static_cast<int64_t>(get_u64(is));
        item.F = static_cast<int64_t>(get_u64(is));
        item.feats = get_f32_vec(is);
    }
    return ds;
}

void save_mixture_dataset(const std::string& path, const MixtureDataset& ds) {
    auto os = open_out(path);
    put_header(os, ds.spec);
    put_u64(os, ds.items.size());
    for (const auto& item : ds.items) {
        put_u64(os, static_cast<uint64_t>(item.T));
        put_u64(os, static_cast<uint64_t>(item.F));
        put_f32_vec(os, item.mix_mag);
        put_cplx_vec(os, item.mix_spec);
        put_u64(os, item.src_spec.size());
        for (const auto& s : item.src_spec) put_cplx_vec(os, s);
        put_f64_vec(os, item.mix_wave);
        put_u64(os, item.src_wave.size());
        for (const auto& w : item.src_wave) put_f64_vec(os, w);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

MixtureDataset load_mixture_dataset(const std::string& path) {
    auto is = open_in(path, TaskSpec::Kind::mixture);
    MixtureDataset ds;
    ds.spec = get_header_rest(is, TaskSpec::Kind::mixture);
    ds.items.resize(get_u64(is));
    for (auto& item : ds.items) {
        item.T = static_cast<int64_t>(get_u64(is));
        item.F = static_cast<int64_t>(get_u64(is));
        item.mix_mag = get_f32_vec(is);
        item.mix_spec = get_cplx_vec(is);
        item.src_spec.resize(get_u64(is));
        for (auto& s : item.src_spec) s = get_cplx_vec(is);
        item.mix_wave = get_f64_vec(is);
        item.src_wave.resize(get_u64(is));
        for (auto& w : item.src_wave) w = get_f64_vec(is);
    }
    return ds;
}

void save_tts_dataset(const std::string& path, const TtsDataset& ds) {
    auto os = open_out(path);
    put_header(os, ds.spec);
    put_u64(os, ds.items.size());
    for (const auto& item : ds.items) {
        put_i64_vec(os, item.tokens);
        put_i64_vec(os, item.durations);
        put_u64(os, static_cast<uint64_t>(item.T));
        put_u64(os, static_cast<uint64_t>(item.D));
        put_f32_vec(os, item.feats);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

TtsDataset load_tts_dataset(const std::string& path) {
    auto is = open_in(path, TaskSpec::Kind::tts_toy);
    TtsDataset ds;
    ds.spec = get_header_rest(is, TaskSpec::Kind::tts_toy);
    ds.items.resize(get_u64(is));
    for (auto& item : ds.items) {
        item.tokens = get_i64_vec(is);
        item.durations = get_i64_vec(is);
        item.T = static_cast<int64_t>(get_u64(is));
        item.D = static_cast<int64_t>(get_u64(is));
        item.feats = get_f32_vec(is);
    }
    return ds;
}

}  // namespace cfmr
