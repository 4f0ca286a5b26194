#pragma once

// Shared plumbing: error taxonomy, shape helpers, numeric-fault checking,
// and the counter-based splittable RNG used everywhere randomness appears.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cfmr {

using Shape = std::vector<int64_t>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatch between tensors.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value (bad preset field, p >= 1, even kernel, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// NaN/Inf escaped an operation while checked mode is on.
class NumericError : public Error {
public:
    using Error::Error;
};

// API misuse: non-scalar backward root, missing parameter, token id out of
// range, non-deterministic function handed to the gradient checker.
class ContractError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Row-major strides.
inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * s[i + 1];
    }
    return st;
}

// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return out;
}

// Strides for reading a tensor of shape `in` at the coordinates of the
// broadcast shape `out`; broadcast extents get stride 0.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    const auto base = strides_of(in);
    std::vector<int64_t> st(out.size(), 0);
    for (size_t i = 0; i < out.size(); ++i) {
        const size_t j = in.size() + i;
        if (j < out.size()) continue;  // in has no such dim -> broadcast
        const size_t k = j - out.size();
        st[i] = (in[k] == 1 && out[i] != 1) ? 0 : base[k];
    }
    return st;
}

// ---------------------------------------------------------------------------
// Checked mode: when on, every public op scans its output for NaN/Inf.
// Single-threaded contract (see the concurrency notes in tensor.hpp).
// ---------------------------------------------------------------------------

inline bool& checked_mode() {
    static bool on = true;
    return on;
}

template <class Real>
inline void check_finite(const std::vector<Real>& v, const char* op) {
    if (!checked_mode()) return;
    for (const Real x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
}

// ---------------------------------------------------------------------------
// Rng: a splittable counter-based generator (SplitMix64 core). A generator
// is an immutable 64-bit key; child(tag) derives an independent stream and
// uniform(i) reads the i-th draw, so the same (key, index) always yields the
// same value regardless of evaluation order.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix(seed ^ kGamma)) {}

    Rng child(uint64_t tag) const { return Rng(mix(key_ ^ mix(tag + kGamma)), 0); }

    Rng child(std::string_view name) const {
        // FNV-1a over the label, then split.
        uint64_t h = 1469598103934665603ull;
        for (char c : name) {
            h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return child(h);
    }

    uint64_t bits(uint64_t i) const { return mix(key_ + (i + 1) * kGamma); }

    // Uniform in [0, 1).
    double uniform(uint64_t i) const {
        return static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
    }

    double uniform(uint64_t i, double lo, double hi) const {
        return lo + (hi - lo) * uniform(i);
    }

    // Uniform integer in [0, n).
    int64_t below(uint64_t i, int64_t n) const {
        return static_cast<int64_t>(bits(i) % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller on draws (2i, 2i+1).
    double normal(uint64_t i) const {
        const double u1 = static_cast<double>((bits(2 * i) >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform(2 * i + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    uint64_t key() const { return key_; }

private:
    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    Rng(uint64_t raw_key, int) : key_(raw_key) {}

    static uint64_t mix(uint64_t z) {
        z += kGamma;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint64_t key_;
};

}  // namespace cfmr
