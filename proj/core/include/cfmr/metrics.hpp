#pragma once

// Evaluation metrics: Levenshtein edit distance with operation counts,
// signal-to-distortion ratio, and mel-cepstral distortion after dynamic
// time warping.

#include <cstdint>
#include <limits>
#include <vector>

#include "cfmr/common.hpp"

namespace cfmr {

struct EditCounts {
    int64_t distance = 0;
    int64_t subs = 0;
    int64_t dels = 0;  // tokens present in ref but missing in hyp
    int64_t ins = 0;   // tokens in hyp with no ref counterpart

    // distance / len(ref); +inf when ref is empty but hyp is not.
    double rate(int64_t ref_len) const {
        if (ref_len == 0) {
            return distance == 0 ? 0.0 : std::numeric_limits<double>::infinity();
        }
        return static_cast<double>(distance) / static_cast<double>(ref_len);
    }
};

EditCounts edit_distance(const std::vector<int64_t>& hyp, const std::vector<int64_t>& ref);

// 10 log10(|ref|^2 / |ref - est|^2), capped at +-99.9 dB. The reference must
// be non-silent.
double sdr(const std::vector<double>& estimate, const std::vector<double>& reference);

// DTW under Euclidean local cost over the selected coefficient range (the
// 0th cepstral coefficient is excluded by default), then the mel-cepstral
// distortion constant 10 sqrt(2) / ln 10 times the mean aligned distance.
double mcd_dtw(const std::vector<double>& pred, int64_t t_pred, const std::vector<double>& ref,
               int64_t t_ref, int64_t dim, bool include_c0 = false);

}  // namespace cfmr
