#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cfmr/data.hpp"
#include "cfmr/loss.hpp"

using namespace cfmr;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("copy task: structure and determinism") {
    TaskSpec spec;
    spec.kind = TaskSpec::Kind::copy;
    spec.vocab = 2;
    spec.min_len = 2;
    spec.max_len = 6;
    spec.feat_dim = 5;
    spec.samples = 8;
    spec.noise = 0.0;
    spec.seed = 3;

    auto ds = gen_copy_task(spec);
    REQUIRE(ds.items.size() == 8);
    for (const auto& item : ds.items) {
        CHECK(item.T == 4 * static_cast<int64_t>(item.tokens.size()));  // frame rate is 4x token rate
        // zero noise: frames within a token are exactly the pattern
        for (int64_t t = 0; t < item.T; ++t) {
            for (int64_t f = 0; f < item.F; ++f) {
                CHECK(item.feats[static_cast<size_t>(t * item.F + f)] ==
                      item.feats[static_cast<size_t>((t / 4 * 4) * item.F + f)]);
            }
        }
        // same token, same pattern (vocab 2 guarantees collisions)
        for (size_t i = 0; i < item.tokens.size(); ++i) {
            for (size_t j = i + 1; j < item.tokens.size(); ++j) {
                if (item.tokens[i] == item.tokens[j]) {
                    for (int64_t f = 0; f < item.F; ++f) {
                        CHECK(item.feats[static_cast<size_t>(4 * static_cast<int64_t>(i) * item.F + f)] ==
                              item.feats[static_cast<size_t>(4 * static_cast<int64_t>(j) * item.F + f)]);
                    }
                }
            }
        }
    }

    // fixed seed -> identical bytes
    const auto p1 = tmp_path("cfds_copy_1.cfds"), p2 = tmp_path("cfds_copy_2.cfds");
    save_copy_dataset(p1, ds);
    save_copy_dataset(p2, gen_copy_task(spec));
    CHECK(slurp(p1) == slurp(p2));

    auto loaded = load_copy_dataset(p1);
    CHECK(loaded.items.size() == ds.items.size());
    for (size_t i = 0; i < ds.items.size(); ++i) {
        CHECK(loaded.items[i].tokens == ds.items[i].tokens);
        CHECK(loaded.items[i].feats == ds.items[i].feats);
    }
    CHECK(peek_dataset_kind(p1) == TaskSpec::Kind::copy);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("stft: 129 bins and a faithful round trip") {
    Stft stft;
    CHECK(stft.bins() == 129);  // 256-point transform

    Rng rng(9);
    std::vector<double> x(4000);
    for (size_t i = 0; i < x.size(); ++i) {
        x[i] = std::sin(2.0 * M_PI * 420.0 * static_cast<double>(i) / 8000.0) + 0.3 * rng.uniform(i, -1, 1);
    }
    auto z = stft.forward(x);
    CHECK(static_cast<int64_t>(z.size()) == stft.frames_for(4000) * stft.bins());
    auto y = stft.inverse(z, static_cast<int64_t>(x.size()));
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - y[i]) * (x[i] - y[i]);
        den += x[i] * x[i];
    }
    CHECK(std::sqrt(num / den) < 1e-6);
}

TEST_CASE("mixture task: shapes, mixing, and silent-source mask") {
    TaskSpec spec;
    spec.kind = TaskSpec::Kind::mixture;
    spec.sources = 2;
    spec.samples = 2;
    spec.mix_seconds = 0.4;
    spec.seed = 5;

    auto ds = gen_mixture_task(spec);
    REQUIRE(ds.items.size() == 2);
    for (const auto& item : ds.items) {
        CHECK(item.F == 129);
        CHECK(static_cast<int64_t>(item.mix_mag.size()) == item.T * item.F);
        CHECK(item.src_wave.size() == 2);
        // sample-domain mixing
        for (size_t t = 0; t < item.mix_wave.size(); t += 97) {
            CHECK(item.mix_wave[t] ==
                  doctest::Approx(item.src_wave[0][t] + item.src_wave[1][t]).epsilon(1e-12));
        }
    }

    // with one source silent the other's phase-sensitive mask is 1 wherever
    // the mixture has energy
    const auto& item = ds.items[0];
    std::vector<std::complex<double>> silent(item.src_spec[0].size(), {0.0, 0.0});
    auto masks = psm_target<double>({item.src_spec[0], silent}, item.src_spec[0], item.T, item.F);
    for (int64_t i = 0; i < item.T * item.F; ++i) {
        if (std::abs(item.src_spec[0][static_cast<size_t>(i)]) > 1e-9) {
            CHECK(masks.values()[i] == doctest::Approx(1.0));
            CHECK(masks.values()[item.T * item.F + i] == doctest::Approx(0.0));
        }
    }

    const auto p = tmp_path("cfds_mix.cfds");
    save_mixture_dataset(p, ds);
    auto loaded = load_mixture_dataset(p);
    CHECK(loaded.items[0].mix_mag == ds.items[0].mix_mag);
    CHECK(loaded.items[0].src_spec[1] == ds.items[0].src_spec[1]);
    std::filesystem::remove(p);
}

TEST_CASE("tts task: durations sum to frame count, reproducible") {
    TaskSpec spec;
    spec.kind = TaskSpec::Kind::tts_toy;
    spec.vocab = 6;
    spec.min_len = 2;
    spec.max_len = 7;
    spec.feat_dim = 4;
    spec.samples = 10;
    spec.seed = 11;

    auto ds = gen_tts_task(spec);
    for (const auto& item : ds.items) {
        int64_t total = 0;
        for (int64_t d : item.durations) {
            CHECK(d >= 1);
            CHECK(d <= 5);
            total += d;
        }
        CHECK(item.T == total);
        CHECK(static_cast<int64_t>(item.feats.size()) == item.T * item.D);
    }
    auto ds2 = gen_tts_task(spec);
    for (size_t i = 0; i < ds.items.size(); ++i) {
        CHECK(ds2.items[i].tokens == ds.items[i].tokens);
        CHECK(ds2.items[i].durations == ds.items[i].durations);
        CHECK(ds2.items[i].feats == ds.items[i].feats);
    }

    const auto p = tmp_path("cfds_tts.cfds");
    save_tts_dataset(p, ds);
    auto loaded = load_tts_dataset(p);
    CHECK(loaded.items[3].durations == ds.items[3].durations);
    CHECK(loaded.items[3].feats == ds.items[3].feats);
    CHECK_THROWS_AS(load_copy_dataset(p), IoError);  // wrong kind
    std::filesystem::remove(p);
}

TEST_CASE("task spec validation") {
    TaskSpec bad;
    bad.kind = TaskSpec::Kind::mixture;
    bad.sources = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    TaskSpec short_copy;
    short_copy.kind = TaskSpec::Kind::copy;
    short_copy.min_len = 1;
    CHECK_THROWS_AS(short_copy.validate(), ConfigError);
}
