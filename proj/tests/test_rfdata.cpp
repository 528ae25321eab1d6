#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "exitrf/common.hpp"
#include "exitrf/rfdata.hpp"

using namespace exitrf;
using namespace exitrf::rfdata;

namespace {

std::vector<std::uint8_t> pattern_bits(int n) {
    std::vector<std::uint8_t> b(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) b[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((i * 7 + 3) % 5 < 2);
    return b;
}

// Direct O(N^2) transform of one hop, absolute sample index in the exponent.
cdouble dft_oracle(std::span<const cdouble> x, int start, int len, int f) {
    cdouble acc{};
    for (int k = 0; k < len; ++k) {
        const int n = start + k;
        const double ang = -2.0 * std::numbers::pi * static_cast<double>(n) * f / len;
        acc += x[static_cast<std::size_t>(n)] * cdouble(std::cos(ang), std::sin(ang));
    }
    return acc;
}

}  // namespace

TEST(Frame, IdealPulsesSitAtPreambleOffsets) {
    FrameFormat fmt;
    const auto bits = pattern_bits(fmt.payload_bits);
    const auto f = ideal_frame(bits, 512, fmt);
    const int sps = fmt.samples_per_us, half = sps / 2;
    std::vector<bool> on(512, false);
    for (auto off : fmt.preamble_offsets()) {
        for (int k = 0; k < half; ++k) on[off + static_cast<std::size_t>(k)] = true;
    }
    for (std::size_t b = 0; b < bits.size(); ++b) {
        const std::size_t start = fmt.preamble_samples() + b * static_cast<std::size_t>(sps) + (bits[b] ? 0 : half);
        for (int k = 0; k < half; ++k) on[start + static_cast<std::size_t>(k)] = true;
    }
    EXPECT_EQ(fmt.preamble_offsets(), (std::vector<std::size_t>{0, 4, 14, 18}));
    for (std::size_t n = 0; n < 512; ++n) {
        EXPECT_EQ(f.samples[n], on[n] ? kPulseAmplitude : cdouble{}) << n;
    }
}

TEST(Frame, GainImbalanceScalesOnlyQ) {
    EmitterProfile p;
    p.iq_gain_imbalance = 1.1;
    Rng rng(1);
    const auto bits = pattern_bits(112);
    const auto ideal = ideal_frame(bits, 512);
    const auto f = synth_frame(p, bits, 512, rng);
    for (std::size_t n = 0; n < 512; ++n) {
        EXPECT_EQ(f.samples[n].real(), ideal.samples[n].real());
        EXPECT_NEAR(f.samples[n].imag(), 1.1 * ideal.samples[n].imag(), 1e-15);
    }
}

TEST(Frame, CfoDifferenceIsPhaseRamp) {
    EmitterProfile a, b;
    a.cfo = 0.001;
    b.cfo = 0.002;
    Rng r1(3), r2(3);
    const auto bits = pattern_bits(112);
    const auto fa = synth_frame(a, bits, 512, r1);
    const auto fb = synth_frame(b, bits, 512, r2);
    for (std::size_t n = 0; n < 512; ++n) {
        const cdouble rot = std::exp(cdouble(0.0, 2.0 * std::numbers::pi * 0.001 * static_cast<double>(n)));
        EXPECT_LT(std::abs(fb.samples[n] - fa.samples[n] * rot), 1e-12) << n;
    }
}

TEST(Frame, RejectsBadProfilesAndShortFrames) {
    EmitterProfile p;
    p.iq_gain_imbalance = -1.0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    EXPECT_THROW(ideal_frame(pattern_bits(112), 100), std::invalid_argument);
}

TEST(Synth, StratifiedSplitCounts) {
    SynthOptions o;
    o.frames_per_class = 100;
    const auto ds = synth_dataset(make_profiles(10, 5), o);
    ASSERT_EQ(ds.size(), 1000u);
    EXPECT_EQ(ds.indices(Split::Train).size(), 600u);
    EXPECT_EQ(ds.indices(Split::Val).size(), 300u);
    EXPECT_EQ(ds.indices(Split::Test).size(), 100u);
    std::array<std::array<int, 3>, 10> per{};
    for (std::size_t i = 0; i < ds.size(); ++i) per[ds.labels[i]][static_cast<int>(ds.splits[i])]++;
    for (const auto& c : per) EXPECT_EQ(c, (std::array<int, 3>{60, 30, 10}));
}

TEST(Synth, SameSeedIsBitIdentical) {
    SynthOptions o;
    o.frames_per_class = 10;
    o.seed = 42;
    EXPECT_EQ(dataset_encode(synth_dataset(make_profiles(4, 42), o)),
              dataset_encode(synth_dataset(make_profiles(4, 42), o)));
    o.seed = 43;
    EXPECT_NE(synth_dataset(make_profiles(4, 42), o).samples, synth_dataset(make_profiles(4, 43), {}).samples);
}

TEST(Synth, EveryClassInEverySplit) {
    SynthOptions o;
    o.frames_per_class = 20;
    const auto ds = synth_dataset(make_profiles(3, 9), o);
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        std::set<int> seen;
        for (auto i : ds.indices(s)) seen.insert(ds.labels[i]);
        EXPECT_EQ(seen.size(), 3u);
    }
}

TEST(Synth, ProfilesAreDistinctAndValid) {
    const auto ps = make_profiles(10, 1);
    for (const auto& p : ps) EXPECT_NO_THROW(p.validate());
    for (std::size_t a = 0; a < ps.size(); ++a) {
        for (std::size_t b = a + 1; b < ps.size(); ++b) EXPECT_NE(ps[a].cfo, ps[b].cfo);
    }
}

TEST(Noise, InfiniteSnrIsIdentity) {
    Rng rng(1);
    const auto f = ideal_frame(pattern_bits(112), 512);
    EXPECT_EQ(add_awgn(f, kNoNoise, rng).samples, f.samples);
}

TEST(Noise, ZeroDbOnUnitPowerAddsUnitNoise) {
    IqFrame f;
    f.samples.assign(100000, cdouble(1.0, 0.0));
    Rng rng(11);
    const auto g = add_awgn(f, 0.0, rng);
    double p = 0.0;
    for (std::size_t n = 0; n < f.samples.size(); ++n) p += std::norm(g.samples[n] - f.samples[n]);
    p /= static_cast<double>(f.samples.size());
    EXPECT_NEAR(p, 1.0, 0.05);
}

TEST(Noise, VarianceRatioFollowsSnrGap) {
    IqFrame f;
    f.samples.assign(100000, std::polar(1.0, 0.3));
    auto noise_power = [&](double snr) {
        Rng rng(5);
        const auto g = add_awgn(f, snr, rng);
        double p = 0.0;
        for (std::size_t n = 0; n < f.samples.size(); ++n) p += std::norm(g.samples[n] - f.samples[n]);
        return p / static_cast<double>(f.samples.size());
    };
    EXPECT_NEAR(noise_power(-5.0) / noise_power(20.0), std::pow(10.0, 2.5), 0.05 * std::pow(10.0, 2.5));
}

TEST(Noise, RejectsNanSnr) {
    Rng rng(1);
    EXPECT_THROW(add_awgn(ideal_frame(pattern_bits(112), 512), std::nan(""), rng), std::invalid_argument);
}

TEST(Stft, ZeroFrameGivesZeroSpectrogram) {
    IqFrame f;
    f.samples.assign(256, cdouble{});
    const auto s = stft(f, {32, 16, Window::Rectangular});
    for (double v : s.data) EXPECT_EQ(v, 0.0);
    for (double v : preprocess(f, {32, 16, Window::Rectangular}).data) EXPECT_EQ(v, 0.0);
}

TEST(Stft, ToneLandsInItsBin) {
    const int N = 32, k = 5;
    IqFrame f;
    for (int n = 0; n < 8 * N; ++n) f.samples.push_back(std::exp(cdouble(0.0, 2.0 * std::numbers::pi * k * n / N)));
    const auto s = stft_complex(f.samples, {N, N, Window::Rectangular});
    ASSERT_EQ(s.hops, 8);
    for (int t = 0; t < s.hops; ++t) {
        const double peak = std::abs(s.at(k, t));
        EXPECT_NEAR(peak, N, 1e-9 * N);
        for (int b = 0; b < N; ++b) {
            if (b != k) {
                EXPECT_LE(std::abs(s.at(b, t)), 1e-9 * peak);
            }
        }
    }
}

TEST(Stft, MatchesDirectDft) {
    Rng rng(7);
    std::normal_distribution<double> g;
    std::vector<cdouble> x(512);
    for (auto& v : x) v = {g(rng), g(rng)};
    for (Window w : {Window::Rectangular, Window::Hann}) {
        const StftParams p{128, 64, w};
        const auto s = stft_complex(x, p);
        ASSERT_EQ(s.hops, (512 - 128) / 64 + 1);
        ASSERT_EQ(s.freq_bins, 128);
        std::vector<cdouble> xw(x.size());
        for (int t = 0; t < s.hops; ++t) {
            std::fill(xw.begin(), xw.end(), cdouble{});
            for (int k = 0; k < 128; ++k) {
                const double wk = w == Window::Hann ? 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / 128) : 1.0;
                xw[static_cast<std::size_t>(t * 64 + k)] = x[static_cast<std::size_t>(t * 64 + k)] * wk;
            }
            for (int f = 0; f < 128; ++f) {
                const cdouble want = dft_oracle(xw, t * 64, 128, f);
                EXPECT_LE(std::abs(s.at(f, t) - want), 1e-9 * std::max(1.0, std::abs(want))) << t << "," << f;
            }
        }
    }
}

TEST(Stft, SpectrogramPlanesHoldReAndIm) {
    Rng rng(2);
    IqFrame f;
    std::normal_distribution<double> g;
    for (int n = 0; n < 256; ++n) f.samples.emplace_back(g(rng), g(rng));
    const StftParams p{32, 16, Window::Rectangular};
    const auto c = stft_complex(f.samples, p);
    const auto s = stft(f, p);
    for (int fb = 0; fb < c.freq_bins; ++fb) {
        for (int t = 0; t < c.hops; ++t) {
            EXPECT_EQ(s.at(0, fb, t), c.at(fb, t).real());
            EXPECT_EQ(s.at(1, fb, t), c.at(fb, t).imag());
        }
    }
}

TEST(Normalize, EndpointsAndMidpoint) {
    EXPECT_EQ(minmax_normalize(std::vector<double>{0, 5, 10}), (std::vector<double>{-1, 0, 1}));
    EXPECT_EQ(minmax_normalize(std::vector<double>{3, 3, 3}), (std::vector<double>{0, 0, 0}));
}

TEST(Normalize, Idempotent) {
    Rng rng(4);
    std::uniform_real_distribution<double> u(-7.0, 19.0);
    std::vector<double> x(300);
    for (auto& v : x) v = u(rng);
    const auto once = minmax_normalize(x);
    const auto twice = minmax_normalize(once);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-15);
    EXPECT_EQ(*std::min_element(once.begin(), once.end()), -1.0);
    EXPECT_EQ(*std::max_element(once.begin(), once.end()), 1.0);
}

TEST(DatasetIo, EmptyMetadataRoundTrip) {
    SignalDataset ds;
    ds.num_classes = 2;
    ds.sample_length = 4;
    IqFrame f;
    f.samples = {{1, 2}, {3, 4}, {5, 6}, {7, 8}};
    f.label = 1;
    ds.append(f, Split::Val);
    EXPECT_EQ(dataset_decode(dataset_encode(ds)), ds);
}

TEST(DatasetIo, SyntheticRoundTripIsExact) {
    SynthOptions o;
    o.frames_per_class = 10;
    const auto ds = synth_dataset(make_profiles(10, 3), o);
    const auto bytes = dataset_encode(ds);
    const auto back = dataset_decode(bytes);
    EXPECT_EQ(back, ds);
    EXPECT_EQ(dataset_encode(back), bytes);
}

TEST(DatasetIo, CorruptionIsTyped) {
    SynthOptions o;
    o.frames_per_class = 10;
    auto bytes = dataset_encode(synth_dataset(make_profiles(2, 3), o));
    auto kind_of = [](std::vector<std::uint8_t> b) {
        try {
            dataset_decode(b);
        } catch (const FormatError& e) {
            return e.kind();
        }
        ADD_FAILURE() << "decode accepted corrupt bytes";
        return FormatErrorKind::Io;
    };
    auto bad_magic = bytes;
    bad_magic[0] ^= 0xff;
    EXPECT_EQ(kind_of(bad_magic), FormatErrorKind::BadMagic);
    auto version = bytes;
    version[4] = 9;
    EXPECT_EQ(kind_of(version), FormatErrorKind::VersionMismatch);
    EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + 40}), FormatErrorKind::Truncated);
    EXPECT_EQ(kind_of({bytes.begin(), bytes.end() - 1}), FormatErrorKind::Truncated);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_EQ(kind_of(trailing), FormatErrorKind::Parse);
    auto bad_split = bytes;
    bad_split.back() = 7;
    EXPECT_EQ(kind_of(bad_split), FormatErrorKind::Parse);
    // The layout has no checksum: a flipped sample byte decodes to a different value.
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x10;
    EXPECT_NO_THROW(dataset_decode(flipped));
    EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + 3}), FormatErrorKind::BadMagic);
}

TEST(DatasetIo, CsvHasOneRowPerFrame) {
    SynthOptions o;
    o.frames_per_class = 10;
    const auto ds = synth_dataset(make_profiles(2, 3), o);
    const auto csv = dataset_csv(ds);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 21);
}
