#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace exitrf::rfdata {

using cdouble = std::complex<double>;
using Rng = std::mt19937_64;

/// Per-device analog impairments. Parameters are constant per emitter, so the
/// distortions they produce act as a stable fingerprint.
struct EmitterProfile {
    int device_id = 0;
    double iq_gain_imbalance = 1.0;   // Q-branch gain relative to I
    double iq_phase_imbalance = 0.0;  // radians
    double dc_offset_i = 0.0;
    double dc_offset_q = 0.0;
    double cfo = 0.0;                 // cycles / sample
    double pa_a3 = 0.0;               // y = z + a3 |z|^2 z
    double phase_noise_std = 0.0;     // radians per sample step
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument on out-of-domain parameters.
    void validate() const;
};

/// Pulse-position frame layout: four preamble pulses at 0, 1, 3.5 and 4.5 us,
/// then one PPM bit per microsecond starting at 8 us.
struct FrameFormat {
    int samples_per_us = 4;  // must be even so half-microsecond pulses land on samples
    int payload_bits = 112;

    std::size_t preamble_samples() const { return static_cast<std::size_t>(8 * samples_per_us); }
    std::size_t frame_samples() const {
        return preamble_samples() + static_cast<std::size_t>(payload_bits * samples_per_us);
    }
    /// Start sample of each preamble pulse.
    std::vector<std::size_t> preamble_offsets() const;
};

/// Complex amplitude of an ideal pulse. Non-zero I and Q so that every
/// impairment has something to act on.
inline const cdouble kPulseAmplitude = std::polar(1.0, 0.7853981633974483);

struct IqFrame {
    std::vector<cdouble> samples;
    int label = 0;
    std::optional<double> snr_db;
};

/// Ideal (impairment-free) baseband pulse train for the given payload.
IqFrame ideal_frame(std::span<const std::uint8_t> payload_bits, std::size_t length,
                    const FrameFormat& format = {});

/// Ideal frame pushed through the impairment chain:
/// IQ imbalance -> DC offset -> CFO rotation -> cubic PA -> phase-noise walk.
/// Only the phase-noise walk consumes `rng`.
IqFrame synth_frame(const EmitterProfile& profile, std::span<const std::uint8_t> payload_bits,
                    std::size_t length, Rng& rng, const FrameFormat& format = {});

/// Sentinel for the no-noise mode of add_awgn.
inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

/// Adds circular complex Gaussian noise at the requested SNR, where signal
/// power is the mean |x|^2 over the whole frame.
IqFrame add_awgn(const IqFrame& frame, double snr_db, Rng& rng);

enum class Window : std::uint8_t { Rectangular = 0, Hann = 1 };

struct StftParams {
    int window_len = 32;
    int stride = 16;
    Window window = Window::Rectangular;

    int hops(std::size_t length) const;

    bool operator==(const StftParams&) const = default;
};

/// Complex STFT, [freq][hop] row-major. Bin f of hop t is
///   sum_n x[n] w[n - t*stride] exp(-i 2 pi n f / window_len)
/// with n the absolute sample index.
struct ComplexStft {
    int freq_bins = 0;
    int hops = 0;
    std::vector<cdouble> values;

    cdouble at(int f, int t) const { return values[static_cast<std::size_t>(f) * hops + t]; }
};

ComplexStft stft_complex(std::span<const cdouble> samples, const StftParams& params);

/// Two real planes [2][F][T]: plane 0 holds Re, plane 1 holds Im of the STFT.
struct Spectrogram {
    int freq_bins = 0;
    int hops = 0;
    int label = 0;
    std::vector<double> data;

    double at(int plane, int f, int t) const {
        return data[(static_cast<std::size_t>(plane) * freq_bins + f) * hops + t];
    }
};

Spectrogram stft(const IqFrame& frame, const StftParams& params);

/// 2 (x - min) / (max - min) - 1; a constant input maps to all zeros.
std::vector<double> minmax_normalize(std::span<const double> x);
void minmax_normalize_inplace(std::span<double> x);

/// stft followed by min-max normalization over the whole sample.
Spectrogram preprocess(const IqFrame& frame, const StftParams& params);

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

struct SplitFractions {
    double train = 0.6;
    double val = 0.3;
    double test = 0.1;
};

/// Labeled raw IQ frames, stored as interleaved float32 (i, q) pairs so the
/// in-memory object and its file image are identical.
struct SignalDataset {
    std::uint16_t num_classes = 0;
    std::uint32_t sample_length = 0;
    StftParams stft;
    std::uint64_t seed = 0;
    std::string metadata;  // free-form "key=value" lines

    std::vector<float> samples;  // [n][sample_length][2]
    std::vector<std::uint16_t> labels;
    std::vector<Split> splits;

    std::size_t size() const noexcept { return labels.size(); }
    IqFrame frame(std::size_t i) const;
    Spectrogram spectrogram(std::size_t i) const;
    std::vector<std::size_t> indices(Split s) const;

    void append(const IqFrame& frame, Split split);

    bool operator==(const SignalDataset&) const = default;
};

/// Half-widths of the impairment ranges used by make_profiles.
struct ProfileSpread {
    double gain = 0.15;
    double phase = 0.15;
    double dc = 0.08;
    double cfo = 0.004;
    double pa_a3 = 0.15;
    double phase_noise_lo = 0.002;
    double phase_noise_hi = 0.006;
};
inline constexpr ProfileSpread kProfileSpread{};

/// Reproducible family of well-separated emitter profiles for desk experiments.
std::vector<EmitterProfile> make_profiles(int num_classes, std::uint64_t seed);

struct SynthOptions {
    std::size_t frames_per_class = 120;
    std::size_t length = 512;
    SplitFractions split;
    StftParams stft;
    FrameFormat format;
    std::uint64_t seed = 1;
};

/// One frame per (class, index) from independent RNG streams with random
/// payloads; stratified split with equal per-class counts.
SignalDataset synth_dataset(std::span<const EmitterProfile> profiles, const SynthOptions& options);

void dataset_write(const SignalDataset& ds, const std::filesystem::path& path);
SignalDataset dataset_read(const std::filesystem::path& path);
std::vector<std::uint8_t> dataset_encode(const SignalDataset& ds);
SignalDataset dataset_decode(std::span<const std::uint8_t> bytes);

/// Per-sample metadata: index, label, split, mean power.
std::string dataset_csv(const SignalDataset& ds);

}  // namespace exitrf::rfdata
