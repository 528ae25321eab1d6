#include "exitrf/rfdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "exitrf/common.hpp"

namespace exitrf::rfdata {

namespace {

constexpr char kDatasetMagic[] = "EXRF";
constexpr std::uint16_t kDatasetVersion = 1;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 FFT, forward sign.
void fft_pow2(std::vector<cdouble>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t k = 0; k < len / 2; ++k) {
                const cdouble w = std::polar(1.0, ang * static_cast<double>(k));
                const cdouble u = a[i + k];
                const cdouble v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
            }
        }
    }
}

std::vector<double> window_coeffs(int n, Window w) {
    std::vector<double> c(static_cast<std::size_t>(n), 1.0);
    if (w == Window::Hann) {
        for (int k = 0; k < n; ++k) c[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / n);
    }
    return c;
}

}  // namespace

void EmitterProfile::validate() const {
    if (!(iq_gain_imbalance > 0.0)) throw std::invalid_argument("iq_gain_imbalance must be > 0");
    if (!(std::abs(pa_a3) < 1.0)) throw std::invalid_argument("|pa_a3| must be < 1");
    if (!(phase_noise_std >= 0.0)) throw std::invalid_argument("phase_noise_std must be >= 0");
    for (double v : {iq_phase_imbalance, dc_offset_i, dc_offset_q, cfo}) {
        if (!std::isfinite(v)) throw std::invalid_argument("emitter profile has non-finite parameter");
    }
}

std::vector<std::size_t> FrameFormat::preamble_offsets() const {
    const std::size_t half = static_cast<std::size_t>(samples_per_us / 2);
    // 0, 1, 3.5, 4.5 us expressed in half-microsecond units.
    return {0, 2 * half, 7 * half, 9 * half};
}

IqFrame ideal_frame(std::span<const std::uint8_t> payload_bits, std::size_t length, const FrameFormat& format) {
    if (format.samples_per_us < 2 || format.samples_per_us % 2 != 0) {
        throw std::invalid_argument("samples_per_us must be even and >= 2");
    }
    const std::size_t sps = static_cast<std::size_t>(format.samples_per_us);
    const std::size_t half = sps / 2;
    const std::size_t needed = format.preamble_samples() + payload_bits.size() * sps;
    if (length < needed) {
        throw std::invalid_argument("frame length " + std::to_string(length) + " is shorter than preamble + " +
                                    std::to_string(payload_bits.size()) + "-bit payload (" +
                                    std::to_string(needed) + " samples)");
    }
    IqFrame f;
    f.samples.assign(length, cdouble{});
    auto pulse = [&](std::size_t start) {
        for (std::size_t k = 0; k < half; ++k) f.samples[start + k] = kPulseAmplitude;
    };
    for (std::size_t off : format.preamble_offsets()) pulse(off);
    for (std::size_t b = 0; b < payload_bits.size(); ++b) {
        const std::size_t start = format.preamble_samples() + b * sps;
        pulse(payload_bits[b] ? start : start + half);
    }
    return f;
}

IqFrame synth_frame(const EmitterProfile& profile, std::span<const std::uint8_t> payload_bits,
                    std::size_t length, Rng& rng, const FrameFormat& format) {
    profile.validate();
    IqFrame f = ideal_frame(payload_bits, length, format);
    f.label = profile.device_id;

    const double cphi = std::cos(profile.iq_phase_imbalance);
    const double sphi = std::sin(profile.iq_phase_imbalance);
    std::normal_distribution<double> step(0.0, 1.0);
    double theta = 0.0;
    for (std::size_t n = 0; n < f.samples.size(); ++n) {
        const double i0 = f.samples[n].real();
        const double q0 = f.samples[n].imag();
        double i1 = i0;
        double q1 = profile.iq_gain_imbalance * (q0 * cphi - i0 * sphi);
        i1 += profile.dc_offset_i;
        q1 += profile.dc_offset_q;
        cdouble z{i1, q1};
        if (profile.cfo != 0.0) {
            // Reduce the phase argument before calling polar to keep it exact for long frames.
            const double cyc = profile.cfo * static_cast<double>(n);
            z *= std::polar(1.0, 2.0 * std::numbers::pi * (cyc - std::floor(cyc)));
        }
        if (profile.pa_a3 != 0.0) z += profile.pa_a3 * std::norm(z) * z;
        if (profile.phase_noise_std > 0.0) {
            if (n > 0) theta += profile.phase_noise_std * step(rng);
            z *= std::polar(1.0, theta);
        }
        f.samples[n] = z;
    }
    return f;
}

IqFrame add_awgn(const IqFrame& frame, double snr_db, Rng& rng) {
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
        throw std::invalid_argument("snr_db must be finite (or +inf for no noise)");
    }
    IqFrame out = frame;
    if (snr_db == kNoNoise) return out;
    double power = 0.0;
    for (const auto& s : frame.samples) power += std::norm(s);
    if (frame.samples.empty() || power == 0.0) throw std::invalid_argument("add_awgn: frame has zero signal power");
    power /= static_cast<double>(frame.samples.size());
    const double noise_power = power / std::pow(10.0, snr_db / 10.0);
    std::normal_distribution<double> g(0.0, std::sqrt(noise_power / 2.0));
    for (auto& s : out.samples) {
        const double ni = g(rng);
        const double nq = g(rng);
        s += cdouble{ni, nq};
    }
    out.snr_db = snr_db;
    return out;
}

int StftParams::hops(std::size_t length) const {
    if (window_len < 1 || stride < 1) throw std::invalid_argument("STFT window_len and stride must be >= 1");
    if (static_cast<std::size_t>(window_len) > length) {
        throw std::invalid_argument("STFT window_len " + std::to_string(window_len) + " exceeds frame length " +
                                    std::to_string(length));
    }
    return static_cast<int>((length - static_cast<std::size_t>(window_len)) / static_cast<std::size_t>(stride)) + 1;
}

ComplexStft stft_complex(std::span<const cdouble> samples, const StftParams& params) {
    const int hops = params.hops(samples.size());
    const int n = params.window_len;
    const auto w = window_coeffs(n, params.window);

    ComplexStft out;
    out.freq_bins = n;
    out.hops = hops;
    out.values.assign(static_cast<std::size_t>(n) * hops, cdouble{});

    std::vector<cdouble> seg(static_cast<std::size_t>(n));
    std::vector<cdouble> spec(static_cast<std::size_t>(n));
    for (int t = 0; t < hops; ++t) {
        const std::size_t start = static_cast<std::size_t>(t) * params.stride;
        for (int k = 0; k < n; ++k) seg[k] = samples[start + k] * w[k];
        if (is_pow2(n)) {
            spec = seg;
            fft_pow2(spec);
        } else {
            for (int f = 0; f < n; ++f) {
                cdouble acc{};
                for (int k = 0; k < n; ++k) {
                    acc += seg[k] * std::polar(1.0, -2.0 * std::numbers::pi * ((static_cast<long long>(k) * f) % n) / n);
                }
                spec[f] = acc;
            }
        }
        // Absolute-time phase reference: shift by the hop start.
        const long long s = static_cast<long long>(start % static_cast<std::size_t>(n));
        for (int f = 0; f < n; ++f) {
            const long long m = (s * f) % n;
            const cdouble phase = m == 0 ? cdouble{1.0, 0.0} : std::polar(1.0, -2.0 * std::numbers::pi * m / n);
            out.values[static_cast<std::size_t>(f) * hops + t] = spec[f] * phase;
        }
    }
    return out;
}

Spectrogram stft(const IqFrame& frame, const StftParams& params) {
    const ComplexStft c = stft_complex(frame.samples, params);
    Spectrogram s;
    s.freq_bins = c.freq_bins;
    s.hops = c.hops;
    s.label = frame.label;
    const std::size_t plane = c.values.size();
    s.data.resize(2 * plane);
    for (std::size_t k = 0; k < plane; ++k) {
        s.data[k] = c.values[k].real();
        s.data[plane + k] = c.values[k].imag();
    }
    return s;
}

void minmax_normalize_inplace(std::span<double> x) {
    if (x.empty()) return;
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    const double mn = *lo;
    const double mx = *hi;
    if (!std::isfinite(mn) || !std::isfinite(mx)) throw std::invalid_argument("minmax_normalize: non-finite input");
    if (mx == mn) {
        std::fill(x.begin(), x.end(), 0.0);
        return;
    }
    const double range = mx - mn;
    for (double& v : x) v = std::clamp(2.0 * (v - mn) / range - 1.0, -1.0, 1.0);
}

std::vector<double> minmax_normalize(std::span<const double> x) {
    std::vector<double> out(x.begin(), x.end());
    minmax_normalize_inplace(out);
    return out;
}

Spectrogram preprocess(const IqFrame& frame, const StftParams& params) {
    Spectrogram s = stft(frame, params);
    minmax_normalize_inplace(s.data);
    return s;
}

IqFrame SignalDataset::frame(std::size_t i) const {
    IqFrame f;
    f.label = labels.at(i);
    f.samples.resize(sample_length);
    const float* p = samples.data() + i * sample_length * 2;
    for (std::size_t k = 0; k < sample_length; ++k) f.samples[k] = cdouble{p[2 * k], p[2 * k + 1]};
    return f;
}

Spectrogram SignalDataset::spectrogram(std::size_t i) const { return preprocess(frame(i), stft); }

std::vector<std::size_t> SignalDataset::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == s) out.push_back(i);
    }
    return out;
}

void SignalDataset::append(const IqFrame& f, Split split) {
    if (f.samples.size() != sample_length) throw std::invalid_argument("frame length differs from dataset sample_length");
    if (f.label < 0 || f.label >= num_classes) throw std::invalid_argument("frame label out of range");
    for (const auto& s : f.samples) {
        if (!std::isfinite(s.real()) || !std::isfinite(s.imag())) throw std::invalid_argument("non-finite IQ sample");
        samples.push_back(static_cast<float>(s.real()));
        samples.push_back(static_cast<float>(s.imag()));
    }
    labels.push_back(static_cast<std::uint16_t>(f.label));
    splits.push_back(split);
}

std::vector<EmitterProfile> make_profiles(int num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("make_profiles: need at least 2 classes");
    // Latin-hypercube draw: each knob's range is cut into num_classes strata
    // and every device gets a different stratum per knob.
    constexpr int kKnobs = 7;
    const auto K = static_cast<std::size_t>(num_classes);
    Rng rng(derive_seed(seed, 0x5052u));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::array<std::vector<double>, kKnobs> draws;
    for (auto& d : draws) {
        std::vector<std::size_t> strata(K);
        std::iota(strata.begin(), strata.end(), 0);
        std::shuffle(strata.begin(), strata.end(), rng);
        d.resize(K);
        for (std::size_t k = 0; k < K; ++k) {
            d[k] = 2.0 * (static_cast<double>(strata[k]) + u(rng)) / static_cast<double>(K) - 1.0;
        }
    }
    std::vector<EmitterProfile> out;
    for (std::size_t k = 0; k < K; ++k) {
        EmitterProfile p;
        p.device_id = static_cast<int>(k);
        p.iq_gain_imbalance = 1.0 + kProfileSpread.gain * draws[0][k];
        p.iq_phase_imbalance = kProfileSpread.phase * draws[1][k];
        p.dc_offset_i = kProfileSpread.dc * draws[2][k];
        p.dc_offset_q = kProfileSpread.dc * draws[3][k];
        p.cfo = kProfileSpread.cfo * draws[4][k];
        p.pa_a3 = kProfileSpread.pa_a3 * draws[5][k];
        p.phase_noise_std = kProfileSpread.phase_noise_lo +
                            (kProfileSpread.phase_noise_hi - kProfileSpread.phase_noise_lo) * 0.5 * (draws[6][k] + 1.0);
        p.seed = derive_seed(seed, 0x5053u, k);
        out.push_back(p);
    }
    return out;
}

SignalDataset synth_dataset(std::span<const EmitterProfile> profiles, const SynthOptions& o) {
    if (profiles.size() < 2) throw std::invalid_argument("synth_dataset: need at least 2 profiles");
    if (o.frames_per_class < 10) throw std::invalid_argument("synth_dataset: frames_per_class must be >= 10");
    const double total = o.split.train + o.split.val + o.split.test;
    if (std::abs(total - 1.0) > 1e-9 || o.split.train < 0 || o.split.val < 0 || o.split.test < 0) {
        throw std::invalid_argument("synth_dataset: split fractions must be non-negative and sum to 1");
    }
    const std::size_t n = o.frames_per_class;
    const auto n_train = static_cast<std::size_t>(std::llround(o.split.train * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(o.split.val * static_cast<double>(n)));
    if (n_train < 1 || n_val < 1 || n_train + n_val >= n) {
        throw std::invalid_argument("synth_dataset: split leaves an empty partition for some class");
    }
    std::vector<int> ids;
    for (const auto& p : profiles) {
        p.validate();
        if (std::find(ids.begin(), ids.end(), p.device_id) != ids.end()) {
            throw std::invalid_argument("synth_dataset: duplicate device_id");
        }
        if (p.device_id < 0 || p.device_id >= static_cast<int>(profiles.size())) {
            throw std::invalid_argument("synth_dataset: device_id must lie in [0, #profiles)");
        }
        ids.push_back(p.device_id);
    }
    (void)o.stft.hops(o.length);

    SignalDataset ds;
    ds.num_classes = static_cast<std::uint16_t>(profiles.size());
    ds.sample_length = static_cast<std::uint32_t>(o.length);
    ds.stft = o.stft;
    ds.seed = o.seed;
    std::ostringstream meta;
    meta << "generator=synthetic-ppm\nsamples_per_us=" << o.format.samples_per_us
         << "\npayload_bits=" << o.format.payload_bits << "\nframes_per_class=" << n << "\n";
    ds.metadata = meta.str();

    for (const auto& p : profiles) {
        Rng split_rng(derive_seed(o.seed, 0x53504cu, static_cast<std::uint64_t>(p.device_id)));
        std::vector<std::size_t> order(n);
        for (std::size_t k = 0; k < n; ++k) order[k] = k;
        std::shuffle(order.begin(), order.end(), split_rng);
        std::vector<Split> assign(n, Split::Test);
        for (std::size_t k = 0; k < n; ++k) {
            assign[order[k]] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
        }
        for (std::size_t k = 0; k < n; ++k) {
            Rng rng(derive_seed(o.seed ^ p.seed, static_cast<std::uint64_t>(p.device_id), k));
            std::vector<std::uint8_t> bits(static_cast<std::size_t>(o.format.payload_bits));
            for (auto& b : bits) b = static_cast<std::uint8_t>(rng() & 1u);
            ds.append(synth_frame(p, bits, o.length, rng, o.format), assign[k]);
        }
    }
    return ds;
}

std::vector<std::uint8_t> dataset_encode(const SignalDataset& ds) {
    ByteWriter w;
    for (int k = 0; k < 4; ++k) w.u8(static_cast<std::uint8_t>(kDatasetMagic[k]));
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(ds.sample_length);
    w.u16(ds.num_classes);
    w.u32(static_cast<std::uint32_t>(ds.stft.window_len));
    w.u32(static_cast<std::uint32_t>(ds.stft.stride));
    w.u8(static_cast<std::uint8_t>(ds.stft.window));
    w.u64(ds.seed);
    w.str(ds.metadata);
    for (float v : ds.samples) w.f32(v);
    for (auto l : ds.labels) w.u16(l);
    for (auto s : ds.splits) w.u8(static_cast<std::uint8_t>(s));
    return std::move(w.data());
}

SignalDataset dataset_decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
        throw FormatError(FormatErrorKind::BadMagic, "dataset: expected magic 'EXRF'");
    }
    ByteReader r(bytes);
    r.bytes(4);
    const auto version = r.u16();
    if (version != kDatasetVersion) {
        throw FormatError(FormatErrorKind::VersionMismatch,
                          "dataset: file version " + std::to_string(version) + ", reader supports " +
                              std::to_string(kDatasetVersion));
    }
    SignalDataset ds;
    const std::uint32_t n = r.u32();
    ds.sample_length = r.u32();
    ds.num_classes = r.u16();
    ds.stft.window_len = static_cast<int>(r.u32());
    ds.stft.stride = static_cast<int>(r.u32());
    const auto win = r.u8();
    if (win > 1) throw FormatError(FormatErrorKind::Parse, "dataset: unknown window id " + std::to_string(win));
    ds.stft.window = static_cast<Window>(win);
    ds.seed = r.u64();
    ds.metadata = r.str();

    const std::uint64_t body = static_cast<std::uint64_t>(n) * ds.sample_length * 2 * 4 + std::uint64_t{n} * 3;
    if (body > r.remaining()) {
        throw FormatError(FormatErrorKind::Truncated, "dataset: payload needs " + std::to_string(body) +
                                                          " bytes, file has " + std::to_string(r.remaining()));
    }
    ds.samples.resize(static_cast<std::size_t>(n) * ds.sample_length * 2);
    for (float& v : ds.samples) v = r.f32();
    ds.labels.resize(n);
    for (auto& l : ds.labels) {
        l = r.u16();
        if (l >= ds.num_classes) throw FormatError(FormatErrorKind::Parse, "dataset: label out of range");
    }
    ds.splits.resize(n);
    for (auto& s : ds.splits) {
        const auto v = r.u8();
        if (v > 2) throw FormatError(FormatErrorKind::Parse, "dataset: bad split tag");
        s = static_cast<Split>(v);
    }
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::Parse, "dataset: trailing bytes after payload");
    return ds;
}

void dataset_write(const SignalDataset& ds, const std::filesystem::path& path) {
    write_file_atomic(path, dataset_encode(ds));
}

SignalDataset dataset_read(const std::filesystem::path& path) { return dataset_decode(read_file(path)); }

std::string dataset_csv(const SignalDataset& ds) {
    std::ostringstream os;
    os << "index,label,split,mean_power\n";
    static constexpr const char* names[] = {"train", "val", "test"};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double p = 0.0;
        const float* s = ds.samples.data() + i * ds.sample_length * 2;
        for (std::size_t k = 0; k < 2 * ds.sample_length; ++k) p += static_cast<double>(s[k]) * s[k];
        p /= ds.sample_length;
        os << i << ',' << ds.labels[i] << ',' << names[static_cast<int>(ds.splits[i])] << ',' << p << '\n';
    }
    return os.str();
}

}  // namespace exitrf::rfdata
