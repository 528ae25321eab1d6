// Acceptance run: one PASS/FAIL line per criterion. `acceptance 1 4 9` runs a subset.

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "exitrf/common.hpp"
#include "exitrf/eval.hpp"
#include "exitrf/pipeline.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace exitrf;
namespace ee = exitrf::earlyexit;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---- 1 ----
Outcome cconv_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> ch(1, 6), ks(1, 3), st(1, 2), sz(3, 10), bn(1, 3);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const int cin = ch(rng), cout = ch(rng), k = 2 * ks(rng) - 1, s = st(rng), pad = k / 2;
        const int h = std::max(sz(rng), k), w = std::max(sz(rng), k);
        cvnn::CConv conv("c", cin, cout, k, s, pad);
        conv.init(rng);
        const auto x = oracle::random_tensor({bn(rng), cin, h, w}, rng);
        worst = std::max(worst, oracle::max_rel_error(conv.forward(x, cvnn::Mode::Infer),
                                                      oracle::naive_cconv(x, conv.A.value, conv.B.value, cout, k, s, pad)));
    }
    const double t = seconds_since(t0);
    return {worst < 1e-10 && t < 60.0, fmt("200 configs, max rel error %.3g (< 1e-10), %.1f s (< 60 s)", worst, t)};
}

// ---- 2 ----
Outcome gradients() {
    const auto t0 = Clock::now();
    bool ok = true;
    std::ostringstream os;
    for (const auto& r : gradcheck::check_all(2025)) {
        ok = ok && r.checked > 0 && r.worst < 1e-4;
        os << r.name << " " << fmt("%.2g", r.worst) << "; ";
    }
    const double t = seconds_since(t0);
    return {ok && t < 300.0, os.str() + fmt("%.1f s (< 300 s)", t)};
}

// ---- 3 ----
Outcome whitening() {
    std::mt19937_64 rng(103);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(-3.0, 3.0), scale(0.5, 3.0), rho(-0.9, 0.9);
    const int C = 8;
    cvnn::ComplexTensor x({16, C, 8, 8});
    for (int c = 0; c < C; ++c) {
        // Per channel: random offset, scales and I/Q correlation.
        const double sr = scale(rng), si = scale(rng), r = rho(rng), mr = u(rng), mi = u(rng);
        for (int n = 0; n < 16; ++n)
            for (std::size_t k = 0; k < 64; ++k) {
                const double s1 = g(rng), s2 = g(rng);
                const std::size_t i = x.plane_offset(n, c) + k;
                x.re[i] = mr + sr * s1;
                x.im[i] = mi + si * (r * s1 + std::sqrt(1.0 - r * r) * s2);
            }
    }
    cvnn::CBatchNorm bn("bn", C);
    bn.forward(x, cvnn::Mode::Train);
    double worst = 0.0;
    for (const auto& cov : oracle::channel_covariance(bn.whitened())) {
        worst = std::max({worst, std::abs(cov[0] - 1.0), std::abs(cov[1]), std::abs(cov[2] - 1.0)});
    }
    return {worst < 1e-3, fmt("%d channels, |rho| < 0.9, max |cov - I| %.3g (< 1e-3)", C, worst)};
}

// ---- 4 ----
Outcome algorithm_fixture() {
    const auto t = ee::calibrate_ranges(fixtures::hand_fixture(), 3, 0.05);
    const bool merged = t.cell(0, 1) == ee::Cell{{0.5, 0.9}};
    auto same = fixtures::hand_fixture();
    for (auto& bp : same.branch_pred) bp = same.backbone_pred;
    const auto zero = ee::calibrate_ranges(same, 3, 0.0);
    bool empty = true;
    for (const auto& c : zero.cells) empty = empty && c.empty();
    return {merged && empty, fmt("merged range %s; T = 0 with branch == backbone %s", merged ? "[0.5, 0.9]" : "WRONG",
                                 empty ? "empty" : "NOT empty")};
}

// ---- 6 ----
Outcome flops_ratio() {
    std::ostringstream os;
    bool ok = true;
    for (const char* profile : {"desk", "paper"}) {
        auto cfg = pipeline::RunConfig::named(profile);
        rfdata::SignalDataset shape;
        shape.num_classes = static_cast<std::uint16_t>(cfg.data.classes);
        const auto mc = pipeline::model_config(cfg, [&] {
            rfdata::SignalDataset d;
            d.num_classes = static_cast<std::uint16_t>(cfg.data.classes);
            d.sample_length = static_cast<std::uint32_t>(cfg.data.length);
            d.stft = {cfg.data.window, cfg.data.stride, cfg.data.window_fn};
            return d;
        }());
        std::uint64_t cx = 0, re = 0;
        for (const auto& l : cvnn::layer_costs(mc, cvnn::Arithmetic::Complex)) cx += l.flops;
        for (const auto& l : cvnn::layer_costs(mc, cvnn::Arithmetic::Real)) re += l.flops;
        const double r = static_cast<double>(cx) / static_cast<double>(re);
        ok = ok && r >= 3.6 && r <= 4.2;
        os << profile << fmt(" %.2f/%.2f MFLOPs = %.3f; ", cx / 1e6, re / 1e6, r);
    }
    return {ok, os.str() + "band [3.6, 4.2]"};
}

// ---- 8 ----
Outcome threshold_equivalence() {
    std::mt19937_64 rng(108);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> classes(2, 12), grid(0, 10);
    const double th = 0.6;
    std::size_t mismatches = 0, exits = 0;
    for (int i = 0; i < 10000; ++i) {
        const int N = classes(rng);
        std::vector<double> p(static_cast<std::size_t>(N));
        double s = 0.0;
        // Every third vector comes from a coarse grid so exact 0.6 maxima occur.
        for (auto& v : p) s += (v = i % 3 == 0 ? grid(rng) : u(rng));
        if (s == 0.0) p[0] = s = 1.0;
        for (auto& v : p) v /= s;
        const auto table = ee::ExitRangeTable::uniform(ee::kNumBranches, N, {th, 1.0, true});
        const auto a = ee::conventional_threshold_judge(th, p);
        const auto b = ee::judge_exit(table, i % ee::kNumBranches, p);
        mismatches += !(a == b);
        exits += a.exit;
    }
    return {mismatches == 0, fmt("10000 vectors, %zu mismatches, %zu exits", mismatches, exits)};
}

// ---- 10 ----
template <class Decode>
std::string fuzz(const char* what, const std::vector<std::uint8_t>& bytes, Decode decode, bool checksummed,
                 std::mt19937_64& rng, bool& ok) {
    std::size_t typed = 0, accepted = 0, untyped = 0;
    std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
    for (int i = 0; i < 200; ++i) {
        auto b = bytes;
        if (i % 2) {
            b.resize(pos(rng));
        } else {
            b[pos(rng)] ^= static_cast<std::uint8_t>(1u << (i / 2 % 8));
        }
        try {
            decode(b);
            ++accepted;
        } catch (const FormatError&) {
            ++typed;
        } catch (...) {
            ++untyped;
        }
    }
    if (untyped > 0 || (checksummed && accepted > 0)) ok = false;
    return fmt("%s %zu typed/%zu accepted/%zu untyped", what, typed, accepted, untyped);
}

Outcome serialization(pipeline::Experiment& x) {
    bool ok = true;
    std::ostringstream os;
    const auto ds = rfdata::dataset_encode(x.dataset);
    const bool ds_ok = rfdata::dataset_decode(ds) == x.dataset && rfdata::dataset_encode(rfdata::dataset_decode(ds)) == ds;
    const auto mb = cvnn::model_encode(x.bundle.model);
    auto model_back = cvnn::model_decode(mb);
    const bool m_ok = cvnn::model_encode(model_back) == mb &&
                      cvnn::predict(model_back, x.data.test) == cvnn::predict(x.bundle.model, x.data.test);
    const auto bb = ee::bundle_encode(x.bundle);
    auto bundle_back = ee::bundle_decode(bb);
    const bool b_ok = ee::bundle_encode(bundle_back) == bb && bundle_back.branches == x.bundle.branches &&
                      ee::hybrid_infer(bundle_back, x.data.test) == ee::hybrid_infer(x.bundle, x.data.test);
    const auto rt = ee::ranges_encode(x.bundle.table);
    const bool r_ok = ee::ranges_decode(rt) == x.bundle.table && ee::ranges_encode(ee::ranges_decode(rt)) == rt;
    ok = ds_ok && m_ok && b_ok && r_ok;
    os << "round-trips dataset " << (ds_ok ? "ok" : "FAIL") << ", model " << (m_ok ? "ok" : "FAIL") << ", bundle "
       << (b_ok ? "ok" : "FAIL") << ", ranges " << (r_ok ? "ok" : "FAIL") << "; corruption: ";
    std::mt19937_64 rng(110);
    os << fuzz("dataset", ds, [](auto& b) { rfdata::dataset_decode(b); }, false, rng, ok) << ", ";
    os << fuzz("model", mb, [](auto& b) { cvnn::model_decode(b); }, true, rng, ok) << ", ";
    os << fuzz("bundle", bb, [](auto& b) { ee::bundle_decode(b); }, true, rng, ok) << ", ";
    const std::vector<std::uint8_t> rtb(rt.begin(), rt.end());
    os << fuzz("ranges", rtb, [](auto& b) { ee::ranges_decode(std::string(b.begin(), b.end())); }, false, rng, ok);
    return {ok, os.str()};
}

// ---- 5 ----
Outcome monotonicity(pipeline::Experiment& x, const pipeline::RunConfig& cfg) {
    const auto grid = eval::kToleranceGrid;
    std::vector<ee::ExitRangeTable> tables;
    for (double t : grid) tables.push_back(ee::calibrate_ranges(x.calibration, cfg.calibration.segments, t, cfg.calibration.group_by));
    bool nested = true;
    for (std::size_t i = 1; i < tables.size(); ++i) nested = nested && ee::table_subset(tables[i - 1], tables[i]);
    const auto rs = eval::tolerance_sweep(x.bundle, x.calibration, cfg.calibration.segments, grid, x.data.test,
                                          cfg.calibration.group_by);
    bool rising = true;
    std::ostringstream os;
    for (std::size_t i = 0; i < rs.size(); ++i) {
        if (i > 0) rising = rising && rs[i].early_exit_rate >= rs[i - 1].early_exit_rate;
        os << fmt("T=%.2f exit %.3f; ", rs[i].tolerance, rs[i].early_exit_rate);
    }
    return {nested && rising, os.str() + (nested ? "tables nested" : "tables NOT nested")};
}

// ---- 9 ----
Outcome snr_trend(pipeline::Experiment& x, const pipeline::RunConfig& cfg) {
    const std::vector<double> grid{20.0, -5.0};
    const auto rs = eval::snr_sweep(x.bundle, x.dataset, x.data.test_indices, grid, cfg.eval.seed);
    const bool acc = rs[0].accuracy >= rs[1].accuracy;
    const bool cost = rs[1].mean_flops >= 0.95 * rs[0].mean_flops;
    return {acc && cost, fmt("accuracy %.3f @20 dB vs %.3f @-5 dB; mean FLOPs %.3f M @20 dB vs %.3f M @-5 dB (ratio %.3f >= 0.95)",
                             rs[0].accuracy, rs[1].accuracy, rs[0].mean_flops / 1e6, rs[1].mean_flops / 1e6,
                             rs[1].mean_flops / rs[0].mean_flops)};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto wanted = [&](int c) { return only.empty() || only.count(c); };

    std::array<std::optional<Outcome>, 11> results;
    auto report = [&](int c, Outcome o) {
        std::cout << "criterion " << c << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
        results[static_cast<std::size_t>(c)] = std::move(o);
    };

    if (wanted(1)) report(1, cconv_oracle());
    if (wanted(2)) report(2, gradients());
    if (wanted(3)) report(3, whitening());
    if (wanted(4)) report(4, algorithm_fixture());
    if (wanted(6)) report(6, flops_ratio());
    if (wanted(8)) report(8, threshold_equivalence());

    if (wanted(5) || wanted(7) || wanted(9) || wanted(10)) {
        // Desk experiment: 15 Monte Carlo runs of the full pipeline. Run 0 doubles
        // as the fixture for the tolerance, SNR and serialization criteria.
        const auto cfg = pipeline::RunConfig::named("desk");
        const int runs = wanted(7) ? cfg.eval.runs : 1;
        const auto t0 = Clock::now();
        std::optional<pipeline::Experiment> fixture;
        const auto mc = eval::monte_carlo(runs, cfg.eval.seed, [&](int r, std::uint64_t seed) {
            const auto tr = Clock::now();
            auto x = pipeline::run_experiment(cfg.with_seed(seed));
            const auto& rep = x.report;
            std::cout << fmt("  run %2d seed %20llu: hybrid %.4f backbone %.4f exit %.4f cost %.2f%% (%.1f s)", r,
                             static_cast<unsigned long long>(seed), rep.accuracy, rep.backbone_accuracy,
                             rep.early_exit_rate, 100.0 * rep.mean_flops / rep.backbone_flops, seconds_since(tr))
                      << std::endl;
            auto out = rep;
            if (r == 0) fixture = std::move(x);
            return out;
        });
        const double t = seconds_since(t0);
        if (wanted(5)) report(5, monotonicity(*fixture, cfg));
        if (wanted(7)) {
            const auto& m = mc.summary;
            const bool acc = m.accuracy >= m.backbone_accuracy - 0.01;
            const bool cost = m.mean_flops <= 0.6 * m.backbone_flops;
            const bool exit = m.early_exit_rate >= 0.5;
            const bool time = t < 45 * 60;
            report(7, {acc && cost && exit && time,
                       fmt("median of %d runs: hybrid %.4f vs backbone %.4f (>= -1 pp); cost %.2f of %.2f MFLOPs = %.1f%% "
                           "(<= 60%%); exit rate %.1f%% (>= 50%%); %.1f min (< 45 min)",
                           runs, m.accuracy, m.backbone_accuracy, m.mean_flops / 1e6, m.backbone_flops / 1e6,
                           100.0 * m.mean_flops / m.backbone_flops, 100.0 * m.early_exit_rate, t / 60.0)});
        }
        if (wanted(9)) report(9, snr_trend(*fixture, cfg));
        if (wanted(10)) report(10, serialization(*fixture));
    }

    int failed = 0, ran = 0;
    for (const auto& r : results) {
        if (!r) continue;
        ++ran;
        failed += !r->pass;
    }
    std::cout << (failed ? "FAILED " : "PASSED ") << ran - failed << "/" << ran << " criteria" << std::endl;
    return failed ? 1 : 0;
}
