#include "cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fcntl.h>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <unistd.h>

#include "exitrf/common.hpp"
#include "exitrf/pipeline.hpp"

namespace exitrf::cli {

namespace fs = std::filesystem;
namespace ee = earlyexit;
using pipeline::RunConfig;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr const char* kDataset = "dataset.exrf";
constexpr const char* kBackbone = "backbone.excv";
constexpr const char* kBundle = "bundle.exhb";
constexpr const char* kRanges = "ranges.exrt";

/// Advisory lock on the artifact directory, released on destruction.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".exitrf.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw UsageError("artifact directory " + dir.string() + " is locked by another run (remove " +
                             path_.string() + " if that run is gone)");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

struct Context {
    RunConfig cfg;
    fs::path dir;
    std::ostream& out;
    std::ostream& err;

    fs::path at(const char* name) const { return dir / name; }
    fs::path need(const char* name, const char* what, const char* producer) const {
        fs::path p = at(name);
        if (!fs::exists(p)) {
            throw UsageError(std::string("missing ") + what + " " + p.string() + " (run `exitrf " + producer + "` first)");
        }
        return p;
    }
    void log(const std::string& s) const { err << "[exitrf] " << s << '\n'; }
};

std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * v << '%';
    return os.str();
}

std::string mflops(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v / 1e6 << " MFLOPs";
    return os.str();
}

void print_report(std::ostream& os, const eval::EvalReport& r) {
    os << "samples " << r.samples << "  accuracy " << pct(r.accuracy);
    if (!std::isnan(r.backbone_accuracy)) os << "  (backbone " << pct(r.backbone_accuracy) << ")";
    os << "\nmean cost " << mflops(r.mean_flops) << "  (backbone " << mflops(r.backbone_flops) << ", "
       << pct(r.mean_flops / r.backbone_flops) << ")\n";
    os << "exit " << pct(r.early_exit_rate) << " (";
    for (int m = 0; m < ee::kNumBranches; ++m) os << (m ? ", " : "") << pct(r.exit_rates[static_cast<std::size_t>(m)]);
    os << ")  backbone " << pct(r.exit_rates[ee::kBackboneExit]) << '\n';
}

void write_reports(const Context& c, const std::string& stem, const std::vector<eval::EvalReport>& rs) {
    eval::emit_report(rs, eval::ReportFormat::Json, c.at((stem + ".json").c_str()));
    eval::emit_report(rs, eval::ReportFormat::Csv, c.at((stem + ".csv").c_str()));
    c.log("wrote " + (c.dir / (stem + ".json")).string() + " and .csv");
}

ee::BranchMask parse_mask(const std::string& s) {
    if (s.size() != ee::kNumBranches || s.find_first_not_of("01") != std::string::npos) {
        throw UsageError("--branches expects " + std::to_string(ee::kNumBranches) + " digits of 0/1, e.g. 1000");
    }
    ee::BranchMask m{};
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = s[i] == '1';
    return m;
}

struct Loaded {
    rfdata::SignalDataset ds;
    pipeline::Prepared data;
};

Loaded load_dataset(const Context& c) {
    Loaded l;
    l.ds = rfdata::dataset_read(c.need(kDataset, "dataset", "synth"));
    l.data = pipeline::prepare(l.ds);
    return l;
}

ee::HybridBundle load_calibrated(const Context& c) {
    const fs::path bundle = c.need(kBundle, "bundle", "train-branches");
    const fs::path ranges = c.need(kRanges, "range table", "calibrate");
    ee::HybridBundle b = ee::load_bundle(bundle);
    b.table = ee::load_ranges(ranges, b.model.config().num_classes);
    b.validate();
    return b;
}

// ---- subcommands ----

int cmd_synth(const Context& c, bool csv) {
    const auto ds = pipeline::synthesize(c.cfg);
    rfdata::dataset_write(ds, c.at(kDataset));
    if (csv) write_text_atomic(c.at("dataset.csv"), rfdata::dataset_csv(ds));
    c.out << "dataset: " << ds.size() << " frames, " << ds.num_classes << " classes, length " << ds.sample_length
          << " -> " << c.at(kDataset).string() << '\n';
    return 0;
}

int cmd_train_backbone(const Context& c) {
    const Loaded l = load_dataset(c);
    cvnn::CvnnModel model(pipeline::model_config(c.cfg, l.ds));
    const auto result = cvnn::train_backbone(model, l.data.train, l.data.val, pipeline::train_config(c.cfg),
                                             [&](const cvnn::EpochMetrics& e) {
                                                 std::ostringstream os;
                                                 os << "epoch " << e.epoch << " loss " << e.train_loss << " train "
                                                    << pct(e.train_accuracy) << " val " << pct(e.val_accuracy);
                                                 c.log(os.str());
                                             });
    cvnn::save_model(model, c.at(kBackbone));
    write_text_atomic(c.at("train_metrics.csv"), cvnn::metrics_csv(result));
    c.out << "backbone: best epoch " << result.best_epoch << ", val accuracy " << pct(result.best_val_accuracy)
          << " -> " << c.at(kBackbone).string() << '\n';
    return 0;
}

int cmd_train_branches(const Context& c) {
    const Loaded l = load_dataset(c);
    ee::HybridBundle b;
    b.model = cvnn::load_model(c.need(kBackbone, "backbone model", "train-backbone"));
    if (b.model.config().num_classes != l.ds.num_classes) {
        throw UsageError("backbone has " + std::to_string(b.model.config().num_classes) + " classes, dataset has " +
                         std::to_string(l.ds.num_classes));
    }
    b.branches = ee::train_branches(b.model, l.data.train, pipeline::forest_config(c.cfg));
    // No ranges yet: an all-empty table never exits early.
    b.table = ee::ExitRangeTable(ee::kNumBranches, b.model.config().num_classes);
    ee::save_bundle(b, c.at(kBundle));
    std::error_code ec;
    fs::remove(c.at(kRanges), ec);  // stale once the forests change
    for (int m = 0; m < ee::kNumBranches; ++m) {
        const auto& f = b.branches[static_cast<std::size_t>(m)];
        c.out << "branch " << m + 1 << ": " << f.trees.size() << " trees, " << f.num_features << " features, oob "
              << pct(f.oob_accuracy) << ", " << mflops(f.flops()) << '\n';
    }
    return 0;
}

int cmd_calibrate(const Context& c) {
    const Loaded l = load_dataset(c);
    ee::HybridBundle b = ee::load_bundle(c.need(kBundle, "bundle", "train-branches"));
    const auto in = ee::collect_calibration_inputs(b.model, b.branches, l.data.val);
    std::vector<std::string> warnings;
    const auto& cc = c.cfg.calibration;
    b.table = ee::calibrate_ranges(in, cc.segments, cc.tolerance, cc.group_by, &warnings);
    for (const auto& w : warnings) c.log("warning: " + w);

    std::ostringstream diag;
    diag << "branch,category,segment,lo,hi,count,branch_accuracy,backbone_accuracy,exit\n";
    for (int m = 0; m < ee::kNumBranches; ++m) {
        for (int n = 0; n < in.num_classes; ++n) {
            const auto rows = eval::confidence_diagnostics(in, m, n, cc.segments, cc.tolerance, cc.group_by);
            std::istringstream body(eval::diagnostics_csv(rows));
            std::string line;
            std::getline(body, line);
            while (std::getline(body, line)) diag << m << ',' << n << ',' << line << '\n';
        }
    }
    ee::save_ranges(b.table, c.at(kRanges));
    ee::save_bundle(b, c.at(kBundle));
    write_text_atomic(c.at("calibration.csv"), diag.str());
    std::size_t nonempty = 0;
    for (const auto& cell : b.table.cells) nonempty += !cell.empty();
    c.out << "ranges: S=" << cc.segments << " T=" << cc.tolerance << " D=" << in.size() << ", " << nonempty << "/"
          << b.table.cells.size() << " cells can exit -> " << c.at(kRanges).string() << '\n';
    return 0;
}

int cmd_evaluate(const Context& c, const std::string& mask, const std::optional<double>& threshold) {
    ee::HybridBundle b = load_calibrated(c);
    const Loaded l = load_dataset(c);
    eval::EvalOptions opt;
    if (!mask.empty()) opt.mask = parse_mask(mask);
    if (threshold) opt.threshold = *threshold;
    eval::EvalReport r = eval::evaluate(b, l.data.test, opt);
    r.seed = l.ds.seed;
    write_reports(c, "report", {r});
    print_report(c.out, r);
    return 0;
}

int cmd_sweep_tolerance(const Context& c) {
    ee::HybridBundle b = load_calibrated(c);
    const Loaded l = load_dataset(c);
    const auto in = ee::collect_calibration_inputs(b.model, b.branches, l.data.val);
    const auto rs = eval::tolerance_sweep(b, in, c.cfg.calibration.segments, c.cfg.eval.tolerances, l.data.test,
                                          c.cfg.calibration.group_by);
    write_reports(c, "sweep_tolerance", rs);
    for (const auto& r : rs) {
        c.out << "T=" << r.tolerance << "  accuracy " << pct(r.accuracy) << "  exit " << pct(r.early_exit_rate)
              << "  cost " << mflops(r.mean_flops) << '\n';
    }
    return 0;
}

int cmd_sweep_snr(const Context& c) {
    ee::HybridBundle b = load_calibrated(c);
    const Loaded l = load_dataset(c);
    const auto rs = eval::snr_sweep(b, l.ds, l.data.test_indices, c.cfg.eval.snr_grid, c.cfg.eval.seed);
    write_reports(c, "sweep_snr", rs);
    for (const auto& r : rs) {
        c.out << "SNR " << r.snr_db << " dB  accuracy " << pct(r.accuracy) << "  exit " << pct(r.early_exit_rate)
              << "  cost " << mflops(r.mean_flops) << '\n';
    }
    return 0;
}

int cmd_monte_carlo(const Context& c) {
    const auto mc = eval::monte_carlo(c.cfg.eval.runs, c.cfg.eval.seed, [&](int run, std::uint64_t seed) {
        c.log("run " + std::to_string(run + 1) + "/" + std::to_string(c.cfg.eval.runs) + " seed " + std::to_string(seed));
        return pipeline::run_experiment(c.cfg.with_seed(seed), [&](const std::string& s) { c.log("  " + s); }).report;
    });
    std::vector<eval::EvalReport> all = mc.runs;
    all.push_back(mc.summary);
    write_reports(c, "monte_carlo", all);
    c.out << "median over " << mc.runs.size() << " runs:\n";
    print_report(c.out, mc.summary);
    return 0;
}

int cmd_infer(const Context& c, std::optional<std::size_t> index, std::optional<double> snr) {
    ee::HybridBundle b = load_calibrated(c);
    const auto ds = rfdata::dataset_read(c.need(kDataset, "dataset", "synth"));
    std::size_t i = 0;
    if (index) {
        i = *index;
    } else {
        const auto test = ds.indices(rfdata::Split::Test);
        if (test.empty()) throw UsageError("dataset has no test samples; pass --index");
        i = test.front();
    }
    if (i >= ds.size()) throw UsageError("--index " + std::to_string(i) + " out of range (" + std::to_string(ds.size()) + " frames)");
    rfdata::IqFrame f = ds.frame(i);
    if (snr) {
        rfdata::Rng rng(derive_seed(c.cfg.eval.seed, 0x494e46u, i));
        f = rfdata::add_awgn(f, *snr, rng);
    }
    const auto spec = rfdata::preprocess(f, ds.stft);
    const auto o = ee::hybrid_infer(b, spec);
    c.out << "sample " << i << " (true label " << ds.labels[i] << ")\n";
    c.out << "label " << o.label << '\n';
    c.out << "exit " << (o.exit_point == ee::kBackboneExit ? std::string("backbone") : "branch " + std::to_string(o.exit_point + 1))
          << '\n';
    c.out << "confidence " << o.confidence << '\n';
    c.out << "flops " << std::setprecision(17) << o.flops << " (" << mflops(o.flops) << ")\n";
    return 0;
}

void info_model(std::ostream& os, cvnn::CvnnModel& m) {
    const auto& k = m.config();
    os << "model: " << k.num_classes << " classes, input " << k.input_h << "x" << k.input_w << ", channels";
    for (int g = 0; g < 4; ++g) os << ' ' << k.group_channels(g);
    os << ", stem k" << k.stem_kernel << " s" << k.stem_stride << '\n';
    os << "total " << m.total_flops() << " FLOPs (" << mflops(static_cast<double>(m.total_flops())) << ")\n";
    for (int t = 0; t < cvnn::kNumTaps; ++t) {
        os << "tap " << t + 1 << " prefix " << m.prefix_flops(t) << " FLOPs\n";
    }
    os << "layers:\n";
    for (const auto& l : m.layer_flops()) os << "  " << std::left << std::setw(18) << l.name << l.flops << '\n';
}

void info_table(std::ostream& os, const ee::ExitRangeTable& t) {
    os << "ranges: " << t.num_branches << " branches x " << t.num_classes << " categories, S=" << t.segments
       << " T=" << t.tolerance << " D=" << t.validation_size << '\n';
    for (int m = 0; m < t.num_branches; ++m) {
        std::size_t cells = 0;
        for (int n = 0; n < t.num_classes; ++n) cells += !t.cell(m, n).empty();
        os << "  branch " << m + 1 << ": " << cells << " categories with exit ranges\n";
    }
}

int cmd_info(const Context& c, const std::string& file) {
    fs::path p = file.empty() ? fs::path() : fs::path(file);
    if (p.empty()) {
        for (const char* name : {kBundle, kBackbone, kRanges, kDataset}) {
            if (fs::exists(c.at(name))) {
                p = c.at(name);
                break;
            }
        }
        if (p.empty()) throw UsageError("no artifacts in " + c.dir.string() + " (run `exitrf synth` first)");
    }
    const auto ext = p.extension().string();
    if (ext == ".exhb") {
        ee::HybridBundle b = ee::load_bundle(p);
        if (file.empty() && fs::exists(c.at(kRanges))) b.table = ee::load_ranges(c.at(kRanges), b.model.config().num_classes);
        c.out << "bundle " << p.string() << '\n';
        c.out << "N = " << b.model.config().num_classes << '\n';
        info_model(c.out, b.model);
        for (int m = 0; m < ee::kNumBranches; ++m) {
            const auto& f = b.branches[static_cast<std::size_t>(m)];
            c.out << "branch " << m + 1 << ": " << f.trees.size() << " trees, " << f.num_features
                  << " features, mean path " << f.mean_path_length << ", " << f.flops() << " FLOPs\n";
        }
        info_table(c.out, b.table);
    } else if (ext == ".excv") {
        cvnn::CvnnModel m = cvnn::load_model(p);
        info_model(c.out, m);
    } else if (ext == ".exrt") {
        info_table(c.out, ee::load_ranges(p));
    } else if (ext == ".exrf") {
        const auto ds = rfdata::dataset_read(p);
        c.out << "dataset " << p.string() << ": " << ds.size() << " frames, " << ds.num_classes << " classes, length "
              << ds.sample_length << ", STFT " << ds.stft.window_len << "/" << ds.stft.stride << ", splits "
              << ds.indices(rfdata::Split::Train).size() << "/" << ds.indices(rfdata::Split::Val).size() << "/"
              << ds.indices(rfdata::Split::Test).size() << '\n';
    } else {
        throw UsageError("info: unrecognised artifact type '" + ext + "'");
    }
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
    // `--section.key=value` overrides are peeled off before CLI11 sees the line.
    std::vector<std::pair<std::string, std::string>> overrides;
    std::vector<std::string> args;
    for (std::size_t i = 0; i < args_in.size(); ++i) {
        const std::string& a = args_in[i];
        const auto eq = a.find('=');
        const auto dot = a.find('.');
        if (i > 0 && a.rfind("--", 0) == 0 && dot != std::string::npos && eq != std::string::npos && dot < eq) {
            overrides.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
        } else {
            args.push_back(a);
        }
    }

    CLI::App app{"Hybrid complex CNN + random forest early-exit toolkit"};
    app.name("exitrf");
    app.require_subcommand(1, 1);
    app.fallthrough();  // inherited: global options may follow the subcommand
    std::string profile = "desk";
    std::string config_file;
    std::string artifacts;
    app.add_option("--profile", profile, "Built-in parameter profile (desk|paper)");
    app.add_option("--config", config_file, "INI config file layered over the profile");
    app.add_option("--artifacts", artifacts, "Artifact directory (default $EXITRF_ARTIFACTS or ./artifacts)");
    app.footer("Any config key can be overridden with --section.key=value, e.g. --train.epochs=4");

    bool csv = false;
    std::string mask;
    std::optional<double> threshold;
    std::optional<std::size_t> index;
    std::optional<double> snr;
    std::string info_file;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
    synth->add_flag("--csv", csv, "Also write per-sample metadata CSV");
    app.add_subcommand("train-backbone", "Train the complex residual backbone");
    app.add_subcommand("train-branches", "Fit one random forest per tap point");
    app.add_subcommand("calibrate", "Compute exit ranges on the validation split");
    auto* evaluate = app.add_subcommand("evaluate", "Hybrid inference over the test split");
    evaluate->add_option("--branches", mask, "Enabled branches as 4 binary digits, e.g. 1000");
    evaluate->add_option("--threshold", threshold, "Use the single-threshold baseline instead of the range table")
        ->check(CLI::Range(0.0, 1.0));
    app.add_subcommand("sweep-tolerance", "Recalibrate and evaluate across the tolerance grid");
    app.add_subcommand("sweep-snr", "Evaluate the test split re-noised across the SNR grid");
    app.add_subcommand("monte-carlo", "Repeat the full pipeline with derived seeds and report medians");
    auto* infer = app.add_subcommand("infer", "Classify one sample and report its exit point and cost");
    infer->add_option("--index", index, "Dataset frame index (default: first test frame)");
    infer->add_option("--snr", snr, "Add white noise at this SNR (dB) first");
    auto* info = app.add_subcommand("info", "Describe an artifact (bundle, model, range table or dataset)");
    info->add_option("file", info_file, "Artifact path (default: newest pipeline artifact)");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        if (!rev.empty()) rev.pop_back();
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "exitrf: " << e.what() << "\n" << "run `exitrf --help` for usage\n";
        return 2;
    }

    try {
        RunConfig cfg = RunConfig::named(profile);
        if (!config_file.empty()) cfg.apply_ini_file(config_file);
        for (const auto& [k, v] : overrides) cfg.set(k, v);
        cfg.validate();

        fs::path dir = artifacts;
        if (dir.empty()) dir = cfg.artifacts;
        if (dir.empty()) {
            const char* env = std::getenv("EXITRF_ARTIFACTS");
            dir = env && *env ? fs::path(env) : fs::path("artifacts");
        }
        Context c{cfg, dir, out, err};
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "info") return cmd_info(c, info_file);
        DirLock lock(dir);
        if (cmd == "synth") return cmd_synth(c, csv);
        if (cmd == "train-backbone") return cmd_train_backbone(c);
        if (cmd == "train-branches") return cmd_train_branches(c);
        if (cmd == "calibrate") return cmd_calibrate(c);
        if (cmd == "evaluate") return cmd_evaluate(c, mask, threshold);
        if (cmd == "sweep-tolerance") return cmd_sweep_tolerance(c);
        if (cmd == "sweep-snr") return cmd_sweep_snr(c);
        if (cmd == "monte-carlo") return cmd_monte_carlo(c);
        if (cmd == "infer") return cmd_infer(c, index, snr);
        err << "exitrf: unhandled command " << cmd << '\n';
        return 2;
    } catch (const UsageError& e) {
        err << "exitrf: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        err << "exitrf: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "exitrf: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace exitrf::cli
