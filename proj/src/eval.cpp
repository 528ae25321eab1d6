#include "exitrf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "exitrf/common.hpp"
#include "json.hpp"

namespace exitrf::eval {

namespace ee = earlyexit;
using nlohmann::json;

namespace {

bool same_double(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

}  // namespace

bool EvalReport::same_as(const EvalReport& o) const {
    if (name != o.name || seed != o.seed || samples != o.samples || exit_counts != o.exit_counts ||
        per_category != o.per_category) {
        return false;
    }
    for (std::size_t k = 0; k < exit_rates.size(); ++k) {
        if (!same_double(exit_rates[k], o.exit_rates[k])) return false;
    }
    return same_double(tolerance, o.tolerance) && same_double(snr_db, o.snr_db) && same_double(accuracy, o.accuracy) &&
           same_double(backbone_accuracy, o.backbone_accuracy) && same_double(early_exit_rate, o.early_exit_rate) &&
           same_double(mean_flops, o.mean_flops) && same_double(backbone_flops, o.backbone_flops);
}

EvalReport summarize(std::span<const ee::InferenceOutcome> outcomes, std::span<const int> labels, int num_classes,
                     std::span<const int> backbone_pred, double backbone_flops) {
    if (outcomes.size() != labels.size()) throw std::invalid_argument("summarize: outcome/label count mismatch");
    if (!backbone_pred.empty() && backbone_pred.size() != labels.size()) {
        throw std::invalid_argument("summarize: backbone prediction count mismatch");
    }
    if (outcomes.empty()) throw std::invalid_argument("summarize: empty evaluation set");
    EvalReport r;
    r.samples = outcomes.size();
    r.backbone_flops = backbone_flops;
    const auto N = static_cast<std::size_t>(num_classes);
    std::vector<std::size_t> cat_count(N, 0), cat_ok(N, 0);
    std::vector<ExitCounts> cat_exits(N, ExitCounts{});
    std::size_t ok = 0, ok_bb = 0;
    double flops = 0;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& o = outcomes[i];
        const int l = labels[i];
        if (l < 0 || l >= num_classes) throw std::invalid_argument("summarize: label out of range");
        if (o.exit_point < 0 || o.exit_point >= ee::kNumExitPoints) {
            throw std::invalid_argument("summarize: exit point out of range");
        }
        const auto lc = static_cast<std::size_t>(l);
        const auto ep = static_cast<std::size_t>(o.exit_point);
        ok += o.label == l;
        cat_ok[lc] += o.label == l;
        ++cat_count[lc];
        ++r.exit_counts[ep];
        ++cat_exits[lc][ep];
        flops += o.flops;
        if (!backbone_pred.empty()) ok_bb += backbone_pred[i] == l;
    }
    const double n = static_cast<double>(r.samples);
    r.accuracy = static_cast<double>(ok) / n;
    if (!backbone_pred.empty()) r.backbone_accuracy = static_cast<double>(ok_bb) / n;
    for (std::size_t k = 0; k < r.exit_rates.size(); ++k) r.exit_rates[k] = static_cast<double>(r.exit_counts[k]) / n;
    r.early_exit_rate = static_cast<double>(r.samples - r.exit_counts[ee::kBackboneExit]) / n;
    r.mean_flops = flops / n;
    for (std::size_t c = 0; c < N; ++c) {
        CategoryStats cs;
        cs.category = static_cast<int>(c);
        cs.count = cat_count[c];
        if (cs.count > 0) {
            const double cn = static_cast<double>(cs.count);
            cs.accuracy = static_cast<double>(cat_ok[c]) / cn;
            for (std::size_t k = 0; k < cs.exit_rates.size(); ++k) {
                cs.exit_rates[k] = static_cast<double>(cat_exits[c][k]) / cn;
            }
        }
        r.per_category.push_back(cs);
    }
    return r;
}

EvalReport evaluate(ee::HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                    const EvalOptions& opt) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty test split");
    const int N = bundle.model.config().num_classes;
    std::vector<int> labels;
    for (const auto* s : samples) {
        if (s->label < 0 || s->label >= N) {
            throw std::invalid_argument("evaluate: sample label " + std::to_string(s->label) + " outside the bundle's " +
                                        std::to_string(N) + " categories");
        }
        labels.push_back(s->label);
    }
    const ee::JudgeFn judge = std::isnan(opt.threshold) ? ee::range_judge(bundle.table) : ee::threshold_judge(opt.threshold);
    const auto outcomes = ee::hybrid_infer(bundle, samples, judge, opt.mask);
    std::vector<int> bb;
    if (opt.with_backbone) bb = cvnn::predict(bundle.model, samples);
    EvalReport r = summarize(outcomes, labels, N, bb, bundle.backbone_flops());
    r.tolerance = std::isnan(opt.threshold) ? bundle.table.tolerance : std::numeric_limits<double>::quiet_NaN();
    r.name = std::isnan(opt.threshold) ? "ranges" : "threshold";
    return r;
}

std::vector<EvalReport> tolerance_sweep(ee::HybridBundle& bundle, const ee::CalibrationInputs& calibration,
                                        int segments, std::vector<double> tolerances,
                                        std::span<const rfdata::Spectrogram* const> samples, ee::GroupBy group_by) {
    std::sort(tolerances.begin(), tolerances.end());
    const ee::ExitRangeTable saved = bundle.table;
    std::vector<EvalReport> out;
    std::vector<int> bb;
    try {
        for (double T : tolerances) {
            bundle.table = ee::calibrate_ranges(calibration, segments, T, group_by);
            EvalOptions opt;
            opt.with_backbone = bb.empty();
            EvalReport r = evaluate(bundle, samples, opt);
            if (bb.empty()) {
                bb = cvnn::predict(bundle.model, samples);
            } else {
                std::size_t ok = 0;
                for (std::size_t i = 0; i < samples.size(); ++i) ok += bb[i] == samples[i]->label;
                r.backbone_accuracy = static_cast<double>(ok) / static_cast<double>(samples.size());
            }
            r.name = "tolerance";
            out.push_back(std::move(r));
        }
    } catch (...) {
        bundle.table = saved;
        throw;
    }
    bundle.table = saved;
    return out;
}

std::vector<EvalReport> snr_sweep(ee::HybridBundle& bundle, const rfdata::SignalDataset& ds,
                                  std::span<const std::size_t> indices, std::span<const double> snr_grid,
                                  std::uint64_t seed) {
    std::vector<EvalReport> out;
    for (std::size_t g = 0; g < snr_grid.size(); ++g) {
        const double snr = snr_grid[g];
        std::vector<rfdata::Spectrogram> specs;
        specs.reserve(indices.size());
        for (std::size_t i : indices) {
            if (snr == rfdata::kNoNoise) {
                specs.push_back(ds.spectrogram(i));
                continue;
            }
            rfdata::Rng rng(derive_seed(seed, 0x534e52u + g, i));
            specs.push_back(rfdata::preprocess(rfdata::add_awgn(ds.frame(i), snr, rng), ds.stft));
        }
        std::vector<const rfdata::Spectrogram*> ptrs;
        for (const auto& s : specs) ptrs.push_back(&s);
        EvalReport r = evaluate(bundle, ptrs);
        r.name = "snr";
        r.snr_db = snr;
        r.seed = seed;
        out.push_back(std::move(r));
    }
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of an empty set");
    std::sort(v.begin(), v.end(), [](double a, double b) { return a < b || (!std::isnan(a) && std::isnan(b)); });
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

EvalReport median_report(std::span<const EvalReport> rs) {
    if (rs.empty()) throw std::invalid_argument("median_report: no reports");
    auto field = [&](auto get) {
        std::vector<double> v;
        for (const auto& r : rs) v.push_back(get(r));
        return median(std::move(v));
    };
    EvalReport m;
    m.name = "median";
    m.seed = rs.front().seed;
    m.tolerance = field([](const EvalReport& r) { return r.tolerance; });
    m.snr_db = field([](const EvalReport& r) { return r.snr_db; });
    m.samples = static_cast<std::size_t>(std::llround(field([](const EvalReport& r) { return static_cast<double>(r.samples); })));
    m.accuracy = field([](const EvalReport& r) { return r.accuracy; });
    m.backbone_accuracy = field([](const EvalReport& r) { return r.backbone_accuracy; });
    for (std::size_t k = 0; k < m.exit_rates.size(); ++k) {
        m.exit_rates[k] = field([k](const EvalReport& r) { return r.exit_rates[k]; });
        m.exit_counts[k] = static_cast<std::size_t>(
            std::llround(field([k](const EvalReport& r) { return static_cast<double>(r.exit_counts[k]); })));
    }
    m.early_exit_rate = field([](const EvalReport& r) { return r.early_exit_rate; });
    m.mean_flops = field([](const EvalReport& r) { return r.mean_flops; });
    m.backbone_flops = field([](const EvalReport& r) { return r.backbone_flops; });
    const std::size_t ncat = rs.front().per_category.size();
    const bool aligned = std::all_of(rs.begin(), rs.end(), [&](const EvalReport& r) { return r.per_category.size() == ncat; });
    if (aligned) {
        for (std::size_t c = 0; c < ncat; ++c) {
            CategoryStats cs;
            cs.category = static_cast<int>(c);
            cs.count = static_cast<std::size_t>(
                std::llround(field([c](const EvalReport& r) { return static_cast<double>(r.per_category[c].count); })));
            cs.accuracy = field([c](const EvalReport& r) { return r.per_category[c].accuracy; });
            for (std::size_t k = 0; k < cs.exit_rates.size(); ++k) {
                cs.exit_rates[k] = field([c, k](const EvalReport& r) { return r.per_category[c].exit_rates[k]; });
            }
            m.per_category.push_back(cs);
        }
    }
    return m;
}

std::uint64_t run_seed(std::uint64_t base, int run, bool same_seed) {
    return same_seed ? base : derive_seed(base, 0x4d43u, static_cast<std::uint64_t>(run));
}

MonteCarloResult monte_carlo(int runs, std::uint64_t base_seed,
                             const std::function<EvalReport(int, std::uint64_t)>& experiment, bool same_seed) {
    if (runs < 1) throw std::invalid_argument("monte_carlo: runs must be >= 1");
    MonteCarloResult res;
    for (int r = 0; r < runs; ++r) {
        const std::uint64_t s = run_seed(base_seed, r, same_seed);
        EvalReport rep = experiment(r, s);
        rep.seed = s;
        res.runs.push_back(std::move(rep));
    }
    res.summary = median_report(res.runs);
    return res;
}

std::vector<ee::SegmentRow> confidence_diagnostics(const ee::CalibrationInputs& inputs, int branch, int category,
                                                   int segments, double tolerance, ee::GroupBy group_by) {
    return ee::segment_group(inputs, branch, category, segments, tolerance, group_by);
}

namespace {

std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

json jnum(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double from_jnum(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw std::invalid_argument("report JSON: bad number '" + s + "'");
    }
    return j.get<double>();
}

}  // namespace

std::string diagnostics_csv(std::span<const ee::SegmentRow> rows) {
    std::ostringstream os;
    os << "segment,lo,hi,count,branch_accuracy,backbone_accuracy,exit\n";
    for (std::size_t b = 0; b < rows.size(); ++b) {
        const auto& r = rows[b];
        os << b << ',' << num(r.range.lo) << ',' << num(r.range.hi) << ',' << r.count << ',' << num(r.branch_accuracy)
           << ',' << num(r.backbone_accuracy) << ',' << (r.exit ? 1 : 0) << '\n';
    }
    return os.str();
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

}  // namespace

std::string reports_csv(std::span<const EvalReport> reports) {
    std::ostringstream os;
    os << "name,seed,tolerance,snr_db,samples,accuracy,backbone_accuracy,exit_b1,exit_b2,exit_b3,exit_b4,"
          "exit_backbone,early_exit_rate,mean_flops,backbone_flops\n";
    for (const auto& r : reports) {
        os << csv_field(r.name) << ',' << r.seed << ',' << num(r.tolerance) << ',' << num(r.snr_db) << ',' << r.samples << ','
           << num(r.accuracy) << ',' << num(r.backbone_accuracy);
        for (double e : r.exit_rates) os << ',' << num(e);
        os << ',' << num(r.early_exit_rate) << ',' << num(r.mean_flops) << ',' << num(r.backbone_flops) << '\n';
    }
    return os.str();
}

std::string reports_json(std::span<const EvalReport> reports) {
    json arr = json::array();
    for (const auto& r : reports) {
        json j;
        j["name"] = r.name;
        j["seed"] = r.seed;
        j["tolerance"] = jnum(r.tolerance);
        j["snr_db"] = jnum(r.snr_db);
        j["samples"] = r.samples;
        j["accuracy"] = jnum(r.accuracy);
        j["backbone_accuracy"] = jnum(r.backbone_accuracy);
        j["exit_counts"] = r.exit_counts;
        j["exit_rates"] = json::array();
        for (double e : r.exit_rates) j["exit_rates"].push_back(jnum(e));
        j["early_exit_rate"] = jnum(r.early_exit_rate);
        j["mean_flops"] = jnum(r.mean_flops);
        j["backbone_flops"] = jnum(r.backbone_flops);
        json cats = json::array();
        for (const auto& c : r.per_category) {
            json jc;
            jc["category"] = c.category;
            jc["count"] = c.count;
            jc["accuracy"] = jnum(c.accuracy);
            jc["exit_rates"] = json::array();
            for (double e : c.exit_rates) jc["exit_rates"].push_back(jnum(e));
            cats.push_back(jc);
        }
        j["per_category"] = cats;
        arr.push_back(j);
    }
    return arr.dump(2) + "\n";
}

std::vector<EvalReport> reports_from_json(std::string_view text) {
    const json arr = json::parse(text);
    if (!arr.is_array()) throw std::invalid_argument("report JSON: top level must be an array");
    std::vector<EvalReport> out;
    for (const auto& j : arr) {
        EvalReport r;
        r.name = j.at("name").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.tolerance = from_jnum(j.at("tolerance"));
        r.snr_db = from_jnum(j.at("snr_db"));
        r.samples = j.at("samples").get<std::size_t>();
        r.accuracy = from_jnum(j.at("accuracy"));
        r.backbone_accuracy = from_jnum(j.at("backbone_accuracy"));
        r.exit_counts = j.at("exit_counts").get<ExitCounts>();
        const auto& er = j.at("exit_rates");
        for (std::size_t k = 0; k < r.exit_rates.size(); ++k) r.exit_rates[k] = from_jnum(er.at(k));
        r.early_exit_rate = from_jnum(j.at("early_exit_rate"));
        r.mean_flops = from_jnum(j.at("mean_flops"));
        r.backbone_flops = from_jnum(j.at("backbone_flops"));
        for (const auto& jc : j.at("per_category")) {
            CategoryStats c;
            c.category = jc.at("category").get<int>();
            c.count = jc.at("count").get<std::size_t>();
            c.accuracy = from_jnum(jc.at("accuracy"));
            const auto& cer = jc.at("exit_rates");
            for (std::size_t k = 0; k < c.exit_rates.size(); ++k) c.exit_rates[k] = from_jnum(cer.at(k));
            r.per_category.push_back(c);
        }
        out.push_back(std::move(r));
    }
    return out;
}

void emit_report(std::span<const EvalReport> reports, ReportFormat format, const std::filesystem::path& path) {
    write_text_atomic(path, format == ReportFormat::Csv ? reports_csv(reports) : reports_json(reports));
}

}  // namespace exitrf::eval
