#include "exitrf/earlyexit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "exitrf/common.hpp"

namespace exitrf::earlyexit {

std::vector<double> extract_branch_features(const cvnn::ComplexTensor& tap, int n) {
    if (n < 0 || n >= tap.shape.n) throw std::out_of_range("extract_branch_features: sample index out of range");
    const int C = tap.shape.c;
    const std::size_t P = tap.shape.plane();
    std::vector<double> v(2 * static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        const std::size_t off = tap.plane_offset(n, c);
        double re = 0, im = 0;
        for (std::size_t k = 0; k < P; ++k) {
            re += tap.re[off + k];
            im += tap.im[off + k];
        }
        v[static_cast<std::size_t>(c)] = re / static_cast<double>(P);
        v[static_cast<std::size_t>(C + c)] = im / static_cast<double>(P);
    }
    return v;
}

forest::FeatureMatrix extract_branch_features_batch(const cvnn::ComplexTensor& tap) {
    forest::FeatureMatrix m(0, 2 * static_cast<std::size_t>(tap.shape.c));
    for (int n = 0; n < tap.shape.n; ++n) m.push_row(extract_branch_features(tap, n));
    return m;
}

forest::FeatureRecipe recipe_for(const cvnn::ComplexTensor& tap, int tap_index) {
    return {tap_index, tap.shape.c, tap.shape.h, tap.shape.w};
}

int argmax(std::span<const double> p) {
    if (p.empty()) throw std::invalid_argument("argmax: empty vector");
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::string_view to_string(GroupBy g) {
    switch (g) {
        case GroupBy::BranchPrediction: return "branch";
        case GroupBy::TrueLabel: return "label";
        case GroupBy::BackbonePrediction: return "backbone";
    }
    return "?";
}

GroupBy parse_group_by(std::string_view s) {
    if (s == "branch") return GroupBy::BranchPrediction;
    if (s == "label") return GroupBy::TrueLabel;
    if (s == "backbone") return GroupBy::BackbonePrediction;
    throw std::invalid_argument("unknown calibration grouping '" + std::string(s) + "' (branch|label|backbone)");
}

void CalibrationInputs::validate() const {
    if (num_classes < 2) throw std::invalid_argument("calibration: num_classes must be >= 2");
    const std::size_t D = correct.size();
    if (backbone_pred.size() != D) throw std::invalid_argument("calibration: backbone prediction count mismatch");
    auto in_range = [&](int l) { return l >= 0 && l < num_classes; };
    for (std::size_t i = 0; i < D; ++i) {
        if (!in_range(correct[i]) || !in_range(backbone_pred[i])) {
            throw std::invalid_argument("calibration: label out of range at sample " + std::to_string(i));
        }
    }
    for (int m = 0; m < kNumBranches; ++m) {
        const auto& bp = branch_pred[static_cast<std::size_t>(m)];
        const auto& cf = confidence[static_cast<std::size_t>(m)];
        if (bp.size() != D || cf.size() != D * static_cast<std::size_t>(num_classes)) {
            throw std::invalid_argument("calibration: branch " + std::to_string(m) + " sequences do not match D");
        }
        if (!std::all_of(bp.begin(), bp.end(), in_range)) {
            throw std::invalid_argument("calibration: branch " + std::to_string(m) + " label out of range");
        }
    }
}

bool cell_subset(const Cell& a, const Cell& b) {
    // Union of b as disjoint pieces; upper ends are closed, so touching pieces join.
    Cell u(b);
    std::sort(u.begin(), u.end(), [](const Interval& x, const Interval& y) {
        return x.lo != y.lo ? x.lo < y.lo : (!x.lo_open && y.lo_open);
    });
    Cell pieces;
    for (const Interval& y : u) {
        if (!pieces.empty() && y.lo <= pieces.back().hi) {
            pieces.back().hi = std::max(pieces.back().hi, y.hi);
        } else {
            pieces.push_back(y);
        }
    }
    for (const Interval& x : a) {
        const bool covered = std::any_of(pieces.begin(), pieces.end(), [&](const Interval& y) {
            const bool lo_ok = y.lo < x.lo || (y.lo == x.lo && (!y.lo_open || x.lo_open));
            return lo_ok && x.hi <= y.hi;
        });
        if (!covered) return false;
    }
    return true;
}

ExitRangeTable::ExitRangeTable(int branches, int classes)
    : num_branches(branches), num_classes(classes), cells(static_cast<std::size_t>(branches * classes)) {
    if (branches < 1 || classes < 1) throw std::invalid_argument("range table: empty shape");
}

bool ExitRangeTable::contains(int m, int n, double p) const {
    const Cell& c = cell(m, n);
    return std::any_of(c.begin(), c.end(), [p](const Interval& iv) { return iv.contains(p); });
}

ExitRangeTable ExitRangeTable::uniform(int branches, int classes, Interval interval) {
    ExitRangeTable t(branches, classes);
    for (auto& c : t.cells) c = {interval};
    return t;
}

bool table_subset(const ExitRangeTable& a, const ExitRangeTable& b) {
    if (a.num_branches != b.num_branches || a.num_classes != b.num_classes) return false;
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        if (!cell_subset(a.cells[i], b.cells[i])) return false;
    }
    return true;
}

namespace {

int group_key(const CalibrationInputs& in, int m, std::size_t i, GroupBy g) {
    switch (g) {
        case GroupBy::TrueLabel: return in.correct[i];
        case GroupBy::BackbonePrediction: return in.backbone_pred[i];
        case GroupBy::BranchPrediction: break;
    }
    return in.branch_pred[static_cast<std::size_t>(m)][i];
}

}  // namespace

std::vector<SegmentRow> segment_group(const CalibrationInputs& in, int m, int n, int segments, double tolerance,
                                      GroupBy group_by) {
    if (segments < 1) throw std::invalid_argument("calibration: segments must be >= 1");
    if (!(tolerance >= 0.0)) throw std::invalid_argument("calibration: tolerance must be >= 0");
    if (m < 0 || m >= kNumBranches || n < 0 || n >= in.num_classes) {
        throw std::out_of_range("calibration: (branch, category) out of range");
    }
    const auto N = static_cast<std::size_t>(in.num_classes);
    const auto& conf = in.confidence[static_cast<std::size_t>(m)];
    const auto& bp = in.branch_pred[static_cast<std::size_t>(m)];

    struct Entry {
        double p;
        std::size_t i;
    };
    std::vector<Entry> group;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (group_key(in, m, i, group_by) == n) group.push_back({conf[i * N + static_cast<std::size_t>(n)], i});
    }
    if (group.empty()) return {};
    std::sort(group.begin(), group.end(), [](const Entry& a, const Entry& b) { return a.p < b.p || (a.p == b.p && a.i < b.i); });

    const std::size_t g = group.size();
    const std::size_t S = std::min<std::size_t>(static_cast<std::size_t>(segments), g);
    const std::size_t q = g / S;
    std::vector<SegmentRow> rows;
    for (std::size_t b = 0; b < S; ++b) {
        const std::size_t begin = b * q;
        const std::size_t end = b + 1 == S ? g : (b + 1) * q;
        SegmentRow r;
        r.range.lo = group[begin].p;
        r.range.hi = b + 1 == S ? group[g - 1].p : group[end].p;
        r.count = end - begin;
        std::size_t ok_branch = 0, ok_nn = 0;
        for (std::size_t k = begin; k < end; ++k) {
            const std::size_t i = group[k].i;
            ok_branch += bp[i] == in.correct[i];
            ok_nn += in.backbone_pred[i] == in.correct[i];
        }
        r.branch_accuracy = static_cast<double>(ok_branch) / static_cast<double>(r.count);
        r.backbone_accuracy = static_cast<double>(ok_nn) / static_cast<double>(r.count);
        r.exit = r.backbone_accuracy - r.branch_accuracy < tolerance;
        rows.push_back(r);
    }
    return rows;
}

Cell merge_flagged(std::span<const SegmentRow> rows) {
    Cell out;
    for (const auto& r : rows) {
        if (!r.exit) continue;
        if (!out.empty() && r.range.lo <= out.back().hi) {
            out.back().hi = std::max(out.back().hi, r.range.hi);
        } else {
            out.push_back(r.range);
        }
    }
    return out;
}

ExitRangeTable calibrate_ranges(const CalibrationInputs& in, int segments, double tolerance, GroupBy group_by,
                                std::vector<std::string>* warnings) {
    in.validate();
    if (in.size() == 0) throw std::invalid_argument("calibration: no validation samples");
    ExitRangeTable t(kNumBranches, in.num_classes);
    t.segments = segments;
    t.tolerance = tolerance;
    t.validation_size = in.size();
    for (int m = 0; m < kNumBranches; ++m) {
        for (int n = 0; n < in.num_classes; ++n) {
            const auto rows = segment_group(in, m, n, segments, tolerance, group_by);
            if (warnings && !rows.empty() && rows.size() < static_cast<std::size_t>(segments)) {
                warnings->push_back("branch " + std::to_string(m) + " category " + std::to_string(n) + ": " +
                                    std::to_string(rows.size()) + " samples, segments clamped from " +
                                    std::to_string(segments));
            }
            t.cell(m, n) = merge_flagged(rows);
        }
    }
    return t;
}

Judgment judge_exit(const ExitRangeTable& table, int m, std::span<const double> confidence) {
    if (static_cast<int>(confidence.size()) != table.num_classes) {
        throw std::invalid_argument("judge_exit: confidence vector length does not match the table");
    }
    Judgment j;
    j.category = argmax(confidence);
    j.confidence = confidence[static_cast<std::size_t>(j.category)];
    j.exit = table.contains(m, j.category, j.confidence);
    return j;
}

Judgment conventional_threshold_judge(double threshold, std::span<const double> confidence) {
    Judgment j;
    j.category = argmax(confidence);
    j.confidence = confidence[static_cast<std::size_t>(j.category)];
    j.exit = j.confidence > threshold;
    return j;
}

// ---- range table text format ----

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

double parse_double(std::string_view s, const char* what) {
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError(FormatErrorKind::Parse, std::string("range table: bad ") + what + " '" + std::string(s) + "'");
    }
    return v;
}

long parse_int(std::string_view s, const char* what) {
    long v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError(FormatErrorKind::Parse, std::string("range table: bad ") + what + " '" + std::string(s) + "'");
    }
    return v;
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

Interval parse_interval(std::string_view tok) {
    if (tok.size() < 5 || (tok.front() != '[' && tok.front() != '(') || tok.back() != ']') {
        throw FormatError(FormatErrorKind::Parse, "range table: bad interval '" + std::string(tok) + "'");
    }
    const auto comma = tok.find(',');
    if (comma == std::string_view::npos) {
        throw FormatError(FormatErrorKind::Parse, "range table: bad interval '" + std::string(tok) + "'");
    }
    Interval iv;
    iv.lo_open = tok.front() == '(';
    iv.lo = parse_double(tok.substr(1, comma - 1), "endpoint");
    iv.hi = parse_double(tok.substr(comma + 1, tok.size() - comma - 2), "endpoint");
    if (!(iv.lo >= 0.0 && iv.hi <= 1.0 && iv.lo <= iv.hi)) {
        throw FormatError(FormatErrorKind::Parse, "range table: interval outside [0,1] '" + std::string(tok) + "'");
    }
    return iv;
}

}  // namespace

std::string ranges_encode(const ExitRangeTable& t) {
    std::ostringstream os;
    os << "EXRT 1\n";
    os << "branches " << t.num_branches << '\n';
    os << "classes " << t.num_classes << '\n';
    os << "segments " << t.segments << '\n';
    os << "tolerance " << fmt(t.tolerance) << '\n';
    os << "validation " << t.validation_size << '\n';
    for (int m = 0; m < t.num_branches; ++m) {
        for (int n = 0; n < t.num_classes; ++n) {
            const Cell& c = t.cell(m, n);
            if (c.empty()) continue;
            os << "cell " << m << ' ' << n;
            for (const auto& iv : c) os << ' ' << (iv.lo_open ? '(' : '[') << fmt(iv.lo) << ',' << fmt(iv.hi) << ']';
            os << '\n';
        }
    }
    os << "end\n";
    return os.str();
}

ExitRangeTable ranges_decode(std::string_view text) {
    std::vector<std::string_view> lines;
    for (std::size_t i = 0; i < text.size();) {
        std::size_t j = text.find('\n', i);
        if (j == std::string_view::npos) j = text.size();
        lines.push_back(text.substr(i, j - i));
        i = j + 1;
    }
    if (lines.empty()) throw FormatError(FormatErrorKind::Truncated, "range table: empty file");
    const auto head = split_ws(lines[0]);
    if (head.empty() || head[0] != "EXRT") throw FormatError(FormatErrorKind::BadMagic, "range table: missing EXRT header");
    if (head.size() != 2) throw FormatError(FormatErrorKind::Parse, "range table: malformed header");
    if (head[1] != "1") {
        throw FormatError(FormatErrorKind::VersionMismatch, "range table: version " + std::string(head[1]) + ", expected 1");
    }

    long branches = -1, classes = -1;
    ExitRangeTable t;
    bool shaped = false, ended = false;
    auto shape = [&] {
        if (branches != kNumBranches) {
            throw FormatError(FormatErrorKind::Shape, "range table: " + std::to_string(branches) +
                                                          " branches, expected " + std::to_string(kNumBranches));
        }
        if (classes < 2 || classes > 65535) throw FormatError(FormatErrorKind::Parse, "range table: bad class count");
        ExitRangeTable shaped_table(static_cast<int>(branches), static_cast<int>(classes));
        shaped_table.segments = t.segments;
        shaped_table.tolerance = t.tolerance;
        shaped_table.validation_size = t.validation_size;
        t = std::move(shaped_table);
        shaped = true;
    };
    for (std::size_t li = 1; li < lines.size() && !ended; ++li) {
        const auto tok = split_ws(lines[li]);
        if (tok.empty()) continue;
        const auto key = tok[0];
        auto need = [&](std::size_t n) {
            if (tok.size() != n) {
                throw FormatError(FormatErrorKind::Parse, "range table: malformed line " + std::to_string(li + 1));
            }
        };
        if (key == "end") {
            ended = true;
        } else if (key == "cell") {
            if (!shaped) shape();
            if (tok.size() < 4) throw FormatError(FormatErrorKind::Parse, "range table: empty cell line");
            const long m = parse_int(tok[1], "branch"), n = parse_int(tok[2], "category");
            if (m < 0 || m >= branches || n < 0 || n >= classes) {
                throw FormatError(FormatErrorKind::Parse, "range table: cell index out of range on line " +
                                                              std::to_string(li + 1));
            }
            Cell& c = t.cell(static_cast<int>(m), static_cast<int>(n));
            if (!c.empty()) throw FormatError(FormatErrorKind::Parse, "range table: duplicate cell");
            for (std::size_t k = 3; k < tok.size(); ++k) {
                Interval iv = parse_interval(tok[k]);
                if (!c.empty() && !(iv.lo > c.back().hi)) {
                    throw FormatError(FormatErrorKind::Parse, "range table: cell intervals overlap or are unsorted");
                }
                c.push_back(iv);
            }
        } else if (shaped) {
            throw FormatError(FormatErrorKind::Parse, "range table: header key after cells");
        } else if (key == "branches") {
            need(2);
            branches = parse_int(tok[1], "branches");
        } else if (key == "classes") {
            need(2);
            classes = parse_int(tok[1], "classes");
        } else if (key == "segments") {
            need(2);
            t.segments = static_cast<int>(parse_int(tok[1], "segments"));
        } else if (key == "tolerance") {
            need(2);
            t.tolerance = parse_double(tok[1], "tolerance");
        } else if (key == "validation") {
            need(2);
            t.validation_size = static_cast<std::size_t>(parse_int(tok[1], "validation"));
        } else {
            throw FormatError(FormatErrorKind::Parse, "range table: unknown key '" + std::string(key) + "'");
        }
    }
    if (!ended) throw FormatError(FormatErrorKind::Truncated, "range table: missing end marker");
    if (!shaped) shape();
    return t;
}

ExitRangeTable ranges_decode(std::string_view text, int expected_classes) {
    ExitRangeTable t = ranges_decode(text);
    if (t.num_classes != expected_classes) {
        throw FormatError(FormatErrorKind::Shape, "range table has " + std::to_string(t.num_classes) +
                                                      " categories, expected " + std::to_string(expected_classes));
    }
    return t;
}

void save_ranges(const ExitRangeTable& table, const std::filesystem::path& path) {
    write_text_atomic(path, ranges_encode(table));
}

namespace {
std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}
}  // namespace

ExitRangeTable load_ranges(const std::filesystem::path& path) { return ranges_decode(read_text(path)); }

ExitRangeTable load_ranges(const std::filesystem::path& path, int expected_classes) {
    return ranges_decode(read_text(path), expected_classes);
}

// ---- hybrid inference ----

void HybridBundle::validate() const {
    const auto& cfg = model.config();
    const int N = cfg.num_classes;
    if (table.num_classes != N || table.num_branches != kNumBranches ||
        table.cells.size() != static_cast<std::size_t>(kNumBranches * N)) {
        throw std::invalid_argument("bundle: range table shape does not match the model (" +
                                    std::to_string(table.num_classes) + " vs " + std::to_string(N) + " categories)");
    }
    const auto shapes = cvnn::tap_shapes(cfg);
    for (int m = 0; m < kNumBranches; ++m) {
        const auto& b = branches[static_cast<std::size_t>(m)];
        const auto& s = shapes[static_cast<std::size_t>(m)];
        const std::string who = "bundle: branch " + std::to_string(m);
        if (b.trees.empty()) throw std::invalid_argument(who + " has no trees");
        if (b.num_classes != N) throw std::invalid_argument(who + " class count does not match the model");
        if (b.num_features != 2 * static_cast<std::size_t>(s.c)) {
            throw std::invalid_argument(who + " expects " + std::to_string(b.num_features) + " features, tap gives " +
                                        std::to_string(2 * s.c));
        }
        if (b.recipe != forest::FeatureRecipe{m, s.c, s.h, s.w}) {
            throw std::invalid_argument(who + " feature recipe does not match tap " + std::to_string(m));
        }
    }
    if (!(static_cast<double>(model.prefix_flops(0)) + branch_flops(0) < backbone_flops())) {
        throw std::invalid_argument("bundle: exiting at branch 0 would not save computation");
    }
}

JudgeFn range_judge(const ExitRangeTable& table) {
    return [&table](int m, std::span<const double> p) { return judge_exit(table, m, p); };
}

JudgeFn threshold_judge(double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("threshold must lie in [0, 1]");
    return [threshold](int, std::span<const double> p) { return conventional_threshold_judge(threshold, p); };
}

namespace {

cvnn::ComplexTensor gather(const cvnn::ComplexTensor& x, std::span<const int> rows) {
    cvnn::Shape4 s = x.shape;
    s.n = static_cast<int>(rows.size());
    cvnn::ComplexTensor out(s);
    const std::size_t per = static_cast<std::size_t>(x.shape.c) * x.shape.plane();
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto src = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(rows[k]) * per);
        const auto dst = static_cast<std::ptrdiff_t>(k * per);
        std::copy_n(x.re.begin() + src, per, out.re.begin() + dst);
        std::copy_n(x.im.begin() + src, per, out.im.begin() + dst);
    }
    return out;
}

}  // namespace

std::vector<InferenceOutcome> hybrid_infer(HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                                           const JudgeFn& judge, const BranchMask& mask, int batch) {
    if (batch < 1) throw std::invalid_argument("hybrid_infer: batch must be >= 1");
    const int N = bundle.model.config().num_classes;
    std::vector<InferenceOutcome> out(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), samples.size() - start);
        cvnn::ComplexTensor x = cvnn::to_tensor(samples.subspan(start, n));
        std::vector<std::size_t> active(n);
        std::iota(active.begin(), active.end(), start);
        std::vector<double> spent(n, 0.0);  // branch costs so far, indexed by position in the chunk
        for (int m = 0; m < kNumBranches && !active.empty(); ++m) {
            x = bundle.model.run_stage(m, x, cvnn::Mode::Infer);
            if (!mask[static_cast<std::size_t>(m)]) continue;
            const auto& branch = bundle.branches[static_cast<std::size_t>(m)];
            const double cost = branch.flops();
            std::vector<int> keep;
            std::vector<std::size_t> still;
            for (std::size_t k = 0; k < active.size(); ++k) {
                const std::size_t idx = active[k];
                spent[idx - start] += cost;
                const auto feats = extract_branch_features(x, static_cast<int>(k));
                const auto p = branch.predict_proba(feats);
                const Judgment j = judge(m, p);
                if (j.exit) {
                    out[idx] = {j.category, m, j.confidence,
                                static_cast<double>(bundle.model.prefix_flops(m)) + spent[idx - start]};
                } else {
                    keep.push_back(static_cast<int>(k));
                    still.push_back(idx);
                }
            }
            if (still.size() != active.size()) x = gather(x, keep);
            active = std::move(still);
        }
        if (active.empty()) continue;
        x = bundle.model.run_stage(4, x, cvnn::Mode::Infer);
        const auto probs = cvnn::softmax(bundle.model.head(x, cvnn::Mode::Infer), N);
        for (std::size_t k = 0; k < active.size(); ++k) {
            const std::size_t idx = active[k];
            const auto row = std::span(probs).subspan(k * static_cast<std::size_t>(N), static_cast<std::size_t>(N));
            const int label = argmax(row);
            out[idx] = {label, kBackboneExit, row[static_cast<std::size_t>(label)],
                        bundle.backbone_flops() + spent[idx - start]};
        }
    }
    return out;
}

std::vector<InferenceOutcome> hybrid_infer(HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                                           const BranchMask& mask) {
    return hybrid_infer(bundle, samples, range_judge(bundle.table), mask);
}

InferenceOutcome hybrid_infer(HybridBundle& bundle, const rfdata::Spectrogram& sample, const BranchMask& mask) {
    const rfdata::Spectrogram* p = &sample;
    return hybrid_infer(bundle, std::span(&p, 1), mask).front();
}

std::array<forest::FeatureMatrix, kNumBranches> collect_tap_features(
    cvnn::CvnnModel& model, std::span<const rfdata::Spectrogram* const> samples, int batch) {
    std::array<forest::FeatureMatrix, kNumBranches> out;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), samples.size() - start);
        const auto fr = model.forward(cvnn::to_tensor(samples.subspan(start, n)), cvnn::Mode::Infer, true);
        for (int m = 0; m < kNumBranches; ++m) {
            const auto& tap = fr.taps[static_cast<std::size_t>(m)];
            for (int k = 0; k < tap.shape.n; ++k) out[static_cast<std::size_t>(m)].push_row(extract_branch_features(tap, k));
        }
    }
    return out;
}

std::array<forest::ForestBranch, kNumBranches> train_branches(cvnn::CvnnModel& model,
                                                              std::span<const rfdata::Spectrogram* const> train,
                                                              const forest::ForestConfig& config) {
    const auto feats = collect_tap_features(model, train);
    std::vector<int> labels;
    labels.reserve(train.size());
    for (const auto* s : train) labels.push_back(s->label);
    const auto shapes = cvnn::tap_shapes(model.config());
    std::array<forest::ForestBranch, kNumBranches> out;
    for (int m = 0; m < kNumBranches; ++m) {
        forest::ForestConfig c = config;
        c.seed = derive_seed(config.seed, 0x4252414e4348u, static_cast<std::uint64_t>(m));
        const auto& s = shapes[static_cast<std::size_t>(m)];
        out[static_cast<std::size_t>(m)] = forest::fit_forest(feats[static_cast<std::size_t>(m)], labels,
                                                              model.config().num_classes, c, {m, s.c, s.h, s.w});
    }
    return out;
}

CalibrationInputs collect_calibration_inputs(cvnn::CvnnModel& model,
                                             const std::array<forest::ForestBranch, kNumBranches>& branches,
                                             std::span<const rfdata::Spectrogram* const> samples, int batch) {
    CalibrationInputs in;
    const int N = model.config().num_classes;
    in.num_classes = N;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), samples.size() - start);
        const auto fr = model.forward(cvnn::to_tensor(samples.subspan(start, n)), cvnn::Mode::Infer, true);
        for (std::size_t k = 0; k < n; ++k) {
            in.correct.push_back(samples[start + k]->label);
            in.backbone_pred.push_back(
                argmax(std::span(fr.logits).subspan(k * static_cast<std::size_t>(N), static_cast<std::size_t>(N))));
            for (int m = 0; m < kNumBranches; ++m) {
                const auto feats = extract_branch_features(fr.taps[static_cast<std::size_t>(m)], static_cast<int>(k));
                const auto p = branches[static_cast<std::size_t>(m)].predict_proba(feats);
                in.branch_pred[static_cast<std::size_t>(m)].push_back(argmax(p));
                auto& cf = in.confidence[static_cast<std::size_t>(m)];
                cf.insert(cf.end(), p.begin(), p.end());
            }
        }
    }
    return in;
}

// ---- bundle container ----

namespace {
constexpr std::string_view kBundleMagic = "EXHB";
constexpr std::uint16_t kBundleVersion = 1;
}  // namespace

std::vector<std::uint8_t> bundle_encode(HybridBundle& bundle) {
    ByteWriter w;
    for (char ch : kBundleMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u16(kBundleVersion);
    const auto model_bytes = cvnn::model_encode(bundle.model);
    w.u64(model_bytes.size());
    w.bytes(model_bytes);
    for (const auto& b : bundle.branches) forest::forest_encode(b, w);
    w.str(ranges_encode(bundle.table));
    append_crc(w);
    return std::move(w.data());
}

HybridBundle bundle_decode(std::span<const std::uint8_t> bytes) {
    ByteReader r = open_checked(bytes, kBundleMagic, kBundleVersion, "bundle");
    HybridBundle b;
    const std::uint64_t model_len = r.u64();
    if (model_len > r.remaining()) throw FormatError(FormatErrorKind::Truncated, "bundle: model blob overruns file");
    b.model = cvnn::model_decode(r.bytes(static_cast<std::size_t>(model_len)));
    for (auto& br : b.branches) br = forest::forest_decode(r);
    b.table = ranges_decode(r.str());
    if (r.remaining() != 0) throw FormatError(FormatErrorKind::Parse, "bundle: trailing bytes");
    try {
        b.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatErrorKind::Shape, e.what());
    }
    return b;
}

void save_bundle(HybridBundle& bundle, const std::filesystem::path& path) {
    bundle.validate();
    write_file_atomic(path, bundle_encode(bundle));
}

HybridBundle load_bundle(const std::filesystem::path& path) { return bundle_decode(read_file(path)); }

}  // namespace exitrf::earlyexit
