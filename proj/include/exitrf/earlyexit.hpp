#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exitrf/cvnn.hpp"
#include "exitrf/forest.hpp"
#include "exitrf/rfdata.hpp"

namespace exitrf::earlyexit {

inline constexpr int kNumBranches = cvnn::kNumTaps;
/// Exit points 0..3 are the branches; 4 is the backbone head.
inline constexpr int kBackboneExit = kNumBranches;
inline constexpr int kNumExitPoints = kNumBranches + 1;

/// Channel-wise spatial mean of the re and im planes of sample `n`:
/// [mean re(c0..cC-1), mean im(c0..cC-1)].
std::vector<double> extract_branch_features(const cvnn::ComplexTensor& tap, int n = 0);
/// One row per batch sample.
forest::FeatureMatrix extract_branch_features_batch(const cvnn::ComplexTensor& tap);
forest::FeatureRecipe recipe_for(const cvnn::ComplexTensor& tap, int tap_index);

/// Lowest index wins ties.
int argmax(std::span<const double> p);

/// Which samples form the (branch m, category n) calibration group.
enum class GroupBy { BranchPrediction, TrueLabel, BackbonePrediction };
std::string_view to_string(GroupBy g);
GroupBy parse_group_by(std::string_view s);

struct CalibrationInputs {
    int num_classes = 0;
    std::vector<int> correct;
    std::vector<int> backbone_pred;
    std::array<std::vector<int>, kNumBranches> branch_pred;
    /// confidence[m][i * num_classes + n]
    std::array<std::vector<double>, kNumBranches> confidence;

    std::size_t size() const noexcept { return correct.size(); }
    /// Throws std::invalid_argument on ragged sequences or out-of-range labels.
    void validate() const;
};

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    bool lo_open = false;  // (lo, hi] instead of [lo, hi]

    bool contains(double p) const noexcept { return (lo_open ? p > lo : p >= lo) && p <= hi; }
    bool operator==(const Interval&) const = default;
};

using Cell = std::vector<Interval>;

/// True when every point of `a` lies in some interval of `b`.
bool cell_subset(const Cell& a, const Cell& b);

struct ExitRangeTable {
    int num_branches = kNumBranches;
    int num_classes = 0;
    int segments = 0;
    double tolerance = 0.0;
    std::size_t validation_size = 0;
    std::vector<Cell> cells;  // [m * num_classes + n]

    ExitRangeTable() = default;
    ExitRangeTable(int branches, int classes);

    Cell& cell(int m, int n) { return cells.at(static_cast<std::size_t>(m * num_classes + n)); }
    const Cell& cell(int m, int n) const { return cells.at(static_cast<std::size_t>(m * num_classes + n)); }
    bool contains(int m, int n, double p) const;

    /// Every cell set to `interval`.
    static ExitRangeTable uniform(int branches, int classes, Interval interval);

    bool operator==(const ExitRangeTable&) const = default;
};

bool table_subset(const ExitRangeTable& a, const ExitRangeTable& b);

/// One equal-count confidence segment of a calibration group.
struct SegmentRow {
    Interval range;
    std::size_t count = 0;
    double branch_accuracy = 0.0;
    double backbone_accuracy = 0.0;
    bool exit = false;
};

/// Steps 1-2 of the calibration for a single (m, n) group: sort, segment into
/// min(S, group size) equal-count runs (the last absorbs the remainder) and
/// flag each run iff backbone accuracy - branch accuracy < T.
std::vector<SegmentRow> segment_group(const CalibrationInputs& in, int m, int n, int segments, double tolerance,
                                      GroupBy group_by = GroupBy::BranchPrediction);

/// Step 3: union of flagged segment ranges, merged where they touch or overlap.
Cell merge_flagged(std::span<const SegmentRow> rows);

/// Full calibration over every branch and category. Groups with fewer
/// samples than S get S clamped; each clamp appends a line to `warnings`.
ExitRangeTable calibrate_ranges(const CalibrationInputs& in, int segments, double tolerance,
                                GroupBy group_by = GroupBy::BranchPrediction,
                                std::vector<std::string>* warnings = nullptr);

struct Judgment {
    bool exit = false;
    int category = 0;
    double confidence = 0.0;
    bool operator==(const Judgment&) const = default;
};

/// Exit iff P[d] lies in cell (m, d) with d = argmax P.
Judgment judge_exit(const ExitRangeTable& table, int m, std::span<const double> confidence);
/// Exit iff max P > threshold.
Judgment conventional_threshold_judge(double threshold, std::span<const double> confidence);

/// Text format "EXRT 1"; endpoints printed in shortest round-trip form.
std::string ranges_encode(const ExitRangeTable& table);
ExitRangeTable ranges_decode(std::string_view text);
/// Also checks the class count; a mismatch is FormatError(Shape).
ExitRangeTable ranges_decode(std::string_view text, int expected_classes);
void save_ranges(const ExitRangeTable& table, const std::filesystem::path& path);
ExitRangeTable load_ranges(const std::filesystem::path& path);
ExitRangeTable load_ranges(const std::filesystem::path& path, int expected_classes);

using BranchMask = std::array<bool, kNumBranches>;
inline constexpr BranchMask kAllBranches{true, true, true, true};

/// Backbone + one forest per tap + calibrated ranges.
struct HybridBundle {
    cvnn::CvnnModel model;
    std::array<forest::ForestBranch, kNumBranches> branches;
    ExitRangeTable table;

    /// Class counts, feature widths and tap recipes must agree with the model,
    /// and prefix(tap 0) + branch 0 cost must undercut the full backbone.
    /// Throws std::invalid_argument otherwise.
    void validate() const;

    double branch_flops(int m) const { return branches[static_cast<std::size_t>(m)].flops(); }
    double backbone_flops() const { return static_cast<double>(model.total_flops()); }
};

struct InferenceOutcome {
    int label = 0;
    int exit_point = kBackboneExit;
    double confidence = 0.0;
    double flops = 0.0;
    bool operator==(const InferenceOutcome&) const = default;
};

/// Decision rule consulted at each evaluated branch.
using JudgeFn = std::function<Judgment(int branch, std::span<const double> confidence)>;
JudgeFn range_judge(const ExitRangeTable& table);
JudgeFn threshold_judge(double threshold);

/// Staged inference: run the backbone to each enabled tap, ask the branch,
/// stop at the first exit. Samples still undecided after the last tap finish
/// the backbone. Flops = backbone prefix reached + every branch evaluated.
std::vector<InferenceOutcome> hybrid_infer(HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                                           const JudgeFn& judge, const BranchMask& mask = kAllBranches,
                                           int batch = 64);
std::vector<InferenceOutcome> hybrid_infer(HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                                           const BranchMask& mask = kAllBranches);
InferenceOutcome hybrid_infer(HybridBundle& bundle, const rfdata::Spectrogram& sample,
                              const BranchMask& mask = kAllBranches);

/// Backbone predictions and per-branch confidences for calibration.
CalibrationInputs collect_calibration_inputs(cvnn::CvnnModel& model,
                                             const std::array<forest::ForestBranch, kNumBranches>& branches,
                                             std::span<const rfdata::Spectrogram* const> samples, int batch = 64);

/// Tap features for every sample, one matrix per tap.
std::array<forest::FeatureMatrix, kNumBranches> collect_tap_features(
    cvnn::CvnnModel& model, std::span<const rfdata::Spectrogram* const> samples, int batch = 64);

/// Fits one forest per tap on the training samples' tap features.
std::array<forest::ForestBranch, kNumBranches> train_branches(cvnn::CvnnModel& model,
                                                              std::span<const rfdata::Spectrogram* const> train,
                                                              const forest::ForestConfig& config);

std::vector<std::uint8_t> bundle_encode(HybridBundle& bundle);
HybridBundle bundle_decode(std::span<const std::uint8_t> bytes);
void save_bundle(HybridBundle& bundle, const std::filesystem::path& path);
HybridBundle load_bundle(const std::filesystem::path& path);

}  // namespace exitrf::earlyexit
