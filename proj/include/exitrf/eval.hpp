#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "exitrf/earlyexit.hpp"
#include "exitrf/rfdata.hpp"

namespace exitrf::eval {

using ExitCounts = std::array<std::size_t, earlyexit::kNumExitPoints>;
using ExitRates = std::array<double, earlyexit::kNumExitPoints>;

struct CategoryStats {
    int category = 0;
    std::size_t count = 0;
    double accuracy = 0.0;
    ExitRates exit_rates{};

    bool operator==(const CategoryStats&) const = default;
};

struct EvalReport {
    std::string name;
    std::uint64_t seed = 0;
    double tolerance = std::numeric_limits<double>::quiet_NaN();
    double snr_db = rfdata::kNoNoise;

    std::size_t samples = 0;
    double accuracy = 0.0;
    /// Plain backbone accuracy on the same samples (NaN when not measured).
    double backbone_accuracy = std::numeric_limits<double>::quiet_NaN();
    /// Exit points 0..3 are branches, 4 the backbone.
    ExitCounts exit_counts{};
    ExitRates exit_rates{};
    /// Fraction leaving at any branch.
    double early_exit_rate = 0.0;
    double mean_flops = 0.0;
    double backbone_flops = 0.0;
    std::vector<CategoryStats> per_category;

    /// Identity for NaN fields (so parse-back comparisons work).
    bool same_as(const EvalReport& other) const;
};

/// Aggregates per-sample outcomes. `backbone_pred` may be empty.
EvalReport summarize(std::span<const earlyexit::InferenceOutcome> outcomes, std::span<const int> labels,
                     int num_classes, std::span<const int> backbone_pred, double backbone_flops);

struct EvalOptions {
    earlyexit::BranchMask mask = earlyexit::kAllBranches;
    /// Threshold baseline instead of the range table when set (in [0, 1]).
    double threshold = std::numeric_limits<double>::quiet_NaN();
    bool with_backbone = true;
};

/// Runs hybrid inference over `samples` with the bundle's range table.
EvalReport evaluate(earlyexit::HybridBundle& bundle, std::span<const rfdata::Spectrogram* const> samples,
                    const EvalOptions& options = {});

/// One calibration + evaluation per tolerance, reported in ascending T.
std::vector<EvalReport> tolerance_sweep(earlyexit::HybridBundle& bundle,
                                        const earlyexit::CalibrationInputs& calibration, int segments,
                                        std::vector<double> tolerances,
                                        std::span<const rfdata::Spectrogram* const> samples,
                                        earlyexit::GroupBy group_by = earlyexit::GroupBy::BranchPrediction);

/// Re-noises the clean frames `indices` of `ds` at each SNR and evaluates.
/// `rfdata::kNoNoise` in the grid yields the clean evaluation.
std::vector<EvalReport> snr_sweep(earlyexit::HybridBundle& bundle, const rfdata::SignalDataset& ds,
                                  std::span<const std::size_t> indices, std::span<const double> snr_grid,
                                  std::uint64_t seed);

inline const std::vector<double> kSnrGrid{20.0, 15.0, 10.0, 5.0, 0.0, -5.0};
inline const std::vector<double> kToleranceGrid{0.0, 0.02, 0.05, 0.07, 0.10};

/// Median of odd counts; mean of the two central values for even counts.
double median(std::vector<double> values);

/// Field-wise median over the scalar metrics, exit rates and per-category stats.
EvalReport median_report(std::span<const EvalReport> reports);

struct MonteCarloResult {
    std::vector<EvalReport> runs;
    EvalReport summary;
};

/// Seed of run `r`: derive_seed(base_seed, r), or base_seed for every run
/// when `same_seed` is set.
std::uint64_t run_seed(std::uint64_t base_seed, int run, bool same_seed = false);

MonteCarloResult monte_carlo(int runs, std::uint64_t base_seed,
                             const std::function<EvalReport(int run, std::uint64_t seed)>& experiment,
                             bool same_seed = false);

/// Steps 1-2 of range calibration for one (branch, category), for inspection.
std::vector<earlyexit::SegmentRow> confidence_diagnostics(
    const earlyexit::CalibrationInputs& inputs, int branch, int category, int segments, double tolerance,
    earlyexit::GroupBy group_by = earlyexit::GroupBy::BranchPrediction);
std::string diagnostics_csv(std::span<const earlyexit::SegmentRow> rows);

enum class ReportFormat { Csv, Json };

std::string reports_csv(std::span<const EvalReport> reports);
std::string reports_json(std::span<const EvalReport> reports);
std::vector<EvalReport> reports_from_json(std::string_view text);
void emit_report(std::span<const EvalReport> reports, ReportFormat format, const std::filesystem::path& path);

}  // namespace exitrf::eval
