#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "exitrf/cvnn.hpp"
#include "exitrf/earlyexit.hpp"
#include "exitrf/eval.hpp"
#include "exitrf/forest.hpp"
#include "exitrf/rfdata.hpp"

namespace exitrf::pipeline {

struct DataParams {
    int classes = 10;
    std::size_t frames_per_class = 120;
    std::size_t length = 512;
    int samples_per_us = 4;
    int window = 32;
    int stride = 16;
    rfdata::Window window_fn = rfdata::Window::Rectangular;
    std::uint64_t seed = 1;
};

struct ModelParams {
    int width_scale = 4;
    int base_channels = 64;
    int stem_kernel = 3;
    int stem_stride = 2;
};

struct TrainParams {
    int epochs = 8;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;
};

struct ForestParams {
    int n_trees = 400;
    int max_depth = 20;
    std::size_t min_leaf = 2;
    int features_per_node = 0;
    int threads = 0;
    std::uint64_t seed = 1;
};

struct CalibrationParams {
    int segments = 2;
    double tolerance = 0.05;
    earlyexit::GroupBy group_by = earlyexit::GroupBy::BranchPrediction;
};

struct EvalParams {
    std::vector<double> tolerances = eval::kToleranceGrid;
    std::vector<double> snr_grid = eval::kSnrGrid;
    int runs = 15;
    std::uint64_t seed = 1;
    double threshold = 0.6;
};

/// Every knob of a run. Sections and keys mirror the INI layout:
/// [data] [model] [train] [forest] [calibration] [eval] [paths].
struct RunConfig {
    std::string profile = "desk";
    DataParams data;
    ModelParams model;
    TrainParams train;
    ForestParams forest;
    CalibrationParams calibration;
    EvalParams eval;
    std::filesystem::path artifacts;

    /// "desk" or "paper"; throws std::invalid_argument otherwise.
    static RunConfig named(std::string_view profile);

    /// Sets `section.key` from its text form. Throws std::invalid_argument on
    /// an unknown key or unparsable value.
    void set(std::string_view dotted_key, std::string_view value);
    /// Applies every key of an INI document (a `profile` key at top level
    /// resets to that profile first).
    void apply_ini(const std::string& text);
    void apply_ini_file(const std::filesystem::path& path);
    std::string to_ini() const;

    /// Domain checks; throws std::invalid_argument naming the key.
    void validate() const;

    /// Copy with data, training and forest seeds derived from `seed`.
    RunConfig with_seed(std::uint64_t seed) const;
};

rfdata::SynthOptions synth_options(const RunConfig& cfg);
rfdata::SignalDataset synthesize(const RunConfig& cfg);

cvnn::ModelConfig model_config(const RunConfig& cfg, const rfdata::SignalDataset& ds);
cvnn::TrainConfig train_config(const RunConfig& cfg);
forest::ForestConfig forest_config(const RunConfig& cfg);

/// Preprocessed spectrograms with per-split views.
struct Prepared {
    std::vector<rfdata::Spectrogram> spectrograms;
    std::vector<const rfdata::Spectrogram*> train;
    std::vector<const rfdata::Spectrogram*> val;
    std::vector<const rfdata::Spectrogram*> test;
    std::vector<std::size_t> test_indices;
};
Prepared prepare(const rfdata::SignalDataset& ds);

using Logger = std::function<void(const std::string&)>;

struct Experiment {
    rfdata::SignalDataset dataset;
    Prepared data;
    earlyexit::HybridBundle bundle;
    cvnn::TrainResult training;
    earlyexit::CalibrationInputs calibration;
    eval::EvalReport report;
};

/// synth -> train backbone -> train branches -> calibrate -> evaluate, in memory.
Experiment run_experiment(const RunConfig& cfg, const Logger& log = {});

}  // namespace exitrf::pipeline
