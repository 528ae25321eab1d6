#include "exitrf/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "exitrf/common.hpp"

namespace exitrf::pipeline {

namespace ee = earlyexit;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_int(std::string_view key, std::string_view text) {
    const std::string s = trim(text);
    T v{};
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw std::invalid_argument(std::string(key) + ": expected an integer, got '" + s + "'");
    }
    return v;
}

double parse_real(std::string_view key, std::string_view text) {
    const std::string s = trim(text);
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw std::invalid_argument(std::string(key) + ": expected a number, got '" + s + "'");
    }
    return v;
}

std::vector<double> parse_list(std::string_view key, std::string_view text) {
    std::vector<double> out;
    std::string s(text);
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_real(key, item));
    if (out.empty()) throw std::invalid_argument(std::string(key) + ": empty list");
    return out;
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

std::string fmt_list(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
}

}  // namespace

RunConfig RunConfig::named(std::string_view profile) {
    RunConfig c;
    if (profile == "desk") return c;
    if (profile != "paper") throw std::invalid_argument("unknown profile '" + std::string(profile) + "' (desk|paper)");
    c.profile = "paper";
    c.data.classes = 100;
    c.data.frames_per_class = 3600;
    c.data.length = 4800;
    c.data.samples_per_us = 40;
    c.data.window = 128;
    c.data.stride = 37;
    c.model.width_scale = 1;
    c.model.stem_stride = 1;
    c.train.epochs = 300;
    c.train.batch_size = 1024;
    c.forest.min_leaf = 1;
    c.calibration.segments = 15;
    return c;
}

void RunConfig::set(std::string_view key, std::string_view value) {
    const std::string k(key);
    const std::string v = trim(value);
    if (k == "data.classes") data.classes = parse_int<int>(k, v);
    else if (k == "data.frames_per_class") data.frames_per_class = parse_int<std::size_t>(k, v);
    else if (k == "data.length") data.length = parse_int<std::size_t>(k, v);
    else if (k == "data.samples_per_us") data.samples_per_us = parse_int<int>(k, v);
    else if (k == "data.window") data.window = parse_int<int>(k, v);
    else if (k == "data.stride") data.stride = parse_int<int>(k, v);
    else if (k == "data.window_fn") {
        if (v == "rect" || v == "rectangular") data.window_fn = rfdata::Window::Rectangular;
        else if (v == "hann") data.window_fn = rfdata::Window::Hann;
        else throw std::invalid_argument(k + ": expected rect or hann, got '" + v + "'");
    } else if (k == "data.seed") data.seed = parse_int<std::uint64_t>(k, v);
    else if (k == "model.width_scale") model.width_scale = parse_int<int>(k, v);
    else if (k == "model.base_channels") model.base_channels = parse_int<int>(k, v);
    else if (k == "model.stem_kernel") model.stem_kernel = parse_int<int>(k, v);
    else if (k == "model.stem_stride") model.stem_stride = parse_int<int>(k, v);
    else if (k == "train.epochs") train.epochs = parse_int<int>(k, v);
    else if (k == "train.batch_size") train.batch_size = parse_int<int>(k, v);
    else if (k == "train.learning_rate") train.learning_rate = parse_real(k, v);
    else if (k == "train.seed") train.seed = parse_int<std::uint64_t>(k, v);
    else if (k == "forest.n_trees") forest.n_trees = parse_int<int>(k, v);
    else if (k == "forest.max_depth") forest.max_depth = parse_int<int>(k, v);
    else if (k == "forest.min_leaf") forest.min_leaf = parse_int<std::size_t>(k, v);
    else if (k == "forest.features_per_node") forest.features_per_node = parse_int<int>(k, v);
    else if (k == "forest.threads") forest.threads = parse_int<int>(k, v);
    else if (k == "forest.seed") forest.seed = parse_int<std::uint64_t>(k, v);
    else if (k == "calibration.segments") calibration.segments = parse_int<int>(k, v);
    else if (k == "calibration.tolerance") calibration.tolerance = parse_real(k, v);
    else if (k == "calibration.group_by") calibration.group_by = ee::parse_group_by(v);
    else if (k == "eval.tolerances") eval.tolerances = parse_list(k, v);
    else if (k == "eval.snr_grid") eval.snr_grid = parse_list(k, v);
    else if (k == "eval.runs") eval.runs = parse_int<int>(k, v);
    else if (k == "eval.seed") eval.seed = parse_int<std::uint64_t>(k, v);
    else if (k == "eval.threshold") eval.threshold = parse_real(k, v);
    else if (k == "paths.artifacts") artifacts = v;
    else throw std::invalid_argument("unknown config key '" + k + "'");
}

void RunConfig::apply_ini(const std::string& text) {
    boost::property_tree::ptree pt;
    std::istringstream is(text);
    try {
        boost::property_tree::ini_parser::read_ini(is, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw std::invalid_argument("config: " + e.message() + " on line " + std::to_string(e.line()));
    }
    if (auto p = pt.get_optional<std::string>("profile")) {
        const auto keep = artifacts;
        *this = named(trim(*p));
        artifacts = keep;
    }
    for (const auto& [section, body] : pt) {
        if (section == "profile") continue;
        if (body.empty()) throw std::invalid_argument("config: top-level key '" + section + "' outside a section");
        for (const auto& [key, val] : body) set(section + "." + key, val.data());
    }
}

void RunConfig::apply_ini_file(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    apply_ini(std::string(bytes.begin(), bytes.end()));
}

std::string RunConfig::to_ini() const {
    std::ostringstream os;
    os << "profile = " << profile << "\n\n";
    os << "[data]\nclasses = " << data.classes << "\nframes_per_class = " << data.frames_per_class
       << "\nlength = " << data.length << "\nsamples_per_us = " << data.samples_per_us << "\nwindow = " << data.window
       << "\nstride = " << data.stride
       << "\nwindow_fn = " << (data.window_fn == rfdata::Window::Hann ? "hann" : "rect") << "\nseed = " << data.seed
       << "\n\n";
    os << "[model]\nwidth_scale = " << model.width_scale << "\nbase_channels = " << model.base_channels
       << "\nstem_kernel = " << model.stem_kernel << "\nstem_stride = " << model.stem_stride << "\n\n";
    os << "[train]\nepochs = " << train.epochs << "\nbatch_size = " << train.batch_size
       << "\nlearning_rate = " << fmt(train.learning_rate) << "\nseed = " << train.seed << "\n\n";
    os << "[forest]\nn_trees = " << forest.n_trees << "\nmax_depth = " << forest.max_depth
       << "\nmin_leaf = " << forest.min_leaf << "\nfeatures_per_node = " << forest.features_per_node
       << "\nthreads = " << forest.threads << "\nseed = " << forest.seed << "\n\n";
    os << "[calibration]\nsegments = " << calibration.segments << "\ntolerance = " << fmt(calibration.tolerance)
       << "\ngroup_by = " << ee::to_string(calibration.group_by) << "\n\n";
    os << "[eval]\ntolerances = " << fmt_list(eval.tolerances) << "\nsnr_grid = " << fmt_list(eval.snr_grid)
       << "\nruns = " << eval.runs << "\nseed = " << eval.seed << "\nthreshold = " << fmt(eval.threshold) << "\n";
    if (!artifacts.empty()) os << "\n[paths]\nartifacts = " << artifacts.string() << "\n";
    return os.str();
}

void RunConfig::validate() const {
    auto require = [](bool ok, const char* key, const char* rule) {
        if (!ok) throw std::invalid_argument(std::string(key) + " " + rule);
    };
    require(data.classes >= 2 && data.classes <= 65535, "data.classes", "must lie in [2, 65535]");
    require(data.frames_per_class >= 10, "data.frames_per_class", "must be >= 10");
    require(data.samples_per_us >= 2 && data.samples_per_us % 2 == 0, "data.samples_per_us", "must be even and >= 2");
    rfdata::FrameFormat ff;
    ff.samples_per_us = data.samples_per_us;
    require(data.length >= ff.frame_samples(), "data.length", "is shorter than one frame");
    require(data.window >= 1 && static_cast<std::size_t>(data.window) <= data.length, "data.window",
            "must lie in [1, length]");
    require(data.stride >= 1, "data.stride", "must be >= 1");
    require(train.epochs >= 0, "train.epochs", "must be >= 0");
    require(train.batch_size >= 2, "train.batch_size", "must be >= 2");
    require(train.learning_rate > 0, "train.learning_rate", "must be > 0");
    require(forest.n_trees >= 1, "forest.n_trees", "must be >= 1");
    require(forest.max_depth >= 1, "forest.max_depth", "must be >= 1");
    require(forest.min_leaf >= 1, "forest.min_leaf", "must be >= 1");
    require(forest.features_per_node >= 0, "forest.features_per_node", "must be >= 0");
    require(calibration.segments >= 1, "calibration.segments", "must be >= 1");
    require(calibration.tolerance >= 0, "calibration.tolerance", "must be >= 0");
    require(eval.runs >= 1, "eval.runs", "must be >= 1");
    require(eval.threshold >= 0 && eval.threshold <= 1, "eval.threshold", "must lie in [0, 1]");
    for (double t : eval.tolerances) require(t >= 0, "eval.tolerances", "must be >= 0");
    for (double s : eval.snr_grid) require(!std::isnan(s) && s != -std::numeric_limits<double>::infinity(), "eval.snr_grid", "must be finite or inf");
    {
        cvnn::ModelConfig mc;
        mc.num_classes = data.classes;
        mc.input_h = data.window;
        mc.input_w = rfdata::StftParams{data.window, data.stride, data.window_fn}.hops(data.length);
        mc.width_scale = model.width_scale;
        mc.base_channels = model.base_channels;
        mc.stem_kernel = model.stem_kernel;
        mc.stem_stride = model.stem_stride;
        mc.validate();
    }
}

RunConfig RunConfig::with_seed(std::uint64_t seed) const {
    RunConfig c = *this;
    c.data.seed = seed;
    c.train.seed = derive_seed(seed, 0x545241u);
    c.forest.seed = derive_seed(seed, 0x464f52u);
    return c;
}

rfdata::SynthOptions synth_options(const RunConfig& cfg) {
    rfdata::SynthOptions o;
    o.frames_per_class = cfg.data.frames_per_class;
    o.length = cfg.data.length;
    o.stft = {cfg.data.window, cfg.data.stride, cfg.data.window_fn};
    o.format.samples_per_us = cfg.data.samples_per_us;
    o.seed = cfg.data.seed;
    return o;
}

rfdata::SignalDataset synthesize(const RunConfig& cfg) {
    const auto profiles = rfdata::make_profiles(cfg.data.classes, cfg.data.seed);
    return rfdata::synth_dataset(profiles, synth_options(cfg));
}

cvnn::ModelConfig model_config(const RunConfig& cfg, const rfdata::SignalDataset& ds) {
    cvnn::ModelConfig mc;
    mc.num_classes = ds.num_classes;
    mc.input_h = ds.stft.window_len;
    mc.input_w = ds.stft.hops(ds.sample_length);
    mc.width_scale = cfg.model.width_scale;
    mc.base_channels = cfg.model.base_channels;
    mc.stem_kernel = cfg.model.stem_kernel;
    mc.stem_stride = cfg.model.stem_stride;
    mc.seed = derive_seed(cfg.train.seed, 0x494e4954u);
    return mc;
}

cvnn::TrainConfig train_config(const RunConfig& cfg) {
    cvnn::TrainConfig t;
    t.epochs = cfg.train.epochs;
    t.batch_size = cfg.train.batch_size;
    t.learning_rate = cfg.train.learning_rate;
    t.seed = cfg.train.seed;
    return t;
}

forest::ForestConfig forest_config(const RunConfig& cfg) {
    forest::ForestConfig f;
    f.n_trees = cfg.forest.n_trees;
    f.max_depth = cfg.forest.max_depth;
    f.min_leaf = cfg.forest.min_leaf;
    f.features_per_node = cfg.forest.features_per_node;
    f.threads = cfg.forest.threads;
    f.seed = cfg.forest.seed;
    return f;
}

Prepared prepare(const rfdata::SignalDataset& ds) {
    Prepared p;
    p.spectrograms.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) p.spectrograms.push_back(ds.spectrogram(i));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto* s = &p.spectrograms[i];
        switch (ds.splits[i]) {
            case rfdata::Split::Train: p.train.push_back(s); break;
            case rfdata::Split::Val: p.val.push_back(s); break;
            case rfdata::Split::Test:
                p.test.push_back(s);
                p.test_indices.push_back(i);
                break;
        }
    }
    return p;
}

Experiment run_experiment(const RunConfig& cfg, const Logger& log) {
    cfg.validate();
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    Experiment x;
    x.dataset = synthesize(cfg);
    x.data = prepare(x.dataset);
    say("dataset: " + std::to_string(x.dataset.size()) + " frames");
    x.bundle.model = cvnn::CvnnModel(model_config(cfg, x.dataset));
    x.training = cvnn::train_backbone(x.bundle.model, x.data.train, x.data.val, train_config(cfg));
    say("backbone: best epoch " + std::to_string(x.training.best_epoch) + ", val accuracy " +
        std::to_string(x.training.best_val_accuracy));
    x.bundle.branches = ee::train_branches(x.bundle.model, x.data.train, forest_config(cfg));
    x.calibration = ee::collect_calibration_inputs(x.bundle.model, x.bundle.branches, x.data.val);
    x.bundle.table = ee::calibrate_ranges(x.calibration, cfg.calibration.segments, cfg.calibration.tolerance,
                                          cfg.calibration.group_by);
    x.bundle.validate();
    x.report = eval::evaluate(x.bundle, x.data.test);
    x.report.seed = cfg.data.seed;
    x.report.tolerance = cfg.calibration.tolerance;
    say("hybrid accuracy " + std::to_string(x.report.accuracy) + ", backbone " +
        std::to_string(x.report.backbone_accuracy) + ", exit rate " + std::to_string(x.report.early_exit_rate));
    return x;
}

}  // namespace exitrf::pipeline
