#pragma once

// Hand-built calibration inputs and a hybrid bundle whose branches vote a
// fixed list regardless of input, so every outcome can be traced by hand.

#include <random>

#include "exitrf/earlyexit.hpp"

namespace fixtures {

using namespace exitrf;
using namespace exitrf::earlyexit;


// Six samples, all predicted as category 1 by every branch, with confidences
// 0.2 .. 0.9 in shuffled order. Sorted segments of two carry (branch, backbone)
// correct counts (1,2), (2,2), (2,1).
inline CalibrationInputs hand_fixture() {
    CalibrationInputs in;
    in.num_classes = 6;
    struct Row {
        double p;
        int label;
        int backbone;
    };
    const Row rows[] = {{0.6, 1, 1}, {0.2, 1, 1}, {0.9, 1, 2}, {0.3, 0, 0}, {0.8, 1, 1}, {0.5, 1, 1}};
    for (const auto& r : rows) {
        in.correct.push_back(r.label);
        in.backbone_pred.push_back(r.backbone);
        for (int m = 0; m < kNumBranches; ++m) {
            in.branch_pred[static_cast<std::size_t>(m)].push_back(1);
            for (int n = 0; n < 6; ++n) {
                in.confidence[static_cast<std::size_t>(m)].push_back(n == 1 ? r.p : (1.0 - r.p) / 5.0);
            }
        }
    }
    return in;
}

inline CalibrationInputs random_inputs(int classes, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    CalibrationInputs in;
    in.num_classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = lab(rng);
        in.correct.push_back(y);
        in.backbone_pred.push_back(u(rng) < 0.9 ? y : lab(rng));
        for (int m = 0; m < kNumBranches; ++m) {
            std::vector<double> p(static_cast<std::size_t>(classes));
            double s = 0;
            for (auto& v : p) s += (v = u(rng));
            p[static_cast<std::size_t>(y)] += u(rng) * (m + 1) * 0.5 * s;
            double t = 0;
            for (double v : p) t += v;
            for (auto& v : p) v /= t;
            in.branch_pred[static_cast<std::size_t>(m)].push_back(argmax(p));
            for (double v : p) in.confidence[static_cast<std::size_t>(m)].push_back(v);
        }
    }
    return in;
}

inline cvnn::ModelConfig fixture_config() {
    cvnn::ModelConfig c;
    c.num_classes = 3;
    c.input_h = 16;
    c.input_w = 15;
    c.width_scale = 8;
    c.stem_stride = 1;
    c.seed = 3;
    return c;
}

inline forest::DecisionTree leaf_tree(int winner) {
    forest::DecisionTree t;
    t.num_classes = 3;
    forest::Node n;
    n.class_counts = {0, 0, 0};
    n.class_counts[static_cast<std::size_t>(winner)] = 1;
    t.nodes.push_back(n);
    return t;
}

// Branches whose votes ignore the input: a fixed list of single-leaf trees.
inline HybridBundle fixture_bundle(const std::array<std::vector<int>, kNumBranches>& votes) {
    HybridBundle b;
    b.model = cvnn::CvnnModel(fixture_config());
    const auto shapes = cvnn::tap_shapes(b.model.config());
    for (int m = 0; m < kNumBranches; ++m) {
        auto& f = b.branches[static_cast<std::size_t>(m)];
        const auto& s = shapes[static_cast<std::size_t>(m)];
        f.num_classes = 3;
        f.num_features = 2 * static_cast<std::size_t>(s.c);
        f.recipe = {m, s.c, s.h, s.w};
        for (int v : votes[static_cast<std::size_t>(m)]) f.trees.push_back(leaf_tree(v));
    }
    b.table = ExitRangeTable(kNumBranches, 3);
    return b;
}

inline rfdata::Spectrogram fixture_sample(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    rfdata::Spectrogram s;
    s.freq_bins = 16;
    s.hops = 15;
    s.data.resize(2 * 16 * 15);
    for (auto& v : s.data) v = u(rng);
    return s;
}


}  // namespace fixtures
