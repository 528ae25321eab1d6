#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "exitrf/common.hpp"

namespace exitrf::forest {

/// Gini impurity 1 - sum p_k^2. Throws std::invalid_argument for an all-zero count vector.
double gini(std::span<const std::uint32_t> class_counts);

/// Dense row-major feature matrix.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
    void push_row(std::span<const double> row);
};

struct Split {
    std::size_t feature = 0;
    double threshold = 0.0;  // left branch takes x <= threshold
    double gain = 0.0;
};

/// Exhaustive search over `candidate_features` (expected ascending) and
/// midpoints between consecutive distinct sorted values. Ties go to the
/// lowest feature index, then the lowest threshold. Returns nullopt when no
/// split lowers the impurity or every split leaves a child below `min_leaf`.
std::optional<Split> best_split(const FeatureMatrix& x, std::span<const int> labels, int num_classes,
                                std::span<const std::size_t> samples, std::span<const std::size_t> candidate_features,
                                std::size_t min_leaf);

struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::vector<std::uint32_t> class_counts;  // leaves only

    bool is_leaf() const noexcept { return feature < 0; }
    bool operator==(const Node&) const = default;
};

class DecisionTree {
public:
    std::vector<Node> nodes;  // nodes[0] is the root
    int num_classes = 0;

    /// Leaf reached by `x`, and the number of comparisons made on the way.
    const Node& leaf(std::span<const double> x, int* comparisons = nullptr) const;
    /// Majority class of the reached leaf (lowest index on ties).
    int predict(std::span<const double> x) const;
    int depth() const;

    bool operator==(const DecisionTree&) const = default;
};

/// How a tap's 4-D complex feature map was reduced to the forest's input.
struct FeatureRecipe {
    int tap_index = 0;
    int channels = 0;
    int height = 0;
    int width = 0;

    /// Channel-wise spatial averaging of re and im: 2 C H W adds.
    std::uint64_t flops() const {
        return 2ull * static_cast<std::uint64_t>(channels) * static_cast<std::uint64_t>(height) *
               static_cast<std::uint64_t>(width);
    }
    bool operator==(const FeatureRecipe&) const = default;
};

struct ForestConfig {
    int n_trees = 400;
    int max_depth = 20;
    int features_per_node = 0;  // 0 -> ceil(sqrt(d))
    std::size_t min_leaf = 1;
    std::uint64_t seed = 1;
    int threads = 0;  // 0 -> hardware concurrency
};

/// Random-forest branch classifier. Confidence is the vote fraction.
struct ForestBranch {
    std::vector<DecisionTree> trees;
    int num_classes = 0;
    std::size_t num_features = 0;
    FeatureRecipe recipe;
    /// Mean root-to-leaf comparison count over the fitting data.
    double mean_path_length = 0.0;
    /// Out-of-bag accuracy measured during fitting (NaN when no sample was ever out of bag).
    double oob_accuracy = 0.0;

    /// Integer votes per class.
    std::vector<std::uint32_t> votes(std::span<const double> x) const;
    /// votes / n_trees; argmax (lowest index on ties) is the branch prediction.
    std::vector<double> predict_proba(std::span<const double> x) const;
    int predict(std::span<const double> x) const;

    /// n_trees * mean_path_length comparisons (1 FLOP each) + feature reduction.
    double flops() const;

    bool operator==(const ForestBranch&) const = default;
};

/// Bootstrap-aggregated Gini trees with per-node feature subsampling.
/// Throws std::invalid_argument when fewer than two classes are present.
ForestBranch fit_forest(const FeatureMatrix& x, std::span<const int> labels, int num_classes,
                        const ForestConfig& config, FeatureRecipe recipe = {});

double forest_flops(const ForestBranch& branch);

void forest_encode(const ForestBranch& branch, ByteWriter& w);
/// Throws FormatError on structurally invalid trees (dangling child indices,
/// empty leaves).
ForestBranch forest_decode(ByteReader& r);

/// Flat node table: tree,node,feature,threshold,left,right,counts.
std::string export_node_table(const ForestBranch& branch);

}  // namespace exitrf::forest
