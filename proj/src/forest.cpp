#include "exitrf/forest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace exitrf::forest {

double gini(std::span<const std::uint32_t> class_counts) {
    double total = 0;
    for (auto c : class_counts) total += c;
    if (total == 0) throw std::invalid_argument("gini: all class counts are zero");
    double sq = 0;
    for (auto c : class_counts) sq += static_cast<double>(c) * c;
    return 1.0 - sq / (total * total);
}

void FeatureMatrix::push_row(std::span<const double> row) {
    if (rows == 0 && cols == 0) cols = row.size();
    if (row.size() != cols) throw std::invalid_argument("FeatureMatrix: row width mismatch");
    values.insert(values.end(), row.begin(), row.end());
    ++rows;
}

std::optional<Split> best_split(const FeatureMatrix& x, std::span<const int> labels, int num_classes,
                                std::span<const std::size_t> samples, std::span<const std::size_t> candidate_features,
                                std::size_t min_leaf) {
    const std::size_t n = samples.size();
    if (n < 2 || candidate_features.empty()) return std::nullopt;
    min_leaf = std::max<std::size_t>(min_leaf, 1);

    std::vector<std::uint64_t> total(static_cast<std::size_t>(num_classes), 0);
    for (auto s : samples) ++total[static_cast<std::size_t>(labels[s])];
    double total_sq = 0;
    for (auto c : total) total_sq += static_cast<double>(c) * c;
    const double dn = static_cast<double>(n);
    const double parent = 1.0 - total_sq / (dn * dn);
    if (parent <= 0.0) return std::nullopt;

    std::optional<Split> best;
    constexpr double kTieEps = 1e-12;
    std::vector<std::pair<double, int>> col(n);
    std::vector<std::uint64_t> left(static_cast<std::size_t>(num_classes));
    for (std::size_t f : candidate_features) {
        for (std::size_t k = 0; k < n; ++k) col[k] = {x.at(samples[k], f), labels[samples[k]]};
        std::sort(col.begin(), col.end());
        std::fill(left.begin(), left.end(), 0);
        double lsq = 0, rsq = total_sq;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            const auto k = static_cast<std::size_t>(col[i].second);
            const double rk = static_cast<double>(total[k] - left[k]);
            lsq += 2.0 * static_cast<double>(left[k]) + 1.0;
            rsq -= 2.0 * rk - 1.0;
            ++left[k];
            if (!(col[i].first < col[i + 1].first)) continue;
            const std::size_t nl = i + 1;
            const std::size_t nr = n - nl;
            if (nl < min_leaf || nr < min_leaf) continue;
            const double dl = static_cast<double>(nl), dr = static_cast<double>(nr);
            const double weighted = (dl * (1.0 - lsq / (dl * dl)) + dr * (1.0 - rsq / (dr * dr))) / dn;
            const double gain = parent - weighted;
            if (gain <= kTieEps) continue;
            if (!best || gain > best->gain + kTieEps) {
                double thr = 0.5 * (col[i].first + col[i + 1].first);
                if (!(thr < col[i + 1].first)) thr = col[i].first;
                best = Split{f, thr, gain};
            }
        }
    }
    return best;
}

const Node& DecisionTree::leaf(std::span<const double> x, int* comparisons) const {
    std::size_t i = 0;
    int comps = 0;
    while (!nodes[i].is_leaf()) {
        ++comps;
        i = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[i].feature)] <= nodes[i].threshold
                                         ? nodes[i].left
                                         : nodes[i].right);
    }
    if (comparisons) *comparisons = comps;
    return nodes[i];
}

int DecisionTree::predict(std::span<const double> x) const {
    const auto& c = leaf(x).class_counts;
    return static_cast<int>(std::max_element(c.begin(), c.end()) - c.begin());
}

int DecisionTree::depth() const {
    std::vector<std::pair<std::size_t, int>> stack{{0, 0}};
    int d = 0;
    while (!stack.empty()) {
        auto [i, dd] = stack.back();
        stack.pop_back();
        d = std::max(d, dd);
        if (!nodes[i].is_leaf()) {
            stack.emplace_back(static_cast<std::size_t>(nodes[i].left), dd + 1);
            stack.emplace_back(static_cast<std::size_t>(nodes[i].right), dd + 1);
        }
    }
    return d;
}

std::vector<std::uint32_t> ForestBranch::votes(std::span<const double> x) const {
    if (x.size() != num_features) {
        throw std::invalid_argument("forest: feature vector has " + std::to_string(x.size()) + " entries, expected " +
                                    std::to_string(num_features));
    }
    std::vector<std::uint32_t> v(static_cast<std::size_t>(num_classes), 0);
    for (const auto& t : trees) ++v[static_cast<std::size_t>(t.predict(x))];
    return v;
}

std::vector<double> ForestBranch::predict_proba(std::span<const double> x) const {
    const auto v = votes(x);
    std::vector<double> p(v.size());
    const double n = static_cast<double>(trees.size());
    for (std::size_t k = 0; k < v.size(); ++k) p[k] = static_cast<double>(v[k]) / n;
    return p;
}

int ForestBranch::predict(std::span<const double> x) const {
    const auto v = votes(x);
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double ForestBranch::flops() const {
    return static_cast<double>(trees.size()) * mean_path_length + static_cast<double>(recipe.flops());
}

double forest_flops(const ForestBranch& branch) { return branch.flops(); }

namespace {

DecisionTree grow_tree(const FeatureMatrix& x, std::span<const int> labels, int num_classes,
                       std::vector<std::size_t> rows, const ForestConfig& cfg, std::size_t mtry, std::mt19937_64& rng) {
    DecisionTree tree;
    tree.num_classes = num_classes;
    struct Work {
        std::size_t node;
        std::vector<std::size_t> rows;
        int depth;
    };
    std::vector<Work> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, std::move(rows), 0});
    std::vector<std::size_t> all_features(x.cols);
    std::iota(all_features.begin(), all_features.end(), 0);
    const std::size_t min_leaf = std::max<std::size_t>(cfg.min_leaf, 1);

    while (!stack.empty()) {
        Work w = std::move(stack.back());
        stack.pop_back();
        std::vector<std::uint32_t> counts(static_cast<std::size_t>(num_classes), 0);
        for (auto r : w.rows) ++counts[static_cast<std::size_t>(labels[r])];

        std::optional<Split> split;
        const bool pure = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) <= 1;
        if (!pure && w.depth < cfg.max_depth && w.rows.size() >= 2 * min_leaf) {
            // partial Fisher-Yates for the node's feature subset
            for (std::size_t k = 0; k < mtry; ++k) {
                std::uniform_int_distribution<std::size_t> pick(k, all_features.size() - 1);
                std::swap(all_features[k], all_features[pick(rng)]);
            }
            std::vector<std::size_t> cand(all_features.begin(), all_features.begin() + static_cast<std::ptrdiff_t>(mtry));
            std::sort(cand.begin(), cand.end());
            split = best_split(x, labels, num_classes, w.rows, cand, min_leaf);
        }
        if (!split) {
            tree.nodes[w.node].class_counts = std::move(counts);
            continue;
        }
        std::vector<std::size_t> lrows, rrows;
        for (auto r : w.rows) (x.at(r, split->feature) <= split->threshold ? lrows : rrows).push_back(r);
        const auto li = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        Node& nd = tree.nodes[w.node];
        nd.feature = static_cast<std::int32_t>(split->feature);
        nd.threshold = split->threshold;
        nd.left = li;
        nd.right = li + 1;
        stack.push_back({static_cast<std::size_t>(li + 1), std::move(rrows), w.depth + 1});
        stack.push_back({static_cast<std::size_t>(li), std::move(lrows), w.depth + 1});
    }
    return tree;
}

}  // namespace

ForestBranch fit_forest(const FeatureMatrix& x, std::span<const int> labels, int num_classes, const ForestConfig& cfg,
                        FeatureRecipe recipe) {
    if (x.rows != labels.size() || x.rows == 0) throw std::invalid_argument("fit_forest: feature/label count mismatch");
    if (cfg.n_trees < 1 || cfg.max_depth < 0) throw std::invalid_argument("fit_forest: n_trees >= 1, max_depth >= 0");
    std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
    for (int l : labels) {
        if (l < 0 || l >= num_classes) throw std::invalid_argument("fit_forest: label out of range");
        seen[static_cast<std::size_t>(l)] = 1;
    }
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
        throw std::invalid_argument("fit_forest: need at least two classes in the training data");
    }
    const std::size_t d = x.cols;
    std::size_t mtry = cfg.features_per_node > 0 ? static_cast<std::size_t>(cfg.features_per_node)
                                                 : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d))));
    mtry = std::clamp<std::size_t>(mtry, 1, d);

    ForestBranch fb;
    fb.num_classes = num_classes;
    fb.num_features = d;
    fb.recipe = recipe;
    fb.trees.resize(static_cast<std::size_t>(cfg.n_trees));
    std::vector<std::vector<std::uint8_t>> in_bag(static_cast<std::size_t>(cfg.n_trees));

    auto build = [&](std::size_t t) {
        std::mt19937_64 rng(derive_seed(cfg.seed, 0x54524545u, t));
        std::uniform_int_distribution<std::size_t> pick(0, x.rows - 1);
        std::vector<std::size_t> rows(x.rows);
        in_bag[t].assign(x.rows, 0);
        for (auto& r : rows) {
            r = pick(rng);
            in_bag[t][r] = 1;
        }
        fb.trees[t] = grow_tree(x, labels, num_classes, std::move(rows), cfg, mtry, rng);
    };
    unsigned threads = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads) : std::thread::hardware_concurrency();
    threads = std::clamp<unsigned>(threads, 1, static_cast<unsigned>(cfg.n_trees));
    if (threads == 1) {
        for (std::size_t t = 0; t < fb.trees.size(); ++t) build(t);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t t = w; t < fb.trees.size(); t += threads) build(t);
            });
        }
        for (auto& th : pool) th.join();
    }

    double comps = 0;
    std::size_t oob_n = 0, oob_ok = 0;
    std::vector<std::uint32_t> oob_votes(static_cast<std::size_t>(num_classes));
    for (std::size_t r = 0; r < x.rows; ++r) {
        std::fill(oob_votes.begin(), oob_votes.end(), 0);
        bool any = false;
        for (std::size_t t = 0; t < fb.trees.size(); ++t) {
            int c = 0;
            const auto& lf = fb.trees[t].leaf(x.row(r), &c);
            comps += c;
            if (!in_bag[t][r]) {
                const auto& cc = lf.class_counts;
                ++oob_votes[static_cast<std::size_t>(std::max_element(cc.begin(), cc.end()) - cc.begin())];
                any = true;
            }
        }
        if (any) {
            ++oob_n;
            oob_ok += static_cast<int>(std::max_element(oob_votes.begin(), oob_votes.end()) - oob_votes.begin()) ==
                      labels[r];
        }
    }
    fb.mean_path_length = comps / static_cast<double>(x.rows * fb.trees.size());
    fb.oob_accuracy = oob_n ? static_cast<double>(oob_ok) / static_cast<double>(oob_n)
                            : std::numeric_limits<double>::quiet_NaN();
    return fb;
}

std::string export_node_table(const ForestBranch& b) {
    std::ostringstream os;
    os.precision(17);
    os << "tree,node,feature,threshold,left,right,counts\n";
    for (std::size_t t = 0; t < b.trees.size(); ++t) {
        const auto& nodes = b.trees[t].nodes;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const Node& n = nodes[i];
            os << t << ',' << i << ',' << n.feature << ',' << n.threshold << ',' << n.left << ',' << n.right << ',';
            for (std::size_t k = 0; k < n.class_counts.size(); ++k) os << (k ? ";" : "") << n.class_counts[k];
            os << '\n';
        }
    }
    return os.str();
}

void forest_encode(const ForestBranch& b, ByteWriter& w) {
    w.u32(static_cast<std::uint32_t>(b.num_classes));
    w.u32(static_cast<std::uint32_t>(b.num_features));
    w.u32(static_cast<std::uint32_t>(b.recipe.tap_index));
    w.u32(static_cast<std::uint32_t>(b.recipe.channels));
    w.u32(static_cast<std::uint32_t>(b.recipe.height));
    w.u32(static_cast<std::uint32_t>(b.recipe.width));
    w.f64(b.mean_path_length);
    w.f64(b.oob_accuracy);
    w.u32(static_cast<std::uint32_t>(b.trees.size()));
    for (const auto& t : b.trees) {
        w.u32(static_cast<std::uint32_t>(t.nodes.size()));
        for (const auto& n : t.nodes) {
            w.u32(static_cast<std::uint32_t>(n.feature));
            if (n.is_leaf()) {
                for (auto c : n.class_counts) w.u32(c);
            } else {
                w.f64(n.threshold);
                w.u32(static_cast<std::uint32_t>(n.left));
                w.u32(static_cast<std::uint32_t>(n.right));
            }
        }
    }
}

ForestBranch forest_decode(ByteReader& r) {
    ForestBranch b;
    b.num_classes = static_cast<int>(r.u32());
    b.num_features = r.u32();
    b.recipe.tap_index = static_cast<int>(r.u32());
    b.recipe.channels = static_cast<int>(r.u32());
    b.recipe.height = static_cast<int>(r.u32());
    b.recipe.width = static_cast<int>(r.u32());
    b.mean_path_length = r.f64();
    b.oob_accuracy = r.f64();
    if (b.num_classes < 2 || b.num_classes > 65535) throw FormatError(FormatErrorKind::Parse, "forest: bad class count");
    const std::uint32_t nt = r.u32();
    if (nt == 0) throw FormatError(FormatErrorKind::Parse, "forest: no trees");
    b.trees.resize(nt);
    for (auto& t : b.trees) {
        t.num_classes = b.num_classes;
        const std::uint32_t nn = r.u32();
        if (nn == 0 || nn > r.remaining()) throw FormatError(FormatErrorKind::Parse, "forest: bad node count");
        t.nodes.resize(nn);
        for (auto& n : t.nodes) {
            n.feature = static_cast<std::int32_t>(r.u32());
            if (n.is_leaf()) {
                n.class_counts.resize(static_cast<std::size_t>(b.num_classes));
                std::uint64_t total = 0;
                for (auto& c : n.class_counts) total += (c = r.u32());
                if (total == 0) throw FormatError(FormatErrorKind::Parse, "forest: empty leaf");
            } else {
                n.threshold = r.f64();
                n.left = static_cast<std::int32_t>(r.u32());
                n.right = static_cast<std::int32_t>(r.u32());
                if (static_cast<std::size_t>(n.feature) >= b.num_features) {
                    throw FormatError(FormatErrorKind::Parse, "forest: split feature out of range");
                }
            }
        }
        // Children must point forward so traversal always terminates.
        for (std::size_t i = 0; i < t.nodes.size(); ++i) {
            const auto& n = t.nodes[i];
            if (n.is_leaf()) continue;
            if (n.left <= static_cast<std::int32_t>(i) || n.right <= static_cast<std::int32_t>(i) ||
                static_cast<std::size_t>(n.left) >= t.nodes.size() || static_cast<std::size_t>(n.right) >= t.nodes.size()) {
                throw FormatError(FormatErrorKind::Parse, "forest: dangling child index");
            }
        }
    }
    return b;
}

}  // namespace exitrf::forest
