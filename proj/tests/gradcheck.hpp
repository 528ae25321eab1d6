#pragma once

// Central finite-difference checks of every layer's analytic backward pass.
// Each check returns the worst relative error seen.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "exitrf/cvnn.hpp"
#include "oracles.hpp"

namespace gradcheck {

using namespace exitrf::cvnn;

struct Result {
    std::string name;
    double worst = 0.0;
    std::size_t checked = 0;

    void add(double analytic, double numeric) {
        worst = std::max(worst, oracle::grad_rel_error(analytic, numeric));
        ++checked;
    }
};

/// Entries of a vector to probe: all of them when small, else `limit` random picks.
inline std::vector<std::size_t> probe_indices(std::size_t size, std::size_t limit, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    if (size > limit) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(limit);
    }
    return idx;
}

/// Loss <r, layer(x)>; checks d/dx and d/dparams for a layer with forward/backward.
template <class Layer>
Result check_layer(const std::string& name, Layer& layer, std::vector<Param*> params, ComplexTensor x,
                   std::mt19937_64& rng, std::size_t limit = 1u << 30) {
    const ComplexTensor probe = layer.forward(x, Mode::Train);
    const ComplexTensor r = oracle::random_tensor(probe.shape, rng);
    for (auto* p : params) p->zero_grad();
    layer.forward(x, Mode::Train);
    const ComplexTensor dx = layer.backward(r);
    auto loss = [&] { return oracle::project(layer.forward(x, Mode::Train), r); };

    Result res{name};
    for (std::size_t i : probe_indices(x.re.size(), limit, rng)) {
        res.add(dx.re[i], oracle::central_diff(x.re[i], loss));
        res.add(dx.im[i], oracle::central_diff(x.im[i], loss));
    }
    for (auto* p : params) {
        const auto grad = p->grad;
        for (std::size_t i : probe_indices(p->size(), limit, rng)) res.add(grad[i], oracle::central_diff(p->value[i], loss));
    }
    return res;
}

struct CReluLayer {
    ComplexTensor x;
    ComplexTensor forward(const ComplexTensor& in, Mode) {
        x = in;
        return crelu(in);
    }
    ComplexTensor backward(const ComplexTensor& dy) { return crelu_backward(x, dy); }
};

inline Result check_cconv(std::mt19937_64& rng) {
    CConv conv("cconv", 2, 3, 3, 2, 1);
    conv.init(rng);
    return check_layer("CCONV", conv, {&conv.A, &conv.B}, oracle::random_tensor({2, 2, 7, 6}, rng), rng);
}

inline Result check_cbn(std::mt19937_64& rng) {
    CBatchNorm bn("cbn", 3);
    std::normal_distribution<double> g(0.0, 0.3);
    for (auto& v : bn.gamma.value) v += g(rng);
    for (auto& v : bn.beta.value) v = g(rng);
    ComplexTensor x = oracle::random_tensor({3, 3, 3, 3}, rng);
    for (std::size_t i = 0; i < x.re.size(); ++i) x.im[i] = 0.6 * x.re[i] + 0.5 * x.im[i] + 0.3;
    return check_layer("CBN", bn, {&bn.gamma, &bn.beta}, x, rng);
}

inline Result check_crelu(std::mt19937_64& rng) {
    CReluLayer layer;
    ComplexTensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
    // Keep every entry away from the kink so the difference quotient is defined.
    for (auto* plane : {&x.re, &x.im})
        for (auto& v : *plane) v = v >= 0 ? v + 0.05 : v - 0.05;
    return check_layer("CReLU", layer, {}, x, rng);
}

inline Result check_block(BlockStructure s, std::mt19937_64& rng) {
    const int cout = s == BlockStructure::Identity ? 3 : 4;
    BasicBlock b("block", 3, cout, s);
    b.init(rng);
    return check_layer(s == BlockStructure::Identity ? "BasicBlock(1)" : "BasicBlock(2)", b, b.params(),
                       oracle::random_tensor({2, 3, 6, 6}, rng), rng, 24);
}

inline ModelConfig gradcheck_model_config() {
    ModelConfig c;
    c.num_classes = 4;
    c.input_h = 16;
    c.input_w = 15;
    c.width_scale = 8;
    c.stem_stride = 1;
    c.seed = 21;
    return c;
}

/// Full width-scale-8 model with softmax cross-entropy. The FC weights and
/// bias are checked entry by entry, every other tensor at `per_param` picks.
inline std::vector<Result> check_model(std::mt19937_64& rng, std::size_t per_param = 6) {
    CvnnModel m(gradcheck_model_config());
    const ComplexTensor x = oracle::random_tensor({3, 1, 16, 15}, rng);
    const std::vector<int> labels{0, 2, 3};
    compute_gradients(m, x, labels);
    auto loss = [&] {
        const auto r = m.forward(x, Mode::Train, false);
        return softmax_cross_entropy(r.logits, labels, 4, nullptr);
    };
    Result fc{"FC"}, body{"model (all parameters)"};
    for (auto* p : m.params()) {
        const auto grad = p->grad;
        const bool is_fc = p == &m.fc_weight || p == &m.fc_bias;
        for (std::size_t i : probe_indices(p->size(), is_fc ? p->size() : per_param, rng)) {
            (is_fc ? fc : body).add(grad[i], oracle::central_diff(p->value[i], loss));
        }
    }
    return {fc, body};
}

inline Result check_softmax_ce(std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    std::vector<double> logits(5 * 6);
    for (auto& v : logits) v = 2.0 * g(rng);
    const std::vector<int> labels{0, 5, 2, 2, 4};
    std::vector<double> d;
    softmax_cross_entropy(logits, labels, 6, &d);
    Result res{"softmax-CE"};
    for (std::size_t i = 0; i < logits.size(); ++i) {
        res.add(d[i], oracle::central_diff(logits[i], [&] { return softmax_cross_entropy(logits, labels, 6, nullptr); }));
    }
    return res;
}

/// Every layer type in a fixed order.
inline std::vector<Result> check_all(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Result> out{check_cconv(rng), check_cbn(rng), check_crelu(rng),
                            check_block(BlockStructure::Identity, rng), check_block(BlockStructure::Downsample, rng),
                            check_softmax_ce(rng)};
    for (auto& r : check_model(rng)) out.push_back(r);
    return out;
}

}  // namespace gradcheck
