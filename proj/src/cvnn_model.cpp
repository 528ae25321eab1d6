#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "exitrf/cvnn.hpp"

namespace exitrf::cvnn {

void ModelConfig::validate() const {
    if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
    if (width_scale < 1 || base_channels % width_scale != 0 || base_channels / width_scale < 1) {
        throw std::invalid_argument("model: base_channels must be divisible by width_scale");
    }
    if (stem_kernel < 1 || stem_kernel % 2 == 0) throw std::invalid_argument("model: stem_kernel must be odd");
    if (stem_stride < 1) throw std::invalid_argument("model: stem_stride must be >= 1");
    // Three stride-2 groups after the stem need at least one output pixel.
    int h = (input_h + 2 * (stem_kernel / 2) - stem_kernel) / stem_stride + 1;
    int w = (input_w + 2 * (stem_kernel / 2) - stem_kernel) / stem_stride + 1;
    for (int g = 0; g < 3; ++g) {
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
    }
    if (input_h < 1 || input_w < 1 || h < 1 || w < 1) throw std::invalid_argument("model: input too small");
}

std::uint64_t conv_macs(int cin, int cout, int kernel, int out_h, int out_w, Arithmetic arithmetic) {
    const std::uint64_t real = static_cast<std::uint64_t>(cin) * kernel * kernel * cout * out_h * out_w;
    return arithmetic == Arithmetic::Complex ? 4 * real : real;
}

std::uint64_t conv_flops(int cin, int cout, int kernel, int out_h, int out_w, Arithmetic arithmetic) {
    std::uint64_t f = 2 * conv_macs(cin, cout, kernel, out_h, out_w, arithmetic);
    if (arithmetic == Arithmetic::Complex) f += 2ull * cout * out_h * out_w;
    return f;
}

std::vector<LayerCost> layer_costs(const ModelConfig& cfg, Arithmetic ar) {
    cfg.validate();
    const bool cx = ar == Arithmetic::Complex;
    const std::uint64_t bn_per = cx ? 16 : 4;
    const std::uint64_t act_per = cx ? 2 : 1;
    std::vector<LayerCost> out;

    auto osz = [](int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; };
    int h = osz(cfg.input_h, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    int w = osz(cfg.input_w, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    int c = cfg.group_channels(0);
    auto elems = [&](int ch) { return static_cast<std::uint64_t>(ch) * h * w; };

    out.push_back({"stem.conv", conv_flops(1, c, cfg.stem_kernel, h, w, ar), 0});
    out.push_back({"stem.crelu", act_per * elems(c), 0});
    out.push_back({"stem.bn", bn_per * elems(c), 0});

    for (int g = 0; g < 4; ++g) {
        for (int b = 0; b < 2; ++b) {
            const bool down = g >= 1 && b == 0;
            const int cin = c;
            const int cout = cfg.group_channels(g);
            const std::string name = "block" + std::to_string(2 * g + b);
            if (down) {
                h = osz(h, 3, 2, 1);
                w = osz(w, 3, 2, 1);
            }
            out.push_back({name + ".conv1", conv_flops(cin, cout, 3, h, w, ar), g + 1});
            out.push_back({name + ".bn1", bn_per * elems(cout), g + 1});
            out.push_back({name + ".crelu1", act_per * elems(cout), g + 1});
            out.push_back({name + ".conv2", conv_flops(cout, cout, 3, h, w, ar), g + 1});
            out.push_back({name + ".bn2", bn_per * elems(cout), g + 1});
            if (down) {
                out.push_back({name + ".down_conv", conv_flops(cin, cout, 1, h, w, ar), g + 1});
                out.push_back({name + ".down_bn", bn_per * elems(cout), g + 1});
            }
            out.push_back({name + ".add", act_per * elems(cout), g + 1});
            out.push_back({name + ".crelu2", act_per * elems(cout), g + 1});
            c = cout;
        }
    }
    out.push_back({"pool", act_per * elems(c), 5});
    const std::uint64_t d = cx ? 2ull * c : static_cast<std::uint64_t>(c);
    out.push_back({"fc", 2 * d * cfg.num_classes + cfg.num_classes, 5});
    return out;
}

std::array<Shape4, kNumTaps> tap_shapes(const ModelConfig& cfg) {
    cfg.validate();
    auto osz = [](int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; };
    int h = osz(cfg.input_h, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    int w = osz(cfg.input_w, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
    std::array<Shape4, kNumTaps> out;
    out[0] = {1, cfg.group_channels(0), h, w};
    for (int g = 0; g + 1 < kNumTaps; ++g) {
        if (g >= 1) {
            h = osz(h, 3, 2, 1);
            w = osz(w, 3, 2, 1);
        }
        out[static_cast<std::size_t>(g + 1)] = {1, cfg.group_channels(g), h, w};
    }
    return out;
}

CvnnModel::CvnnModel(const ModelConfig& config) : config_(config) {
    config.validate();
    const int c0 = config.group_channels(0);
    stem_conv = CConv("stem.conv", 1, c0, config.stem_kernel, config.stem_stride, config.stem_kernel / 2);
    stem_bn = CBatchNorm("stem.bn", c0);
    int cin = c0;
    for (int g = 0; g < 4; ++g) {
        for (int b = 0; b < 2; ++b) {
            const int idx = 2 * g + b;
            const auto st = (g >= 1 && b == 0) ? BlockStructure::Downsample : BlockStructure::Identity;
            blocks[idx] = BasicBlock("block" + std::to_string(idx), cin, config.group_channels(g), st);
            cin = config.group_channels(g);
        }
    }
    const int d = 2 * config.group_channels(3);
    fc_weight = Param("fc.weight", {config.num_classes, d});
    fc_bias = Param("fc.bias", {config.num_classes});

    Rng rng(config.seed);
    stem_conv.init(rng);
    for (auto& b : blocks) b.init(rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : fc_weight.value) v = u(rng);
}

void CvnnModel::check_input(const ComplexTensor& x) const {
    if (x.shape.c != 1 || x.shape.h != config_.input_h || x.shape.w != config_.input_w || x.shape.n < 1) {
        throw std::invalid_argument("model input " + x.shape.str() + " does not match configured [Nx1x" +
                                    std::to_string(config_.input_h) + "x" + std::to_string(config_.input_w) + "]");
    }
}

ComplexTensor CvnnModel::run_stage(int stage, const ComplexTensor& x, Mode mode) {
    if (stage == 0) {
        check_input(x);
        ComplexTensor h = stem_conv.forward(x, mode);
        ComplexTensor a = crelu(h);
        if (mode == Mode::Train) stem_pre_ = std::move(h);
        return stem_bn.forward(a, mode);
    }
    if (stage < 1 || stage > 4) throw std::out_of_range("run_stage: stage must be 0..4");
    ComplexTensor y = blocks[2 * (stage - 1)].forward(x, mode);
    return blocks[2 * (stage - 1) + 1].forward(y, mode);
}

std::vector<double> CvnnModel::head(const ComplexTensor& x, Mode mode) {
    const int C = x.shape.c;
    const int N = config_.num_classes;
    const int D = 2 * C;
    if (D != fc_weight.dims[1]) throw std::invalid_argument("head: feature width mismatch");
    const double inv = 1.0 / static_cast<double>(x.shape.plane());
    std::vector<double> pooled(static_cast<std::size_t>(x.shape.n) * D);
    for (int n = 0; n < x.shape.n; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::size_t off = x.plane_offset(n, c);
            double sr = 0, si = 0;
            for (std::size_t k = 0; k < x.shape.plane(); ++k) {
                sr += x.re[off + k];
                si += x.im[off + k];
            }
            pooled[static_cast<std::size_t>(n) * D + c] = sr * inv;
            pooled[static_cast<std::size_t>(n) * D + C + c] = si * inv;
        }
    }
    std::vector<double> logits(static_cast<std::size_t>(x.shape.n) * N);
    for (int n = 0; n < x.shape.n; ++n) {
        for (int j = 0; j < N; ++j) {
            double acc = fc_bias.value[j];
            const double* wr = fc_weight.value.data() + static_cast<std::size_t>(j) * D;
            const double* f = pooled.data() + static_cast<std::size_t>(n) * D;
            for (int d = 0; d < D; ++d) acc += wr[d] * f[d];
            logits[static_cast<std::size_t>(n) * N + j] = acc;
        }
    }
    if (mode == Mode::Train) {
        pooled_ = std::move(pooled);
        last_shape_ = x.shape;
    }
    return logits;
}

ForwardResult CvnnModel::forward(const ComplexTensor& batch, Mode mode, bool keep_taps) {
    ForwardResult r;
    ComplexTensor x = run_stage(0, batch, mode);
    for (int s = 1; s <= 4; ++s) {
        if (keep_taps) r.taps[s - 1] = x;
        x = run_stage(s, x, mode);
    }
    r.logits = head(x, mode);
    return r;
}

void CvnnModel::backward(std::span<const double> dlogits) {
    const int N = config_.num_classes;
    const int C = last_shape_.c;
    const int D = 2 * C;
    const int B = last_shape_.n;
    if (dlogits.size() != static_cast<std::size_t>(B) * N) throw std::invalid_argument("backward: dlogits size");
    std::vector<double> df(static_cast<std::size_t>(B) * D, 0.0);
    for (int n = 0; n < B; ++n) {
        for (int j = 0; j < N; ++j) {
            const double g = dlogits[static_cast<std::size_t>(n) * N + j];
            fc_bias.grad[j] += g;
            double* gw = fc_weight.grad.data() + static_cast<std::size_t>(j) * D;
            const double* wr = fc_weight.value.data() + static_cast<std::size_t>(j) * D;
            const double* f = pooled_.data() + static_cast<std::size_t>(n) * D;
            double* dfn = df.data() + static_cast<std::size_t>(n) * D;
            for (int d = 0; d < D; ++d) {
                gw[d] += g * f[d];
                dfn[d] += g * wr[d];
            }
        }
    }
    ComplexTensor dx(last_shape_);
    const double inv = 1.0 / static_cast<double>(last_shape_.plane());
    for (int n = 0; n < B; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::size_t off = dx.plane_offset(n, c);
            const double gr = df[static_cast<std::size_t>(n) * D + c] * inv;
            const double gi = df[static_cast<std::size_t>(n) * D + C + c] * inv;
            std::fill_n(dx.re.begin() + static_cast<std::ptrdiff_t>(off), last_shape_.plane(), gr);
            std::fill_n(dx.im.begin() + static_cast<std::ptrdiff_t>(off), last_shape_.plane(), gi);
        }
    }
    for (int b = 7; b >= 0; --b) dx = blocks[b].backward(dx);
    dx = stem_bn.backward(dx);
    dx = crelu_backward(stem_pre_, dx);
    stem_conv.backward(dx);
}

std::vector<Param*> CvnnModel::params() {
    std::vector<Param*> p{&stem_conv.A, &stem_conv.B, &stem_bn.gamma, &stem_bn.beta};
    for (auto& b : blocks) {
        auto bp = b.params();
        p.insert(p.end(), bp.begin(), bp.end());
    }
    p.push_back(&fc_weight);
    p.push_back(&fc_bias);
    return p;
}

std::vector<std::pair<std::string, std::vector<double>*>> CvnnModel::buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out{
        {"stem.bn.running_mean", &stem_bn.running_mean}, {"stem.bn.running_cov", &stem_bn.running_cov}};
    for (auto& b : blocks) {
        auto bb = b.buffers();
        out.insert(out.end(), bb.begin(), bb.end());
    }
    return out;
}

void CvnnModel::zero_grad() {
    for (Param* p : params()) p->zero_grad();
}

std::uint64_t CvnnModel::total_flops() const {
    std::uint64_t t = 0;
    for (const auto& l : layer_flops()) t += l.flops;
    return t;
}

std::uint64_t CvnnModel::prefix_flops(int tap) const {
    if (tap < 0 || tap >= kNumTaps) throw std::out_of_range("prefix_flops: tap must be 0..3");
    std::uint64_t t = 0;
    for (const auto& l : layer_flops()) {
        if (l.stage <= tap) t += l.flops;
    }
    return t;
}

std::vector<double> softmax(std::span<const double> logits, int num_classes) {
    std::vector<double> p(logits.begin(), logits.end());
    for (std::size_t r = 0; r < p.size(); r += static_cast<std::size_t>(num_classes)) {
        const double mx = *std::max_element(p.begin() + static_cast<std::ptrdiff_t>(r),
                                            p.begin() + static_cast<std::ptrdiff_t>(r + num_classes));
        double sum = 0;
        for (int j = 0; j < num_classes; ++j) sum += (p[r + j] = std::exp(p[r + j] - mx));
        for (int j = 0; j < num_classes; ++j) p[r + j] /= sum;
    }
    return p;
}

double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels, int num_classes,
                             std::vector<double>* dlogits) {
    const std::size_t B = labels.size();
    if (logits.size() != B * static_cast<std::size_t>(num_classes)) {
        throw std::invalid_argument("softmax_cross_entropy: logits/labels size mismatch");
    }
    const auto p = softmax(logits, num_classes);
    double loss = 0;
    for (std::size_t n = 0; n < B; ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes) throw std::invalid_argument("label out of range");
        // log-softmax computed directly to stay finite for saturated logits
        const auto row = logits.subspan(n * num_classes, static_cast<std::size_t>(num_classes));
        const double mx = *std::max_element(row.begin(), row.end());
        double lse = 0;
        for (double v : row) lse += std::exp(v - mx);
        loss -= row[labels[n]] - mx - std::log(lse);
    }
    if (dlogits) {
        dlogits->assign(p.begin(), p.end());
        for (std::size_t n = 0; n < B; ++n) (*dlogits)[n * num_classes + labels[n]] -= 1.0;
        for (double& g : *dlogits) g /= static_cast<double>(B);
    }
    return loss / static_cast<double>(B);
}

LossAndGrad compute_gradients(CvnnModel& model, const ComplexTensor& batch, std::span<const int> labels) {
    if (static_cast<std::size_t>(batch.shape.n) != labels.size()) {
        throw std::invalid_argument("compute_gradients: batch/labels size mismatch");
    }
    model.zero_grad();
    ComplexTensor x = model.run_stage(0, batch, Mode::Train);
    for (int s = 0; s <= 4; ++s) {
        if (s > 0) x = model.run_stage(s, x, Mode::Train);
        if (!x.all_finite()) {
            throw std::runtime_error("non-finite activations after stage " + std::to_string(s) +
                                     (s == 0 ? " (stem)" : " (residual group " + std::to_string(s) + ")"));
        }
    }
    LossAndGrad r;
    r.logits = model.head(x, Mode::Train);
    std::vector<double> dlogits;
    r.loss = softmax_cross_entropy(r.logits, labels, model.config().num_classes, &dlogits);
    if (!std::isfinite(r.loss)) throw std::runtime_error("non-finite loss at head (fc layer)");
    model.backward(dlogits);
    return r;
}

}  // namespace exitrf::cvnn
