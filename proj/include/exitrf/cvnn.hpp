#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "exitrf/rfdata.hpp"
#include "exitrf/tensor.hpp"

namespace exitrf::cvnn {

enum class Mode { Train, Infer };

using Rng = std::mt19937_64;

/// A learnable tensor together with its accumulated gradient.
struct Param {
    std::string name;
    std::vector<int> dims;
    std::vector<double> value;
    std::vector<double> grad;

    Param() = default;
    Param(std::string n, std::vector<int> d);
    std::size_t size() const noexcept { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Complex convolution with kernel W = A + iB, evaluated in the block form
///   [Re v; Im v] = [A -B; B A] [p; q]
/// as a single real GEMM over im2col patches.
class CConv {
public:
    CConv() = default;
    CConv(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding);

    ComplexTensor forward(const ComplexTensor& x, Mode mode);
    ComplexTensor backward(const ComplexTensor& dy);

    void init(Rng& rng);
    int out_size(int in) const noexcept { return (in + 2 * padding_ - kernel_) / stride_ + 1; }

    int in_channels() const noexcept { return cin_; }
    int out_channels() const noexcept { return cout_; }
    int kernel() const noexcept { return kernel_; }
    int stride() const noexcept { return stride_; }
    int padding() const noexcept { return padding_; }

    Param A;
    Param B;

private:
    int cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
    ComplexTensor cache_x_;
};

/// Complex batch normalization: 2x2 covariance whitening per channel followed
/// by a symmetric 2x2 scale gamma and complex shift beta.
class CBatchNorm {
public:
    static constexpr double kEpsilon = 1e-5;
    static constexpr double kMomentum = 0.1;

    CBatchNorm() = default;
    CBatchNorm(std::string name, int channels);

    ComplexTensor forward(const ComplexTensor& x, Mode mode);
    ComplexTensor backward(const ComplexTensor& dy);

    int channels() const noexcept { return channels_; }
    const std::string& name() const noexcept { return name_; }
    /// Whitened intermediate (before gamma/beta) of the last train-mode pass.
    const ComplexTensor& whitened() const noexcept { return xhat_; }

    Param gamma;  // per channel: rr, ri, ii
    Param beta;   // per channel: r, i
    std::vector<double> running_mean;  // per channel: r, i
    std::vector<double> running_cov;   // per channel: rr, ri, ii

private:
    std::string name_;
    int channels_ = 0;
    // train-mode caches
    ComplexTensor xc_;    // centered input
    ComplexTensor xhat_;  // whitened
    std::vector<std::array<double, 3>> cov_;  // batch covariance incl. epsilon
    Mode last_mode_ = Mode::Infer;
};

/// Rectifies real and imaginary parts independently.
ComplexTensor crelu(const ComplexTensor& x);
/// Gradient of crelu given its input.
ComplexTensor crelu_backward(const ComplexTensor& x, const ComplexTensor& dy);

/// Inverse square root of the 2x2 SPD matrix [[rr, ri], [ri, ii]], returned
/// as (rr, ri, ii) of the symmetric result.
std::array<double, 3> inv_sqrt_2x2(double rr, double ri, double ii);

enum class BlockStructure { Identity = 1, Downsample = 2 };

/// Residual block. Structure 1: conv-bn-crelu-conv-bn + identity, then crelu.
/// Structure 2 runs the first conv at stride 2 and adds a stride-2 1x1 conv + bn
/// on the residual path.
class BasicBlock {
public:
    BasicBlock() = default;
    BasicBlock(std::string name, int in_channels, int out_channels, BlockStructure structure);

    ComplexTensor forward(const ComplexTensor& x, Mode mode);
    ComplexTensor backward(const ComplexTensor& dy);

    BlockStructure structure() const noexcept { return structure_; }
    int in_channels() const noexcept { return cin_; }
    int out_channels() const noexcept { return cout_; }
    void init(Rng& rng);
    std::vector<Param*> params();
    std::vector<std::pair<std::string, std::vector<double>*>> buffers();

    CConv conv1, conv2, down_conv;
    CBatchNorm bn1, bn2, down_bn;

private:
    BlockStructure structure_ = BlockStructure::Identity;
    int cin_ = 0, cout_ = 0;
    ComplexTensor pre1_, sum_;
};

/// Backbone architecture. Channel widths are base_channels / width_scale
/// doubled per group; the input is one complex channel (I = Re, Q = Im).
struct ModelConfig {
    int num_classes = 10;
    int input_h = 32;
    int input_w = 31;
    int width_scale = 4;
    int base_channels = 64;
    int stem_kernel = 3;
    int stem_stride = 1;
    std::uint64_t seed = 1;

    int group_channels(int g) const { return (base_channels / width_scale) << g; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class Arithmetic { Complex, Real };

struct LayerCost {
    std::string name;
    std::uint64_t flops = 0;
    int stage = 0;  // 0 stem, 1..4 groups, 5 head
};

/// FLOPs for one inference of a backbone of this shape. Convention: one real
/// MAC = 2 FLOPs; a complex conv costs four real convolutions plus two
/// combination adds per output element; normalization, activation, residual
/// sums and pooling are counted per element.
std::vector<LayerCost> layer_costs(const ModelConfig& config, Arithmetic arithmetic = Arithmetic::Complex);

/// MAC count of a single conv layer.
std::uint64_t conv_macs(int cin, int cout, int kernel, int out_h, int out_w, Arithmetic arithmetic);
std::uint64_t conv_flops(int cin, int cout, int kernel, int out_h, int out_w, Arithmetic arithmetic);

inline constexpr int kNumTaps = 4;

/// Per-sample shape (n = 1) of each tap's feature map.
std::array<Shape4, kNumTaps> tap_shapes(const ModelConfig& config);

struct ForwardResult {
    std::vector<double> logits;  // [batch][num_classes]
    std::array<ComplexTensor, kNumTaps> taps;
};

/// Complex residual backbone with four tap points: after the stem CBN and
/// after residual groups 1-3.
class CvnnModel {
public:
    CvnnModel() = default;
    explicit CvnnModel(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return config_; }

    /// Stage 0 = stem (ends at tap 0), stages 1..3 = groups (end at taps 1..3),
    /// stage 4 = group 4.
    ComplexTensor run_stage(int stage, const ComplexTensor& x, Mode mode);
    /// Global average pool + real FC; returns logits [batch][num_classes].
    std::vector<double> head(const ComplexTensor& x, Mode mode);

    ForwardResult forward(const ComplexTensor& batch, Mode mode, bool keep_taps = true);
    /// Backpropagates d(loss)/d(logits) from the last train-mode forward.
    void backward(std::span<const double> dlogits);

    std::vector<Param*> params();
    void zero_grad();

    /// Running statistics of every CBN layer, in a stable order.
    std::vector<std::pair<std::string, std::vector<double>*>> buffers();

    std::vector<LayerCost> layer_flops() const { return layer_costs(config_); }
    std::uint64_t total_flops() const;
    /// FLOPs consumed from the input through tap `tap`.
    std::uint64_t prefix_flops(int tap) const;

    CConv stem_conv;
    CBatchNorm stem_bn;
    std::array<BasicBlock, 8> blocks;
    Param fc_weight;  // [num_classes][2C]
    Param fc_bias;

private:
    void check_input(const ComplexTensor& x) const;

    ModelConfig config_;
    ComplexTensor stem_pre_;   // stem conv output (pre-crelu)
    std::vector<double> pooled_;  // [batch][2C]
    Shape4 last_shape_;
};

/// Row-wise softmax.
std::vector<double> softmax(std::span<const double> logits, int num_classes);

/// Mean softmax cross-entropy and its gradient w.r.t. logits.
double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels, int num_classes,
                             std::vector<double>* dlogits);

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> logits;
};

/// Forward (train mode) + backward; gradients land in each Param::grad.
/// Throws std::runtime_error naming the stage when activations go non-finite.
LossAndGrad compute_gradients(CvnnModel& model, const ComplexTensor& batch, std::span<const int> labels);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update over `params` using their grad fields.
void adam_step(std::span<Param* const> params, AdamState& state, const AdamConfig& config);

struct TrainConfig {
    int epochs = 300;
    int batch_size = 1024;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 1;
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
};

/// Packs spectrograms (plane 0 -> Re, plane 1 -> Im) into a [B,1,F,T] tensor.
ComplexTensor to_tensor(std::span<const rfdata::Spectrogram* const> samples);
ComplexTensor to_tensor(const rfdata::Spectrogram& sample);

/// Mini-batch Adam training with per-epoch shuffling. Keeps the parameters of
/// the epoch with the best validation accuracy (later epochs win ties; the last epoch when `val` is
/// empty). Throws std::runtime_error when the loss diverges.
TrainResult train_backbone(CvnnModel& model, std::span<const rfdata::Spectrogram* const> train,
                           std::span<const rfdata::Spectrogram* const> val, const TrainConfig& config,
                           const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Argmax predictions in infer mode, processed in chunks of `batch` samples.
std::vector<int> predict(CvnnModel& model, std::span<const rfdata::Spectrogram* const> samples, int batch = 64);

std::string metrics_csv(const TrainResult& result);

std::vector<std::uint8_t> model_encode(CvnnModel& model);
CvnnModel model_decode(std::span<const std::uint8_t> bytes);
/// Decodes and checks every parameter shape against `expected`; a mismatch
/// raises FormatError(Shape) naming the offending layer.
CvnnModel model_decode(std::span<const std::uint8_t> bytes, const ModelConfig& expected);

void save_model(CvnnModel& model, const std::filesystem::path& path);
CvnnModel load_model(const std::filesystem::path& path);
CvnnModel load_model(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace exitrf::cvnn
