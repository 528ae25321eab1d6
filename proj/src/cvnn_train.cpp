#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "exitrf/common.hpp"
#include "exitrf/cvnn.hpp"

namespace exitrf::cvnn {

void adam_step(std::span<Param* const> params, AdamState& state, const AdamConfig& cfg) {
    if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("adam: learning_rate must be > 0");
    if (state.m.size() != params.size()) {
        state.m.clear();
        state.v.clear();
        for (const Param* p : params) {
            state.m.emplace_back(p->size(), 0.0);
            state.v.emplace_back(p->size(), 0.0);
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        if (state.m[i].size() != p.size()) throw std::invalid_argument("adam: state shape mismatch for " + p.name);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double g = p.grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p.value[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

ComplexTensor to_tensor(std::span<const rfdata::Spectrogram* const> samples) {
    if (samples.empty()) throw std::invalid_argument("to_tensor: empty batch");
    const int F = samples.front()->freq_bins;
    const int T = samples.front()->hops;
    ComplexTensor x({static_cast<int>(samples.size()), 1, F, T});
    const std::size_t plane = static_cast<std::size_t>(F) * T;
    for (std::size_t n = 0; n < samples.size(); ++n) {
        const auto& s = *samples[n];
        if (s.freq_bins != F || s.hops != T) throw std::invalid_argument("to_tensor: ragged batch");
        std::copy_n(s.data.begin(), plane, x.re.begin() + static_cast<std::ptrdiff_t>(n * plane));
        std::copy_n(s.data.begin() + static_cast<std::ptrdiff_t>(plane), plane,
                    x.im.begin() + static_cast<std::ptrdiff_t>(n * plane));
    }
    return x;
}

ComplexTensor to_tensor(const rfdata::Spectrogram& sample) {
    const rfdata::Spectrogram* p = &sample;
    return to_tensor(std::span(&p, 1));
}

namespace {

int argmax_row(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct Snapshot {
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> buffers;
};

Snapshot take(CvnnModel& m) {
    Snapshot s;
    for (Param* p : m.params()) s.params.push_back(p->value);
    for (auto& [name, b] : m.buffers()) s.buffers.push_back(*b);
    return s;
}

void restore(CvnnModel& m, const Snapshot& s) {
    auto ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s.params[i];
    auto bs = m.buffers();
    for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].second = s.buffers[i];
}

}  // namespace

std::vector<int> predict(CvnnModel& model, std::span<const rfdata::Spectrogram* const> samples, int batch) {
    std::vector<int> out;
    out.reserve(samples.size());
    const int N = model.config().num_classes;
    for (std::size_t i = 0; i < samples.size(); i += static_cast<std::size_t>(batch)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch), samples.size() - i);
        const auto logits = model.forward(to_tensor(samples.subspan(i, n)), Mode::Infer, false).logits;
        for (std::size_t k = 0; k < n; ++k) {
            out.push_back(argmax_row(std::span(logits).subspan(k * N, static_cast<std::size_t>(N))));
        }
    }
    return out;
}

TrainResult train_backbone(CvnnModel& model, std::span<const rfdata::Spectrogram* const> train,
                           std::span<const rfdata::Spectrogram* const> val, const TrainConfig& cfg,
                           const std::function<void(const EpochMetrics&)>& on_epoch) {
    if (cfg.epochs < 0 || cfg.batch_size < 2) throw std::invalid_argument("train: epochs >= 0 and batch_size >= 2");
    if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (train.empty()) throw std::invalid_argument("train: empty training split");
    TrainResult result;
    if (cfg.epochs == 0) return result;

    const int N = model.config().num_classes;
    const AdamConfig adam{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
    AdamState state;
    auto params = model.params();
    Snapshot best;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 0x545241494eu, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::size_t n = std::min(bs, order.size() - start);
            // A trailing singleton batch cannot be batch-normalized; fold it away.
            if (n < 2) break;
            std::vector<const rfdata::Spectrogram*> batch;
            std::vector<int> labels;
            for (std::size_t k = 0; k < n; ++k) {
                batch.push_back(train[order[start + k]]);
                labels.push_back(train[order[start + k]]->label);
            }
            const LossAndGrad lg = compute_gradients(model, to_tensor(batch), labels);
            if (!std::isfinite(lg.loss)) {
                throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch starting " +
                                         std::to_string(start));
            }
            adam_step(params, state, adam);
            loss_sum += lg.loss * static_cast<double>(n);
            for (std::size_t k = 0; k < n; ++k) {
                correct += argmax_row(std::span(lg.logits).subspan(k * N, static_cast<std::size_t>(N))) == labels[k];
            }
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_sum / static_cast<double>(order.size());
        em.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
        if (!std::isfinite(em.train_loss)) {
            throw std::runtime_error("training diverged at epoch " + std::to_string(epoch));
        }
        if (!val.empty()) {
            const auto pred = predict(model, val);
            std::size_t ok = 0;
            for (std::size_t k = 0; k < val.size(); ++k) ok += pred[k] == val[k]->label;
            em.val_accuracy = static_cast<double>(ok) / static_cast<double>(val.size());
        }
        result.epochs.push_back(em);
        if (on_epoch) on_epoch(em);
        if (val.empty() || result.best_epoch < 0 || em.val_accuracy >= result.best_val_accuracy) {
            result.best_epoch = epoch;
            result.best_val_accuracy = em.val_accuracy;
            best = take(model);
        }
    }
    restore(model, best);
    return result;
}

std::string metrics_csv(const TrainResult& r) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,train_accuracy,val_accuracy\n";
    for (const auto& e : r.epochs) {
        os << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.val_accuracy << '\n';
    }
    return os.str();
}

}  // namespace exitrf::cvnn
