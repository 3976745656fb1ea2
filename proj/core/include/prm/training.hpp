#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "prm/baseline.hpp"
#include "prm/data.hpp"
#include "prm/params.hpp"
#include "prm/pretrain.hpp"
#include "prm/prm_model.hpp"

namespace prm {

/// Warmup-then-decay schedule:
/// lr = d^(-0.5) * min(step^(-0.5), step * warmup^(-1.5)).
/// Continuous in step and peaks exactly at step == warmup. step >= 1.
double lr_at(long step, int d, long warmup);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-9;
};

/// Adam with bias correction. Moments are kept per tensor name; the step
/// counter advances once per step() call.
class Adam {
public:
    explicit Adam(AdamConfig config = {});

    /// In-place update of every bound tensor from its node's gradient.
    /// Throws TrainError naming the tensor and step on non-finite gradients.
    void step(std::span<const BoundTensor> bound, double lr);

    long steps() const { return step_; }

private:
    struct Moments {
        Tensor2 m;
        Tensor2 v;
    };
    AdamConfig config_;
    std::map<std::string, Moments> state_;
    long step_ = 0;
};

struct TrainConfig {
    int batch_size = 256;
    long max_steps = 1000;
    long warmup_steps = 4000;
    double lr_scale = 1.0;
    /// > 0 bypasses the schedule with a constant rate.
    double fixed_lr = 0.0;
    std::uint64_t seed = 0;
    /// Early stopping on validation MAP@n_max: stop after this many epochs
    /// without improvement. Only applies when a validation set is given.
    int patience = 5;
    bool mean_per_request = false;
    /// Global L2-norm clip over all gradients; 0 disables. When the total
    /// norm exceeds the threshold every gradient is scaled by
    /// threshold / norm.
    double grad_clip = 0.0;
    /// Invoke the checkpoint hook every this many steps (0 = never).
    long checkpoint_interval = 0;

    void validate() const;
};

struct TrainResult {
    std::vector<std::string> log_lines;  // JSON lines, reproducible bytes
    long steps_run = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double best_val_map = -1.0;  // -1 when no validation ran
};

using CheckpointHook = std::function<void(long step)>;

/// Minimizes the listwise loss over the train set; keeps the
/// best-validation parameters when a validation set is given.
TrainResult train_prm(PrmParams& params, const std::vector<RerankRecord>& train,
                      const std::vector<RerankRecord>* validation, const PvTable* pv,
                      const TrainConfig& config, const CheckpointHook& hook = nullptr);

/// Minimizes the pointwise cross entropy of the personalization network.
TrainResult train_pretrain(PretrainParams& params, const std::vector<PretrainRecord>& records,
                           const TrainConfig& config, const CheckpointHook& hook = nullptr);

/// Pointwise cross entropy over (item features, label) pairs pooled from
/// the records; the baseline never sees users or list context.
TrainResult train_baseline(BaselineParams& params, const std::vector<RerankRecord>& records,
                           const TrainConfig& config, const CheckpointHook& hook = nullptr);

}  // namespace prm
