#include "prm/training.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "prm/errors.hpp"
#include "prm/eval.hpp"
#include "prm/log.hpp"

namespace prm {

using json = nlohmann::json;

double lr_at(long step, int d, long warmup) {
    if (step < 1) {
        throw ConfigError("lr_at: step must be >= 1, got " + std::to_string(step));
    }
    if (d < 1 || warmup < 1) {
        throw ConfigError("lr_at: d and warmup must be >= 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return std::pow(static_cast<double>(d), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

Adam::Adam(AdamConfig config) : config_(config) {}

void Adam::step(std::span<const BoundTensor> bound, double lr) {
    ++step_;
    // Bias-corrected step size, applied uniformly across tensors.
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (const BoundTensor& b : bound) {
        const Tensor2& g = b.node->grad;
        if (!g.all_finite()) {
            throw TrainError("non-finite gradient in tensor '" + b.name + "' at step " +
                             std::to_string(step_));
        }
        auto [it, inserted] = state_.try_emplace(b.name);
        if (inserted) {
            it->second.m = Tensor2::zeros(g.rows, g.cols);
            it->second.v = Tensor2::zeros(g.rows, g.cols);
        }
        Moments& mom = it->second;
        if (!mom.m.same_shape(g)) {
            throw TrainError("gradient shape " + g.shape_str() + " for tensor '" + b.name +
                             "' does not match optimizer state " + mom.m.shape_str());
        }
        Tensor2& target = *b.tensor;
        for (int i = 0; i < g.size(); ++i) {
            const double grad = g.data[i];
            mom.m.data[i] = config_.beta1 * mom.m.data[i] + (1.0 - config_.beta1) * grad;
            mom.v.data[i] = config_.beta2 * mom.v.data[i] + (1.0 - config_.beta2) * grad * grad;
            const double m_hat = mom.m.data[i] / bc1;
            const double v_hat = mom.v.data[i] / bc2;
            target.data[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
        }
    }
}

void TrainConfig::validate() const {
    if (batch_size < 1) {
        throw ConfigError("train: batch_size must be >= 1");
    }
    if (max_steps < 0) {
        throw ConfigError("train: max_steps must be >= 0");
    }
    if (warmup_steps < 1) {
        throw ConfigError("train: warmup_steps must be >= 1");
    }
    if (patience < 1) {
        throw ConfigError("train: patience must be >= 1");
    }
    if (grad_clip < 0.0 || fixed_lr < 0.0 || lr_scale <= 0.0) {
        throw ConfigError("train: grad_clip/fixed_lr must be >= 0 and lr_scale > 0");
    }
}

namespace {

double resolve_lr(const TrainConfig& config, int d, long step) {
    if (config.fixed_lr > 0.0) {
        return config.fixed_lr;
    }
    return config.lr_scale * lr_at(step, d, config.warmup_steps);
}

void clip_gradients(std::span<const BoundTensor> bound, double threshold) {
    if (threshold <= 0.0) {
        return;
    }
    double sq = 0.0;
    for (const BoundTensor& b : bound) {
        for (double g : b.node->grad.data) {
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm <= threshold) {
        return;
    }
    const double scale = threshold / norm;
    for (const BoundTensor& b : bound) {
        for (double& g : b.node->grad.data) {
            g *= scale;
        }
    }
}

std::string step_line(long step, double lr, double loss) {
    return json{{"step", step}, {"lr", lr}, {"loss", loss}}.dump();
}

std::string epoch_line(long epoch, double val_map, double val_p5) {
    return json{{"epoch", epoch}, {"val_map", val_map}, {"val_p5", val_p5}}.dump();
}

struct Snapshot {
    std::vector<Tensor2> tensors;

    static Snapshot take(const std::vector<ParamRef>& refs) {
        Snapshot s;
        s.tensors.reserve(refs.size());
        for (const ParamRef& r : refs) {
            s.tensors.push_back(*r.tensor);
        }
        return s;
    }

    void restore(const std::vector<ParamRef>& refs) const {
        for (std::size_t i = 0; i < refs.size(); ++i) {
            *refs[i].tensor = tensors[i];
        }
    }
};

}  // namespace

TrainResult train_prm(PrmParams& params, const std::vector<RerankRecord>& train,
                      const std::vector<RerankRecord>* validation, const PvTable* pv,
                      const TrainConfig& config, const CheckpointHook& hook) {
    config.validate();
    params.config.validate();
    if (train.empty()) {
        throw ConfigError("train_prm: empty training set");
    }
    if (params.config.use_pv && pv == nullptr) {
        throw ConfigError("train_prm: config.use_pv is set but no PV table given");
    }
    // Fail on any dimension mismatch before step 1.
    auto check_records = [&](const std::vector<RerankRecord>& records, const char* which) {
        for (const RerankRecord& r : records) {
            if (static_cast<int>(r.items.size()) > params.config.n_max) {
                throw ConfigError(std::string("train_prm: ") + which + " record '" +
                                  r.request_id + "' exceeds n_max");
            }
            for (const ItemEntry& item : r.items) {
                if (static_cast<int>(item.features.size()) != params.config.d_feature) {
                    throw ConfigError(std::string("train_prm: ") + which + " record '" +
                                      r.request_id + "' has d_feature=" +
                                      std::to_string(item.features.size()) + ", model expects " +
                                      std::to_string(params.config.d_feature));
                }
                if (params.config.use_pv && !pv->contains(r.request_id, item.item_id)) {
                    throw ConfigError("train_prm: pv table has no entry for request '" +
                                      r.request_id + "', item '" + item.item_id + "'");
                }
            }
        }
    };
    check_records(train, "train");
    if (validation != nullptr) {
        check_records(*validation, "validation");
    }

    TrainResult result;
    Adam adam;
    const std::vector<ParamRef> refs = params.refs();
    Snapshot best = Snapshot::take(refs);
    double best_map = -1.0;
    int epochs_since_best = 0;

    BatchIter batches(train.size(), config.batch_size, config.seed);
    std::vector<std::size_t> batch;
    long step = 0;
    for (std::uint64_t epoch = 0; step < config.max_steps; ++epoch) {
        batches.reset(epoch);
        while (step < config.max_steps && batches.next(batch)) {
            ++step;
            Tape tape;
            PrmBound bound = PrmBound::bind(tape, params);
            std::vector<Node*> rows;
            std::vector<std::vector<int>> labels;
            std::vector<std::vector<std::uint8_t>> masks;
            for (std::size_t idx : batch) {
                const RerankRecord& r = train[idx];
                const int n = static_cast<int>(r.items.size());
                Tensor2 features(n, params.config.d_feature);
                Tensor2 pv_block(n, params.config.use_pv ? params.config.d_pv : 0);
                std::vector<int> y(static_cast<std::size_t>(n));
                for (int i = 0; i < n; ++i) {
                    const ItemEntry& item = r.items[static_cast<std::size_t>(i)];
                    for (int j = 0; j < params.config.d_feature; ++j) {
                        features.at(i, j) = item.features[static_cast<std::size_t>(j)];
                    }
                    if (params.config.use_pv) {
                        const std::vector<double>& vec = pv->get(r.request_id, item.item_id);
                        for (int j = 0; j < params.config.d_pv; ++j) {
                            pv_block.at(i, j) = vec[static_cast<std::size_t>(j)];
                        }
                    }
                    y[static_cast<std::size_t>(i)] = item.label;
                }
                std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
                PrmForwardResult fwd = prm_forward(
                    tape, bound, params.config, features,
                    params.config.use_pv ? &pv_block : nullptr, mask, /*training=*/true,
                    config.seed, static_cast<std::uint64_t>(step));
                rows.push_back(fwd.scores);
                labels.push_back(std::move(y));
                masks.push_back(std::move(mask));
            }
            Node* loss = listwise_loss(tape, rows, labels, masks, config.mean_per_request);
            tape.backward(loss);
            clip_gradients(bound.all, config.grad_clip);
            const double lr = resolve_lr(config, params.config.d, step);
            adam.step(bound.all, lr);

            const double loss_value = loss->value.at(0, 0);
            if (step == 1) {
                result.initial_loss = loss_value;
            }
            result.final_loss = loss_value;
            result.log_lines.push_back(step_line(step, lr, loss_value));
            if (hook && config.checkpoint_interval > 0 &&
                step % config.checkpoint_interval == 0) {
                hook(step);
            }
        }

        if (validation != nullptr && step > 0) {
            const EvalRun run = evaluate_run(params, *validation, pv,
                                             {5, params.config.n_max});
            const double val_map = run.metrics.map_at.at(params.config.n_max);
            const double val_p5 = run.metrics.precision_at.at(5);
            result.log_lines.push_back(epoch_line(static_cast<long>(epoch), val_map, val_p5));
            if (val_map > best_map) {
                best_map = val_map;
                best = Snapshot::take(refs);
                epochs_since_best = 0;
            } else {
                ++epochs_since_best;
                if (epochs_since_best >= config.patience) {
                    log_info("train_prm: early stop after epoch " + std::to_string(epoch));
                    break;
                }
            }
        }
    }

    if (validation != nullptr && best_map >= 0.0) {
        best.restore(refs);
        result.best_val_map = best_map;
    }
    result.steps_run = step;
    return result;
}

TrainResult train_pretrain(PretrainParams& params, const std::vector<PretrainRecord>& records,
                           const TrainConfig& config, const CheckpointHook& hook) {
    config.validate();
    params.config.validate();
    if (records.empty()) {
        throw ConfigError("train_pretrain: empty training set");
    }
    for (const PretrainRecord& r : records) {
        if (static_cast<int>(r.item.features.size()) != params.config.d_feature) {
            throw ConfigError("train_pretrain: item '" + r.item.item_id + "' has d_feature=" +
                              std::to_string(r.item.features.size()) + ", model expects " +
                              std::to_string(params.config.d_feature));
        }
    }

    TrainResult result;
    Adam adam;
    BatchIter batches(records.size(), config.batch_size, config.seed);
    std::vector<std::size_t> batch;
    long step = 0;
    const int lr_width = params.config.d_pv();
    for (std::uint64_t epoch = 0; step < config.max_steps; ++epoch) {
        batches.reset(epoch);
        while (step < config.max_steps && batches.next(batch)) {
            ++step;
            Tape tape;
            PretrainBound bound = PretrainBound::bind(tape, params);
            std::vector<Node*> p_nodes;
            std::vector<int> labels;
            for (std::size_t idx : batch) {
                const PretrainRecord& r = records[idx];
                Node* rep = user_representation(tape, r.user, r.history, bound, params);
                PretrainForward fwd =
                    pretrain_forward(tape, rep, r.item, bound, params, /*training=*/true);
                p_nodes.push_back(fwd.p_click);
                labels.push_back(r.item.label);
            }
            Node* row = p_nodes.size() == 1 ? p_nodes.front() : tape.concat_cols(p_nodes);
            Node* loss = pretrain_loss(tape, row, labels);
            tape.backward(loss);
            clip_gradients(bound.all, config.grad_clip);
            const double lr = resolve_lr(config, lr_width, step);
            adam.step(bound.all, lr);

            const double loss_value = loss->value.at(0, 0);
            if (step == 1) {
                result.initial_loss = loss_value;
            }
            result.final_loss = loss_value;
            result.log_lines.push_back(step_line(step, lr, loss_value));
            if (hook && config.checkpoint_interval > 0 &&
                step % config.checkpoint_interval == 0) {
                hook(step);
            }
        }
    }
    result.steps_run = step;
    return result;
}

TrainResult train_baseline(BaselineParams& params, const std::vector<RerankRecord>& records,
                           const TrainConfig& config, const CheckpointHook& hook) {
    config.validate();
    params.config.validate();
    // Pool every item of every list into pointwise (features, label) examples.
    std::vector<const ItemEntry*> pool;
    for (const RerankRecord& r : records) {
        for (const ItemEntry& item : r.items) {
            if (static_cast<int>(item.features.size()) != params.config.d_feature) {
                throw ConfigError("train_baseline: item '" + item.item_id +
                                  "' has d_feature=" + std::to_string(item.features.size()) +
                                  ", model expects " +
                                  std::to_string(params.config.d_feature));
            }
            pool.push_back(&item);
        }
    }
    if (pool.empty()) {
        throw ConfigError("train_baseline: no items to train on");
    }

    TrainResult result;
    Adam adam;
    BatchIter batches(pool.size(), config.batch_size, config.seed);
    std::vector<std::size_t> batch;
    long step = 0;
    const int lr_width = params.config.hidden.empty() ? params.config.d_feature
                                                      : params.config.hidden.back();
    for (std::uint64_t epoch = 0; step < config.max_steps; ++epoch) {
        batches.reset(epoch);
        while (step < config.max_steps && batches.next(batch)) {
            ++step;
            Tape tape;
            BaselineBound bound = BaselineBound::bind(tape, params);
            const int b = static_cast<int>(batch.size());
            Tensor2 features(b, params.config.d_feature);
            std::vector<int> labels(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) {
                const ItemEntry& item = *pool[batch[static_cast<std::size_t>(i)]];
                for (int j = 0; j < params.config.d_feature; ++j) {
                    features.at(i, j) = item.features[static_cast<std::size_t>(j)];
                }
                labels[static_cast<std::size_t>(i)] = item.label;
            }
            Node* logits = baseline_forward(tape, tape.constant(std::move(features)), bound);
            Node* p_row = tape.sigmoid(tape.transpose(logits));
            Node* loss = pretrain_loss(tape, p_row, labels);
            tape.backward(loss);
            clip_gradients(bound.all, config.grad_clip);
            const double lr = resolve_lr(config, lr_width, step);
            adam.step(bound.all, lr);

            const double loss_value = loss->value.at(0, 0);
            if (step == 1) {
                result.initial_loss = loss_value;
            }
            result.final_loss = loss_value;
            result.log_lines.push_back(step_line(step, lr, loss_value));
            if (hook && config.checkpoint_interval > 0 &&
                step % config.checkpoint_interval == 0) {
                hook(step);
            }
        }
    }
    result.steps_run = step;
    return result;
}

}  // namespace prm
