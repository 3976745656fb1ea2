#include "prm/baseline.hpp"

#include <algorithm>
#include <numeric>

#include "checkpoint_io.hpp"
#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/log.hpp"
#include "prm/rng.hpp"

namespace prm {

using detail::json;

void BaselineConfig::validate() const {
    if (d_feature < 1) {
        throw ConfigError("baseline: d_feature must be >= 1");
    }
    for (int w : hidden) {
        if (w < 1) {
            throw ConfigError("baseline: hidden widths must be >= 1");
        }
    }
}

BaselineParams BaselineParams::init(const BaselineConfig& config, Rng& rng) {
    config.validate();
    BaselineParams p;
    p.config = config;
    int in_width = config.d_feature;
    for (int width : config.hidden) {
        p.hidden_w.push_back(Tensor2::glorot_uniform(in_width, width, rng));
        p.hidden_b.push_back(Tensor2::zeros(1, width));
        in_width = width;
    }
    p.out_w = Tensor2::glorot_uniform(in_width, 1, rng);
    p.out_b = Tensor2::zeros(1, 1);
    return p;
}

std::vector<ParamRef> BaselineParams::refs() {
    std::vector<ParamRef> r;
    for (std::size_t i = 0; i < hidden_w.size(); ++i) {
        r.push_back({"h" + std::to_string(i) + ".w", &hidden_w[i]});
        r.push_back({"h" + std::to_string(i) + ".b", &hidden_b[i]});
    }
    r.push_back({"out.w", &out_w});
    r.push_back({"out.b", &out_b});
    return r;
}

BaselineBound BaselineBound::bind(Tape& tape, BaselineParams& params) {
    BaselineBound b;
    b.all = bind_params(tape, params.refs());
    std::size_t i = 0;
    for (std::size_t h = 0; h < params.hidden_w.size(); ++h) {
        b.hidden_w.push_back(b.all[i++].node);
        b.hidden_b.push_back(b.all[i++].node);
    }
    b.out_w = b.all[i++].node;
    b.out_b = b.all[i++].node;
    return b;
}

Node* baseline_forward(Tape& tape, Node* features, const BaselineBound& bound) {
    Node* x = features;
    for (std::size_t layer = 0; layer < bound.hidden_w.size(); ++layer) {
        x = tape.relu(tape.add_row(tape.matmul(x, bound.hidden_w[layer]),
                                   bound.hidden_b[layer]));
    }
    return tape.add_row(tape.matmul(x, bound.out_w), bound.out_b);
}

double baseline_score(BaselineParams& params, const std::vector<double>& features) {
    if (static_cast<int>(features.size()) != params.config.d_feature) {
        throw ConfigError("baseline_score: feature length " + std::to_string(features.size()) +
                          " does not match d_feature=" +
                          std::to_string(params.config.d_feature));
    }
    Tape tape;
    BaselineBound bound = BaselineBound::bind(tape, params);
    Node* row = tape.constant(Tensor2(1, params.config.d_feature, std::vector<double>(features)));
    return baseline_forward(tape, row, bound)->value.at(0, 0);
}

std::vector<RerankRecord> build_initial_lists(const std::vector<RerankRecord>& candidates,
                                              BaselineParams& params, int n_max,
                                              long* skipped_out) {
    long skipped = 0;
    std::vector<RerankRecord> out;
    out.reserve(candidates.size());
    for (const RerankRecord& request : candidates) {
        if (request.items.empty()) {
            ++skipped;
            log_info("build_initial_lists: request '" + request.request_id +
                     "' has no candidates, skipped");
            continue;
        }
        // Score the whole candidate set in one forward pass.
        const int n = static_cast<int>(request.items.size());
        Tensor2 features(n, params.config.d_feature);
        for (int i = 0; i < n; ++i) {
            const ItemEntry& item = request.items[static_cast<std::size_t>(i)];
            if (static_cast<int>(item.features.size()) != params.config.d_feature) {
                throw ConfigError("build_initial_lists: item '" + item.item_id + "' has " +
                                  std::to_string(item.features.size()) +
                                  " features, model expects " +
                                  std::to_string(params.config.d_feature));
            }
            for (int j = 0; j < params.config.d_feature; ++j) {
                features.at(i, j) = item.features[static_cast<std::size_t>(j)];
            }
        }
        Tape tape;
        BaselineBound bound = BaselineBound::bind(tape, params);
        Node* logits = baseline_forward(tape, tape.constant(std::move(features)), bound);

        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return logits->value.at(a, 0) > logits->value.at(b, 0);
        });
        if (n > n_max) {
            order.resize(static_cast<std::size_t>(n_max));
        }

        RerankRecord ranked;
        ranked.request_id = request.request_id;
        ranked.user = request.user;
        ranked.history = request.history;
        for (int idx : order) {
            ranked.items.push_back(request.items[static_cast<std::size_t>(idx)]);
        }
        out.push_back(std::move(ranked));
    }
    if (skipped_out != nullptr) {
        *skipped_out = skipped;
    }
    return out;
}

namespace {

json baseline_config_to_json(const BaselineConfig& c) {
    return json{{"d_feature", c.d_feature}, {"hidden", c.hidden}};
}

BaselineConfig baseline_config_from_json(const json& j) {
    BaselineConfig c;
    c.d_feature = j.at("d_feature").get<int>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    return c;
}

}  // namespace

void save_baseline_checkpoint(const std::filesystem::path& path,
                              const BaselineParams& params) {
    BaselineParams& mutable_params = const_cast<BaselineParams&>(params);
    detail::save_checkpoint_file(path, "baseline", baseline_config_to_json(params.config),
                                 mutable_params.refs());
}

BaselineParams load_baseline_checkpoint(const std::filesystem::path& path) {
    const json doc = detail::load_checkpoint_file(path, "baseline");
    BaselineConfig config = baseline_config_from_json(doc.at("config"));
    Rng rng(0);
    BaselineParams params = BaselineParams::init(config, rng);
    detail::restore_tensors(doc, params.refs());
    return params;
}

}  // namespace prm
