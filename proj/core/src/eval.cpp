#include "prm/eval.hpp"

#include <cstdio>
#include <sstream>

#include "json_io.hpp"
#include "prm/errors.hpp"

namespace prm {

using detail::json;

namespace {

void check_metric_inputs(const RankedLabels& ranked, int k) {
    if (ranked.empty()) {
        throw Error("metric undefined over an empty request set");
    }
    if (k < 1) {
        throw ConfigError("metric cutoff k must be >= 1, got " + std::to_string(k));
    }
}

}  // namespace

double precision_at_k(const RankedLabels& ranked, int k) {
    check_metric_inputs(ranked, k);
    double total = 0.0;
    for (const std::vector<int>& labels : ranked) {
        int clicks = 0;
        for (int i = 0; i < k && i < static_cast<int>(labels.size()); ++i) {
            clicks += labels[static_cast<std::size_t>(i)] != 0 ? 1 : 0;
        }
        total += static_cast<double>(clicks) / static_cast<double>(k);
    }
    return total / static_cast<double>(ranked.size());
}

double map_at_k(const RankedLabels& ranked, int k) {
    check_metric_inputs(ranked, k);
    double total = 0.0;
    for (const std::vector<int>& labels : ranked) {
        int clicks = 0;
        double acc = 0.0;
        for (int i = 1; i <= k && i <= static_cast<int>(labels.size()); ++i) {
            if (labels[static_cast<std::size_t>(i - 1)] != 0) {
                ++clicks;
                acc += static_cast<double>(clicks) / static_cast<double>(i);
            }
        }
        total += acc / static_cast<double>(k);
    }
    return total / static_cast<double>(ranked.size());
}

double conventional_map_at_k(const RankedLabels& ranked, int k) {
    check_metric_inputs(ranked, k);
    double total = 0.0;
    for (const std::vector<int>& labels : ranked) {
        int clicks = 0;
        double acc = 0.0;
        for (int i = 1; i <= k && i <= static_cast<int>(labels.size()); ++i) {
            if (labels[static_cast<std::size_t>(i - 1)] != 0) {
                ++clicks;
                acc += static_cast<double>(clicks) / static_cast<double>(i);
            }
        }
        total += clicks > 0 ? acc / static_cast<double>(clicks) : 0.0;
    }
    return total / static_cast<double>(ranked.size());
}

RankingMetrics compute_metrics(const RankedLabels& ranked, const std::vector<int>& ks) {
    RankingMetrics m;
    m.num_requests = static_cast<long>(ranked.size());
    for (int k : ks) {
        m.precision_at[k] = precision_at_k(ranked, k);
        m.map_at[k] = map_at_k(ranked, k);
    }
    return m;
}

std::string metrics_to_json(const RankingMetrics& metrics) {
    json precision = json::object();
    json map = json::object();
    for (const auto& [k, v] : metrics.precision_at) {
        precision[std::to_string(k)] = v;
    }
    for (const auto& [k, v] : metrics.map_at) {
        map[std::to_string(k)] = v;
    }
    return json{{"precision", std::move(precision)},
                {"map", std::move(map)},
                {"num_requests", metrics.num_requests}}
        .dump();
}

RankingMetrics metrics_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        RankingMetrics m;
        m.num_requests = j.at("num_requests").get<long>();
        for (const auto& [k, v] : j.at("precision").items()) {
            m.precision_at[std::stoi(k)] = v.get<double>();
        }
        for (const auto& [k, v] : j.at("map").items()) {
            m.map_at[std::stoi(k)] = v.get<double>();
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError(std::string("metrics: ") + e.what());
    }
}

std::vector<int> ranked_labels_for(const RerankRecord& record, const ScoredList& scored) {
    std::vector<int> out;
    out.reserve(scored.order.size());
    for (int idx : scored.order) {
        out.push_back(record.items[static_cast<std::size_t>(idx)].label);
    }
    return out;
}

namespace {

// One deterministic eval-mode forward for a whole record.
PrmForwardResult forward_record(Tape& tape, const PrmBound& bound, PrmParams& params,
                                const RerankRecord& record, const PvTable* pv) {
    const PrmConfig& cfg = params.config;
    const int n = static_cast<int>(record.items.size());
    Tensor2 features(n, cfg.d_feature);
    Tensor2 pv_block(n, cfg.use_pv ? cfg.d_pv : 0);
    for (int i = 0; i < n; ++i) {
        const ItemEntry& item = record.items[static_cast<std::size_t>(i)];
        if (static_cast<int>(item.features.size()) != cfg.d_feature) {
            throw ConfigError("evaluate: record '" + record.request_id + "' has d_feature=" +
                              std::to_string(item.features.size()) + ", checkpoint expects " +
                              std::to_string(cfg.d_feature));
        }
        for (int j = 0; j < cfg.d_feature; ++j) {
            features.at(i, j) = item.features[static_cast<std::size_t>(j)];
        }
        if (cfg.use_pv) {
            const std::vector<double>& vec = pv->get(record.request_id, item.item_id);
            if (static_cast<int>(vec.size()) != cfg.d_pv) {
                throw ConfigError("evaluate: pv entry for '" + item.item_id + "' has d_pv=" +
                                  std::to_string(vec.size()) + ", checkpoint expects " +
                                  std::to_string(cfg.d_pv));
            }
            for (int j = 0; j < cfg.d_pv; ++j) {
                pv_block.at(i, j) = vec[static_cast<std::size_t>(j)];
            }
        }
    }
    const std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
    return prm_forward(tape, bound, cfg, features, cfg.use_pv ? &pv_block : nullptr, mask,
                       /*training=*/false, 0, 0);
}

}  // namespace

EvalRun evaluate_run(PrmParams& params, const std::vector<RerankRecord>& records,
                     const PvTable* pv, const std::vector<int>& ks) {
    if (params.config.use_pv && pv == nullptr) {
        throw ConfigError("evaluate: checkpoint uses PV but no PV table given");
    }
    EvalRun run;
    RankedLabels ranked;
    for (const RerankRecord& record : records) {
        Tape tape;
        PrmBound bound = PrmBound::bind(tape, params);
        PrmForwardResult fwd = forward_record(tape, bound, params, record, pv);
        const std::vector<std::uint8_t> mask(record.items.size(), 1);
        ScoredList scored = make_scored_list(record.request_id, fwd.scores->value, mask);
        ranked.push_back(ranked_labels_for(record, scored));
        run.scored.push_back(std::move(scored));
    }
    run.metrics = compute_metrics(ranked, ks);
    return run;
}

namespace {

int group_count(AttentionGrouping grouping, const DatasetManifest& manifest) {
    switch (grouping) {
        case AttentionGrouping::category:
            return manifest.category_vocab;
        case AttentionGrouping::price_level:
            return manifest.price_vocab;
        case AttentionGrouping::position:
            return manifest.n_max;
    }
    throw ConfigError("unknown attention grouping");
}

int group_of(AttentionGrouping grouping, const ItemEntry& item, int position) {
    switch (grouping) {
        case AttentionGrouping::category:
            return item.category;
        case AttentionGrouping::price_level:
            return item.price_level - 1;
        case AttentionGrouping::position:
            return position;
    }
    throw ConfigError("unknown attention grouping");
}

std::string group_label(AttentionGrouping grouping, int index) {
    // price levels and positions are 1-based in the data
    return grouping == AttentionGrouping::category ? std::to_string(index)
                                                   : std::to_string(index + 1);
}

}  // namespace

AttentionAggregate export_attention(PrmParams& params,
                                    const std::vector<RerankRecord>& records,
                                    const PvTable* pv, AttentionGrouping grouping,
                                    const DatasetManifest& manifest, int block, int head) {
    const PrmConfig& cfg = params.config;
    if (cfg.use_pv && pv == nullptr) {
        throw ConfigError("export_attention: checkpoint uses PV but no PV table given");
    }
    const int resolved_block = block < 0 ? cfg.num_blocks - 1 : block;
    if (resolved_block >= cfg.num_blocks) {
        throw ConfigError("export_attention: block " + std::to_string(block) +
                          " out of range, model has " + std::to_string(cfg.num_blocks));
    }
    if (head >= cfg.num_heads) {
        throw ConfigError("export_attention: head " + std::to_string(head) +
                          " out of range, model has " + std::to_string(cfg.num_heads));
    }

    const int g = group_count(grouping, manifest);
    AttentionAggregate agg;
    agg.grouping = grouping;
    agg.mean = Tensor2::zeros(g, g);
    agg.counts = Tensor2::zeros(g, g);
    for (int i = 0; i < g; ++i) {
        agg.labels.push_back(group_label(grouping, i));
    }

    for (const RerankRecord& record : records) {
        Tape tape;
        PrmBound bound = PrmBound::bind(tape, params);
        PrmForwardResult fwd = forward_record(tape, bound, params, record, pv);
        const auto& heads = fwd.attention[static_cast<std::size_t>(resolved_block)];
        const int n = static_cast<int>(record.items.size());
        // Accumulate either one head or the mean over heads.
        for (int qi = 0; qi < n; ++qi) {
            const int qg = group_of(grouping, record.items[static_cast<std::size_t>(qi)], qi);
            for (int kj = 0; kj < n; ++kj) {
                const int kg =
                    group_of(grouping, record.items[static_cast<std::size_t>(kj)], kj);
                double w = 0.0;
                if (head < 0) {
                    for (const Node* hw : heads) {
                        w += hw->value.at(qi, kj);
                    }
                    w /= static_cast<double>(heads.size());
                } else {
                    w = heads[static_cast<std::size_t>(head)]->value.at(qi, kj);
                }
                agg.mean.at(qg, kg) += w;
                agg.counts.at(qg, kg) += 1.0;
            }
        }
    }

    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            if (agg.counts.at(i, j) > 0.0) {
                agg.mean.at(i, j) /= agg.counts.at(i, j);
            }
        }
    }
    return agg;
}

std::string attention_to_csv(const AttentionAggregate& aggregate) {
    std::ostringstream out;
    out << "group";
    for (const std::string& label : aggregate.labels) {
        out << "," << label;
    }
    out << "\n";
    char cell[32];
    for (int i = 0; i < aggregate.mean.rows; ++i) {
        out << aggregate.labels[static_cast<std::size_t>(i)];
        for (int j = 0; j < aggregate.mean.cols; ++j) {
            out << ",";
            if (aggregate.counts.at(i, j) > 0.0) {
                std::snprintf(cell, sizeof(cell), "%.6f", aggregate.mean.at(i, j));
                out << cell;
            }
            // empty cell marks a group pair with no samples
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace prm
