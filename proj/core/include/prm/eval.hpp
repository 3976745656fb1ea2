#pragma once

#include <map>
#include <string>
#include <vector>

#include "prm/data.hpp"
#include "prm/pretrain.hpp"
#include "prm/prm_model.hpp"

namespace prm {

struct RankingMetrics {
    std::map<int, double> precision_at;
    std::map<int, double> map_at;
    long num_requests = 0;
};

/// Labels in system-ranked order, one vector per request. Positions beyond
/// a list's length count as unclicked.
using RankedLabels = std::vector<std::vector<int>>;

/// Mean over requests of (# clicks in top k) / k.
double precision_at_k(const RankedLabels& ranked, int k);

/// Mean over requests of sum_{i<=k} Precision@i * click_i / k. Divides by
/// the cutoff k itself, which is how this codebase defines MAP@k everywhere
/// (see conventional_map_at_k for the usual normalization).
double map_at_k(const RankedLabels& ranked, int k);

/// Standard MAP@k: per request, divide by the number of clicks in the top k
/// (0 when there are none) instead of by k. For external comparison only.
double conventional_map_at_k(const RankedLabels& ranked, int k);

RankingMetrics compute_metrics(const RankedLabels& ranked, const std::vector<int>& ks);

/// {"precision": {"5": ...}, "map": {"5": ...}, "num_requests": n}
std::string metrics_to_json(const RankingMetrics& metrics);
RankingMetrics metrics_from_json(const std::string& text);

struct EvalRun {
    RankingMetrics metrics;
    std::vector<ScoredList> scored;  // per request, record order
};

/// Deterministic scoring of every record (training = false), then metrics
/// at the given cutoffs over the re-ranked label order.
EvalRun evaluate_run(PrmParams& params, const std::vector<RerankRecord>& records,
                     const PvTable* pv, const std::vector<int>& ks);

/// Apply a ScoredList's re-ranked order to its record's labels.
std::vector<int> ranked_labels_for(const RerankRecord& record, const ScoredList& scored);

enum class AttentionGrouping { category, price_level, position };

struct AttentionAggregate {
    AttentionGrouping grouping;
    std::vector<std::string> labels;  // group labels, query side == key side
    Tensor2 mean;                     // [G x G]; 0 where count is 0
    Tensor2 counts;                   // [G x G] sample counts per cell
};

/// Mean attention weight from items in group g to items in group g',
/// averaged over the whole record set. `block` = -1 picks the last block;
/// `head` = -1 averages heads.
AttentionAggregate export_attention(PrmParams& params,
                                    const std::vector<RerankRecord>& records,
                                    const PvTable* pv, AttentionGrouping grouping,
                                    const DatasetManifest& manifest, int block = -1,
                                    int head = -1);

/// Header row of group labels, one row per query group, six decimals.
/// Cells with zero samples stay empty.
std::string attention_to_csv(const AttentionAggregate& aggregate);

}  // namespace prm
