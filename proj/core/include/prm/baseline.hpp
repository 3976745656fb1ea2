#pragma once

#include <filesystem>
#include <vector>

#include "prm/autodiff.hpp"
#include "prm/data.hpp"
#include "prm/params.hpp"

namespace prm {

class Rng;

struct BaselineConfig {
    int d_feature = 0;
    std::vector<int> hidden = {64, 32};
    void validate() const;
};

/// Pointwise feed-forward ranker over item features alone. Deliberately
/// blind to the user and to the rest of the list: it is the global scoring
/// function the re-ranker is measured against.
struct BaselineParams {
    BaselineConfig config;
    std::vector<Tensor2> hidden_w;
    std::vector<Tensor2> hidden_b;
    Tensor2 out_w;
    Tensor2 out_b;

    static BaselineParams init(const BaselineConfig& config, Rng& rng);
    std::vector<ParamRef> refs();
};

struct BaselineBound {
    std::vector<Node*> hidden_w;
    std::vector<Node*> hidden_b;
    Node* out_w;
    Node* out_b;
    std::vector<BoundTensor> all;

    static BaselineBound bind(Tape& tape, BaselineParams& params);
};

/// Logits for a batch of feature rows: [B x d_feature] -> [B x 1].
Node* baseline_forward(Tape& tape, Node* features, const BaselineBound& bound);

/// Scalar score for one item; higher ranks earlier.
double baseline_score(BaselineParams& params, const std::vector<double>& features);

/// Sort each candidate set by descending score (stable: ties keep candidate
/// order), truncate to n_max, and emit rerank records. Requests with no
/// candidates are skipped and counted.
std::vector<RerankRecord> build_initial_lists(const std::vector<RerankRecord>& candidates,
                                              BaselineParams& params, int n_max,
                                              long* skipped_out = nullptr);

void save_baseline_checkpoint(const std::filesystem::path& path, const BaselineParams& params);
BaselineParams load_baseline_checkpoint(const std::filesystem::path& path);

}  // namespace prm
