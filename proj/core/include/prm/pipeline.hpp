#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prm/baseline.hpp"
#include "prm/data.hpp"
#include "prm/eval.hpp"
#include "prm/pretrain.hpp"
#include "prm/prm_model.hpp"
#include "prm/training.hpp"

namespace prm {

/// Flat key -> rendered-value map recorded in provenance files.
using ConfigDump = std::map<std::string, std::string>;

/// Writes <artifact>.provenance.json: stage name, seed, resolved config,
/// and the SHA-256 of every input, so a run can be reproduced from the
/// record alone.
void write_provenance(const std::filesystem::path& artifact, const std::string& stage,
                      const std::vector<std::filesystem::path>& inputs,
                      const ConfigDump& config, std::uint64_t seed);

/// Throws DependencyError naming the stage to run first.
void require_artifact(const std::filesystem::path& path, const std::string& stage,
                      const std::string& upstream_stage);

// Each stage reads file inputs, writes its artifact plus a provenance
// record, and returns the artifact paths.

std::vector<std::filesystem::path> run_synth(const SynthSpec& spec, std::uint64_t seed,
                                             const std::filesystem::path& out_dir);

std::filesystem::path run_convert_letor(const std::filesystem::path& graded_path, double t_b,
                                        double eta, std::uint64_t seed,
                                        const std::filesystem::path& out_path);

std::filesystem::path run_train_baseline(const std::filesystem::path& train_path,
                                         const std::vector<int>& hidden,
                                         const TrainConfig& config,
                                         const std::filesystem::path& out_checkpoint);

std::filesystem::path run_build_lists(const std::filesystem::path& candidates_path,
                                      const std::filesystem::path& baseline_checkpoint,
                                      int n_max, const std::filesystem::path& out_path);

std::filesystem::path run_pretrain(const std::filesystem::path& pretrain_path, int d_emb,
                                   const std::vector<int>& hidden, const TrainConfig& config,
                                   const std::filesystem::path& out_checkpoint);

std::filesystem::path run_extract_pv(const std::filesystem::path& rerank_path,
                                     const std::filesystem::path& pretrain_checkpoint,
                                     const std::filesystem::path& out_path);

struct TrainPrmArtifacts {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
};

/// `model` carries the architecture choice; d_feature, n_max, and d_pv are
/// resolved from the manifest and the PV table.
TrainPrmArtifacts run_train_prm(const std::filesystem::path& train_path,
                                const std::optional<std::filesystem::path>& val_path,
                                const std::optional<std::filesystem::path>& pv_path,
                                PrmConfig model, const TrainConfig& config,
                                const std::filesystem::path& out_checkpoint,
                                const std::filesystem::path& out_log);

struct EvalArtifacts {
    std::filesystem::path metrics;
    std::filesystem::path scores;
    RankingMetrics computed;
};

EvalArtifacts run_eval(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& rerank_path,
                       const std::optional<std::filesystem::path>& pv_path,
                       std::vector<int> ks, const std::filesystem::path& out_metrics,
                       const std::filesystem::path& out_scores);

/// Metrics of the initial list order itself (the identity re-ranker).
EvalArtifacts run_eval_initial(const std::filesystem::path& rerank_path, std::vector<int> ks,
                               const std::filesystem::path& out_metrics);

std::filesystem::path run_export_attention(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& rerank_path,
                                           const std::optional<std::filesystem::path>& pv_path,
                                           AttentionGrouping grouping, int block, int head,
                                           const std::filesystem::path& out_csv);

}  // namespace prm
