#include "prm/pipeline.hpp"

#include <sstream>

#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/log.hpp"
#include "prm/rng.hpp"
#include "prm/util.hpp"

namespace prm {

using detail::json;

void write_provenance(const std::filesystem::path& artifact, const std::string& stage,
                      const std::vector<std::filesystem::path>& inputs,
                      const ConfigDump& config, std::uint64_t seed) {
    json input_hashes = json::object();
    for (const std::filesystem::path& p : inputs) {
        input_hashes[p.string()] = sha256_file(p);
    }
    json cfg = json::object();
    for (const auto& [key, value] : config) {
        cfg[key] = value;
    }
    const json doc{{"stage", stage},
                   {"seed", seed},
                   {"config", std::move(cfg)},
                   {"inputs", std::move(input_hashes)},
                   {"artifact", artifact.string()}};
    std::filesystem::path p = artifact;
    p += ".provenance.json";
    write_file(p, doc.dump() + "\n");
}

void require_artifact(const std::filesystem::path& path, const std::string& stage,
                      const std::string& upstream_stage) {
    if (!std::filesystem::exists(path)) {
        throw DependencyError("stage '" + stage + "' needs " + path.string() +
                              "; run stage '" + upstream_stage + "' first");
    }
}

namespace {

std::string fmt(double v) {
    std::ostringstream out;
    out << v;
    return out.str();
}

std::string fmt_ints(const std::vector<int>& values) {
    std::ostringstream out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out << (i > 0 ? "," : "") << values[i];
    }
    return out.str();
}

ConfigDump train_config_dump(const TrainConfig& c) {
    return {{"batch_size", std::to_string(c.batch_size)},
            {"max_steps", std::to_string(c.max_steps)},
            {"warmup_steps", std::to_string(c.warmup_steps)},
            {"lr_scale", fmt(c.lr_scale)},
            {"fixed_lr", fmt(c.fixed_lr)},
            {"patience", std::to_string(c.patience)},
            {"mean_per_request", c.mean_per_request ? "true" : "false"},
            {"grad_clip", fmt(c.grad_clip)}};
}

}  // namespace

std::vector<std::filesystem::path> run_synth(const SynthSpec& spec, std::uint64_t seed,
                                             const std::filesystem::path& out_dir) {
    const SynthDataset dataset = generate_synthetic(spec, seed);
    std::vector<std::filesystem::path> files = write_synth_dataset(out_dir, dataset);
    ConfigDump dump{{"num_train_requests", std::to_string(spec.num_train_requests)},
                    {"num_test_requests", std::to_string(spec.num_test_requests)},
                    {"num_pretrain", std::to_string(spec.num_pretrain)},
                    {"d_cont", std::to_string(spec.d_cont)},
                    {"num_categories", std::to_string(spec.num_categories)},
                    {"num_price_levels", std::to_string(spec.num_price_levels)},
                    {"list_len_min", std::to_string(spec.list_len_min)},
                    {"list_len_max", std::to_string(spec.list_len_max)},
                    {"n_max", std::to_string(spec.n_max)},
                    {"num_users", std::to_string(spec.num_users)},
                    {"num_items", std::to_string(spec.num_items)},
                    {"history_len_max", std::to_string(spec.history_len_max)},
                    {"interaction_scale", fmt(spec.interaction_scale)},
                    {"personalization_scale", fmt(spec.personalization_scale)},
                    {"position_penalty_scale", fmt(spec.position_penalty_scale)},
                    {"view_decay_eta", fmt(spec.view_decay_eta)},
                    {"click_bias", fmt(spec.click_bias)}};
    write_provenance(files.front(), "synth", {}, dump, seed);
    return files;
}

std::filesystem::path run_convert_letor(const std::filesystem::path& graded_path, double t_b,
                                        double eta, std::uint64_t seed,
                                        const std::filesystem::path& out_path) {
    require_artifact(graded_path, "convert-letor", "(external graded data)");
    const std::vector<GradedRecord> graded = parse_graded(graded_path);
    const std::vector<RerankRecord> records = convert_letor(graded, t_b, eta, seed);
    int n_max = DatasetManifest{}.n_max;
    for (const RerankRecord& r : records) {
        n_max = std::max(n_max, static_cast<int>(r.items.size()));
    }
    write_rerank(out_path, records, build_manifest(records, n_max));
    write_provenance(out_path, "convert-letor", {graded_path},
                     {{"t_b", fmt(t_b)}, {"eta", fmt(eta)}}, seed);
    return out_path;
}

std::filesystem::path run_train_baseline(const std::filesystem::path& train_path,
                                         const std::vector<int>& hidden,
                                         const TrainConfig& config,
                                         const std::filesystem::path& out_checkpoint) {
    require_artifact(train_path, "train-baseline", "synth or convert-letor");
    DatasetManifest manifest;
    const std::vector<RerankRecord> records = parse_rerank(train_path, &manifest);
    BaselineConfig model;
    model.d_feature = manifest.d_feature;
    model.hidden = hidden;
    Rng rng(config.seed);
    BaselineParams params = BaselineParams::init(model, rng);
    const TrainResult result = train_baseline(params, records, config);
    save_baseline_checkpoint(out_checkpoint, params);
    ConfigDump dump = train_config_dump(config);
    dump["hidden"] = fmt_ints(hidden);
    dump["steps_run"] = std::to_string(result.steps_run);
    write_provenance(out_checkpoint, "train-baseline", {train_path}, dump, config.seed);
    return out_checkpoint;
}

std::filesystem::path run_build_lists(const std::filesystem::path& candidates_path,
                                      const std::filesystem::path& baseline_checkpoint,
                                      int n_max, const std::filesystem::path& out_path) {
    require_artifact(candidates_path, "build-lists", "synth or convert-letor");
    require_artifact(baseline_checkpoint, "build-lists", "train-baseline");
    DatasetManifest manifest;
    const std::vector<RerankRecord> candidates = parse_rerank(candidates_path, &manifest);
    BaselineParams params = load_baseline_checkpoint(baseline_checkpoint);
    long skipped = 0;
    const std::vector<RerankRecord> ranked =
        build_initial_lists(candidates, params, n_max, &skipped);
    if (skipped > 0) {
        log_info("build-lists: skipped " + std::to_string(skipped) + " empty candidate sets");
    }
    DatasetManifest out_manifest = manifest;
    out_manifest.n_max = n_max;
    write_rerank(out_path, ranked, out_manifest);
    write_provenance(out_path, "build-lists", {candidates_path, baseline_checkpoint},
                     {{"n_max", std::to_string(n_max)}, {"skipped", std::to_string(skipped)}},
                     0);
    return out_path;
}

std::filesystem::path run_pretrain(const std::filesystem::path& pretrain_path, int d_emb,
                                   const std::vector<int>& hidden, const TrainConfig& config,
                                   const std::filesystem::path& out_checkpoint) {
    require_artifact(pretrain_path, "pretrain", "synth");
    DatasetManifest manifest;
    const std::vector<PretrainRecord> records = parse_pretrain(pretrain_path, &manifest);
    PretrainConfig model;
    model.d_emb = d_emb;
    model.hidden = hidden;
    model.d_feature = manifest.d_feature;
    model.gender_vocab = manifest.gender_vocab;
    model.age_vocab = manifest.age_vocab;
    model.purchase_vocab = manifest.purchase_vocab;
    Rng rng(config.seed);
    PretrainParams params = PretrainParams::init(model, Vocab::collect(records), rng);
    const TrainResult result = train_pretrain(params, records, config);
    save_pretrain_checkpoint(out_checkpoint, params);
    ConfigDump dump = train_config_dump(config);
    dump["d_emb"] = std::to_string(d_emb);
    dump["hidden"] = fmt_ints(hidden);
    dump["steps_run"] = std::to_string(result.steps_run);
    write_provenance(out_checkpoint, "pretrain", {pretrain_path}, dump, config.seed);
    return out_checkpoint;
}

std::filesystem::path run_extract_pv(const std::filesystem::path& rerank_path,
                                     const std::filesystem::path& pretrain_checkpoint,
                                     const std::filesystem::path& out_path) {
    require_artifact(rerank_path, "extract-pv", "synth or build-lists");
    require_artifact(pretrain_checkpoint, "extract-pv", "pretrain");
    const std::vector<RerankRecord> records = parse_rerank(rerank_path);
    PretrainParams params = load_pretrain_checkpoint(pretrain_checkpoint);
    const PvTable table = extract_pv_table(records, params);
    table.save(out_path);
    write_provenance(out_path, "extract-pv", {rerank_path, pretrain_checkpoint}, {}, 0);
    return out_path;
}

TrainPrmArtifacts run_train_prm(const std::filesystem::path& train_path,
                                const std::optional<std::filesystem::path>& val_path,
                                const std::optional<std::filesystem::path>& pv_path,
                                PrmConfig model, const TrainConfig& config,
                                const std::filesystem::path& out_checkpoint,
                                const std::filesystem::path& out_log) {
    require_artifact(train_path, "train-prm", "synth or build-lists");
    DatasetManifest manifest;
    const std::vector<RerankRecord> train = parse_rerank(train_path, &manifest);
    std::vector<RerankRecord> validation;
    if (val_path.has_value()) {
        require_artifact(*val_path, "train-prm", "synth or build-lists");
        validation = parse_rerank(*val_path);
    }
    PvTable pv;
    if (model.use_pv) {
        if (!pv_path.has_value()) {
            throw ConfigError("train-prm: use_pv is set but no --pv table given");
        }
        require_artifact(*pv_path, "train-prm", "extract-pv");
        pv = PvTable::load(*pv_path);
        model.d_pv = pv.d_pv();
    } else {
        model.d_pv = 0;
    }
    model.d_feature = manifest.d_feature;
    model.n_max = manifest.n_max;

    Rng rng(config.seed);
    PrmParams params = PrmParams::init(model, rng);
    const TrainResult result =
        train_prm(params, train, validation.empty() ? nullptr : &validation,
                  model.use_pv ? &pv : nullptr, config);
    save_prm_checkpoint(out_checkpoint, params);

    std::ostringstream log_text;
    for (const std::string& line : result.log_lines) {
        log_text << line << "\n";
    }
    write_file(out_log, log_text.str());

    ConfigDump dump = train_config_dump(config);
    dump["d"] = std::to_string(model.d);
    dump["num_blocks"] = std::to_string(model.num_blocks);
    dump["num_heads"] = std::to_string(model.num_heads);
    dump["dropout"] = fmt(model.dropout);
    dump["use_pe"] = model.use_pe ? "true" : "false";
    dump["use_pv"] = model.use_pv ? "true" : "false";
    dump["use_residual"] = model.use_residual ? "true" : "false";
    dump["use_dropout"] = model.use_dropout ? "true" : "false";
    dump["head_style"] =
        model.head_style == HeadStyle::paper_literal ? "paper_literal" : "split";
    dump["steps_run"] = std::to_string(result.steps_run);
    std::vector<std::filesystem::path> inputs{train_path};
    if (val_path.has_value()) {
        inputs.push_back(*val_path);
    }
    if (model.use_pv) {
        inputs.push_back(*pv_path);
    }
    write_provenance(out_checkpoint, "train-prm", inputs, dump, config.seed);
    return TrainPrmArtifacts{out_checkpoint, out_log};
}

namespace {

json scored_to_json(const ScoredList& scored, const RerankRecord& record) {
    json order = json::array();
    for (int idx : scored.order) {
        order.push_back(record.items[static_cast<std::size_t>(idx)].item_id);
    }
    return json{{"request_id", scored.request_id},
                {"order", std::move(order)},
                {"scores", scored.scores}};
}

}  // namespace

EvalArtifacts run_eval(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& rerank_path,
                       const std::optional<std::filesystem::path>& pv_path,
                       std::vector<int> ks, const std::filesystem::path& out_metrics,
                       const std::filesystem::path& out_scores) {
    require_artifact(checkpoint, "eval", "train-prm");
    require_artifact(rerank_path, "eval", "synth or build-lists");
    DatasetManifest manifest;
    const std::vector<RerankRecord> records = parse_rerank(rerank_path, &manifest);
    PrmParams params = load_prm_checkpoint(checkpoint);
    PvTable pv;
    if (params.config.use_pv) {
        if (!pv_path.has_value()) {
            throw ConfigError("eval: checkpoint uses PV but no --pv table given");
        }
        require_artifact(*pv_path, "eval", "extract-pv");
        pv = PvTable::load(*pv_path);
    }
    if (ks.empty()) {
        ks = {5, 10, manifest.n_max};
    }
    const EvalRun run =
        evaluate_run(params, records, params.config.use_pv ? &pv : nullptr, ks);
    write_file(out_metrics, metrics_to_json(run.metrics) + "\n");
    std::ostringstream scores_text;
    for (std::size_t i = 0; i < run.scored.size(); ++i) {
        scores_text << scored_to_json(run.scored[i], records[i]).dump() << "\n";
    }
    write_file(out_scores, scores_text.str());

    std::vector<std::filesystem::path> inputs{checkpoint, rerank_path};
    if (params.config.use_pv) {
        inputs.push_back(*pv_path);
    }
    write_provenance(out_metrics, "eval", inputs, {{"ks", fmt_ints(ks)}}, 0);
    return EvalArtifacts{out_metrics, out_scores, run.metrics};
}

EvalArtifacts run_eval_initial(const std::filesystem::path& rerank_path, std::vector<int> ks,
                               const std::filesystem::path& out_metrics) {
    require_artifact(rerank_path, "eval", "synth or build-lists");
    DatasetManifest manifest;
    const std::vector<RerankRecord> records = parse_rerank(rerank_path, &manifest);
    if (ks.empty()) {
        ks = {5, 10, manifest.n_max};
    }
    RankedLabels ranked;
    for (const RerankRecord& r : records) {
        std::vector<int> labels;
        for (const ItemEntry& item : r.items) {
            labels.push_back(item.label);
        }
        ranked.push_back(std::move(labels));
    }
    const RankingMetrics metrics = compute_metrics(ranked, ks);
    write_file(out_metrics, metrics_to_json(metrics) + "\n");
    write_provenance(out_metrics, "eval-initial", {rerank_path}, {{"ks", fmt_ints(ks)}}, 0);
    return EvalArtifacts{out_metrics, {}, metrics};
}

std::filesystem::path run_export_attention(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& rerank_path,
                                           const std::optional<std::filesystem::path>& pv_path,
                                           AttentionGrouping grouping, int block, int head,
                                           const std::filesystem::path& out_csv) {
    require_artifact(checkpoint, "export-attention", "train-prm");
    require_artifact(rerank_path, "export-attention", "synth or build-lists");
    DatasetManifest manifest;
    const std::vector<RerankRecord> records = parse_rerank(rerank_path, &manifest);
    PrmParams params = load_prm_checkpoint(checkpoint);
    PvTable pv;
    if (params.config.use_pv) {
        if (!pv_path.has_value()) {
            throw ConfigError("export-attention: checkpoint uses PV but no --pv table given");
        }
        require_artifact(*pv_path, "export-attention", "extract-pv");
        pv = PvTable::load(*pv_path);
    }
    const AttentionAggregate agg =
        export_attention(params, records, params.config.use_pv ? &pv : nullptr, grouping,
                         manifest, block, head);
    write_file(out_csv, attention_to_csv(agg));

    const char* grouping_name = grouping == AttentionGrouping::category       ? "category"
                                : grouping == AttentionGrouping::price_level ? "price"
                                                                              : "position";
    std::vector<std::filesystem::path> inputs{checkpoint, rerank_path};
    if (params.config.use_pv) {
        inputs.push_back(*pv_path);
    }
    write_provenance(out_csv, "export-attention", inputs,
                     {{"grouping", grouping_name},
                      {"block", std::to_string(block)},
                      {"head", std::to_string(head)}},
                     0);
    return out_csv;
}

}  // namespace prm
