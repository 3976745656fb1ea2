// Command-line entry point: dataset synthesis/conversion, the training
// pipeline, evaluation, attention export, and the re-rank socket server.
//
// Exit codes: 0 success, 1 runtime error, 2 configuration error.

#include <CLI11.hpp>

#include <csignal>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "prm/data.hpp"
#include "prm/errors.hpp"
#include "prm/eval.hpp"
#include "prm/log.hpp"
#include "prm/pipeline.hpp"
#include "prm/serve.hpp"
#include "prm/training.hpp"

namespace fs = std::filesystem;

namespace {

struct SynthFlags {
    prm::SynthSpec spec;

    void attach(CLI::App* cmd) {
        cmd->add_option("--requests", spec.num_train_requests, "training requests");
        cmd->add_option("--test-requests", spec.num_test_requests, "held-out requests");
        cmd->add_option("--pretrain-records", spec.num_pretrain, "pretrain display records");
        cmd->add_option("--d-cont", spec.d_cont, "continuous feature width");
        cmd->add_option("--categories", spec.num_categories, "category count");
        cmd->add_option("--price-levels", spec.num_price_levels, "price level count");
        cmd->add_option("--list-min", spec.list_len_min, "shortest initial list");
        cmd->add_option("--list-max", spec.list_len_max, "longest initial list");
        cmd->add_option("--n-max", spec.n_max, "list capacity");
        cmd->add_option("--users", spec.num_users, "user count");
        cmd->add_option("--items", spec.num_items, "catalog size");
        cmd->add_option("--history-max", spec.history_len_max, "max history length");
        cmd->add_option("--genders", spec.gender_vocab, "gender vocabulary");
        cmd->add_option("--ages", spec.age_vocab, "age-bucket vocabulary");
        cmd->add_option("--purchase-levels", spec.purchase_vocab, "purchase-level vocabulary");
        cmd->add_option("--interaction-scale", spec.interaction_scale,
                        "planted category-affinity strength");
        cmd->add_option("--personalization-scale", spec.personalization_scale,
                        "planted user-preference strength");
        cmd->add_option("--position-penalty", spec.position_penalty_scale,
                        "position penalty scale");
        cmd->add_option("--view-eta", spec.view_decay_eta, "impression decay exponent");
        cmd->add_option("--click-bias", spec.click_bias, "base click logit");
    }
};

struct TrainFlags {
    prm::TrainConfig config;

    void attach(CLI::App* cmd) {
        cmd->add_option("--batch-size", config.batch_size, "batch size");
        cmd->add_option("--max-steps", config.max_steps, "optimizer steps");
        cmd->add_option("--warmup", config.warmup_steps, "warmup steps");
        cmd->add_option("--lr-scale", config.lr_scale, "multiplier on the schedule");
        cmd->add_option("--fixed-lr", config.fixed_lr, "constant rate, bypasses the schedule");
        cmd->add_option("--grad-clip", config.grad_clip,
                        "global L2 clip threshold, 0 disables");
        cmd->add_option("--patience", config.patience, "early-stop patience (epochs)");
        cmd->add_flag("--mean-per-request", config.mean_per_request,
                      "normalize the listwise loss by request count");
    }
};

struct PrmModelFlags {
    prm::PrmConfig config;
    std::string head_style = "paper_literal";
    bool no_pe = false;
    bool no_pv = false;
    bool no_residual = false;
    bool no_dropout = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--d", config.d, "latent width d_model");
        cmd->add_option("--blocks", config.num_blocks, "encoder blocks");
        cmd->add_option("--heads", config.num_heads, "attention heads");
        cmd->add_option("--ffn-inner", config.ffn_inner, "FFN inner width, 0 = 4*d");
        cmd->add_option("--dropout", config.dropout, "dropout probability");
        cmd->add_option("--head-style", head_style, "paper_literal | split")
            ->check(CLI::IsMember({"paper_literal", "split"}));
        cmd->add_flag("--no-pe", no_pe, "disable the position embedding");
        cmd->add_flag("--no-pv", no_pv, "disable the personalized vectors");
        cmd->add_flag("--no-residual", no_residual, "disable residual connections");
        cmd->add_flag("--no-dropout", no_dropout, "disable dropout");
    }

    prm::PrmConfig resolve() const {
        prm::PrmConfig c = config;
        c.use_pe = !no_pe;
        c.use_pv = !no_pv;
        c.use_residual = !no_residual;
        c.use_dropout = !no_dropout;
        c.head_style = head_style == "split" ? prm::HeadStyle::split
                                             : prm::HeadStyle::paper_literal;
        return c;
    }
};

prm::AttentionGrouping parse_grouping(const std::string& name) {
    if (name == "category") {
        return prm::AttentionGrouping::category;
    }
    if (name == "price") {
        return prm::AttentionGrouping::price_level;
    }
    if (name == "position") {
        return prm::AttentionGrouping::position;
    }
    throw prm::ConfigError("unknown grouping '" + name + "'");
}

std::optional<fs::path> opt_path(const std::string& s) {
    return s.empty() ? std::nullopt : std::optional<fs::path>(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"personalized re-ranking toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key=value configuration file");
    app.allow_config_extras(CLI::config_extras_mode::error);

    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "global RNG seed")->capture_default_str();

    // --- synth -----------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "generate a seeded synthetic dataset");
    SynthFlags synth;
    synth.attach(synth_cmd);
    std::string synth_out = "data";
    synth_cmd->add_option("--out", synth_out, "output directory");

    // --- convert-letor ---------------------------------------------------
    auto* letor_cmd =
        app.add_subcommand("convert-letor", "graded relevance to click labels");
    std::string letor_graded;
    double letor_tb = 1.5;
    double letor_eta = 0.2;
    std::string letor_out = "converted.jsonl";
    letor_cmd->add_option("--graded", letor_graded, "graded JSONL input")->required();
    letor_cmd->add_option("--t-b", letor_tb, "relevance threshold");
    letor_cmd->add_option("--eta", letor_eta, "impression decay exponent");
    letor_cmd->add_option("--out", letor_out, "output rerank JSONL");

    // --- train-baseline --------------------------------------------------
    auto* base_cmd = app.add_subcommand("train-baseline", "train the pointwise ranker");
    std::string base_train;
    std::vector<int> base_hidden = {64, 32};
    std::string base_out = "baseline.json";
    TrainFlags base_flags;
    base_cmd->add_option("--train", base_train, "rerank JSONL training data")->required();
    base_cmd->add_option("--hidden", base_hidden, "hidden widths");
    base_cmd->add_option("--out", base_out, "checkpoint path");
    base_flags.attach(base_cmd);

    // --- build-lists -----------------------------------------------------
    auto* lists_cmd =
        app.add_subcommand("build-lists", "rank candidate sets into initial lists");
    std::string lists_candidates;
    std::string lists_baseline;
    int lists_n_max = 30;
    std::string lists_out = "initial.jsonl";
    lists_cmd->add_option("--candidates", lists_candidates, "candidate JSONL")->required();
    lists_cmd->add_option("--baseline", lists_baseline, "baseline checkpoint")->required();
    lists_cmd->add_option("--n-max", lists_n_max, "list capacity");
    lists_cmd->add_option("--out", lists_out, "output rerank JSONL");

    // --- pretrain --------------------------------------------------------
    auto* pretrain_cmd =
        app.add_subcommand("pretrain", "train the personalization network");
    std::string pretrain_data;
    int pretrain_d_emb = 16;
    std::vector<int> pretrain_hidden = {64, 32};
    std::string pretrain_out = "pretrain_model.json";
    TrainFlags pretrain_flags;
    pretrain_cmd->add_option("--data", pretrain_data, "pretrain JSONL")->required();
    pretrain_cmd->add_option("--d-emb", pretrain_d_emb, "embedding width");
    pretrain_cmd->add_option("--hidden", pretrain_hidden,
                             "hidden widths; the last one is d_pv");
    pretrain_cmd->add_option("--out", pretrain_out, "checkpoint path");
    pretrain_flags.attach(pretrain_cmd);

    // --- extract-pv ------------------------------------------------------
    auto* pv_cmd = app.add_subcommand("extract-pv", "export personalized vectors");
    std::string pv_data;
    std::string pv_model;
    std::string pv_out = "pv.jsonl";
    pv_cmd->add_option("--data", pv_data, "rerank JSONL")->required();
    pv_cmd->add_option("--model", pv_model, "pretrain checkpoint")->required();
    pv_cmd->add_option("--out", pv_out, "pv table path");

    // --- train-prm -------------------------------------------------------
    auto* prm_cmd = app.add_subcommand("train-prm", "train the re-ranking model");
    std::string prm_train;
    std::string prm_val;
    std::string prm_pv;
    std::string prm_out = "prm.json";
    std::string prm_log = "train_log.jsonl";
    PrmModelFlags prm_model;
    TrainFlags prm_flags;
    prm_cmd->add_option("--train", prm_train, "rerank JSONL training data")->required();
    prm_cmd->add_option("--val", prm_val, "validation rerank JSONL");
    prm_cmd->add_option("--pv", prm_pv, "pv table");
    prm_cmd->add_option("--out", prm_out, "checkpoint path");
    prm_cmd->add_option("--log", prm_log, "training log path");
    prm_model.attach(prm_cmd);
    prm_flags.attach(prm_cmd);

    // --- eval ------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "ranking metrics for a checkpoint");
    std::string eval_model;
    std::string eval_data;
    std::string eval_pv;
    std::vector<int> eval_ks;
    std::string eval_out = "metrics.json";
    std::string eval_scores = "scores.jsonl";
    bool eval_initial = false;
    eval_cmd->add_option("--model", eval_model, "prm checkpoint");
    eval_cmd->add_option("--data", eval_data, "rerank JSONL")->required();
    eval_cmd->add_option("--pv", eval_pv, "pv table");
    eval_cmd->add_option("--ks", eval_ks, "metric cutoffs (default 5 10 n_max)");
    eval_cmd->add_option("--out", eval_out, "metrics JSON path");
    eval_cmd->add_option("--scores", eval_scores, "per-request score dump path");
    eval_cmd->add_flag("--initial", eval_initial,
                       "score the initial order instead of a checkpoint");

    // --- export-attention --------------------------------------------------
    auto* attn_cmd = app.add_subcommand("export-attention", "aggregate attention weights");
    std::string attn_model;
    std::string attn_data;
    std::string attn_pv;
    std::string attn_grouping = "category";
    int attn_block = -1;
    int attn_head = -1;
    std::string attn_out = "attention.csv";
    attn_cmd->add_option("--model", attn_model, "prm checkpoint")->required();
    attn_cmd->add_option("--data", attn_data, "rerank JSONL")->required();
    attn_cmd->add_option("--pv", attn_pv, "pv table");
    attn_cmd->add_option("--grouping", attn_grouping, "category | price | position")
        ->check(CLI::IsMember({"category", "price", "position"}));
    attn_cmd->add_option("--block", attn_block, "block index, -1 = last");
    attn_cmd->add_option("--head", attn_head, "head index, -1 = mean over heads");
    attn_cmd->add_option("--out", attn_out, "CSV path");

    // --- serve -----------------------------------------------------------
    auto* serve_cmd = app.add_subcommand("serve", "newline-delimited JSON re-rank server");
    std::string serve_model;
    std::string serve_pv;
    std::uint16_t serve_port = 7878;
    serve_cmd->add_option("--model", serve_model, "prm checkpoint")->required();
    serve_cmd->add_option("--pv", serve_pv, "pv table");
    serve_cmd->add_option("--port", serve_port, "TCP port, 0 = ephemeral");

    // --- pipeline --------------------------------------------------------
    auto* pipe_cmd = app.add_subcommand(
        "pipeline", "run a stage subset over conventional paths in --out");
    std::vector<std::string> pipe_stages;
    std::string pipe_out = "run";
    SynthFlags pipe_synth;
    PrmModelFlags pipe_model;
    int pipe_d_emb = 16;
    std::vector<int> pipe_pretrain_hidden = {64, 32};
    std::vector<int> pipe_baseline_hidden = {64, 32};
    TrainFlags pipe_prm_train;
    long pipe_pretrain_steps = 400;
    int pipe_pretrain_batch = 128;
    long pipe_baseline_steps = 400;
    std::string pipe_grouping = "category";
    pipe_cmd->add_option("--stages", pipe_stages,
                         "subset of: synth convert-letor train-baseline build-lists pretrain "
                         "extract-pv train-prm eval export-attention")
        ->required();
    pipe_cmd->add_option("--out", pipe_out, "run directory");
    pipe_cmd->add_option("--graded", letor_graded, "graded JSONL for convert-letor");
    pipe_synth.attach(pipe_cmd);
    pipe_model.attach(pipe_cmd);
    pipe_cmd->add_option("--d-emb", pipe_d_emb, "pretrain embedding width");
    pipe_cmd->add_option("--pretrain-hidden", pipe_pretrain_hidden, "pretrain hidden widths");
    pipe_cmd->add_option("--baseline-hidden", pipe_baseline_hidden, "baseline hidden widths");
    pipe_cmd->add_option("--pretrain-steps", pipe_pretrain_steps, "pretrain optimizer steps");
    pipe_cmd->add_option("--pretrain-batch", pipe_pretrain_batch, "pretrain batch size");
    pipe_cmd->add_option("--baseline-steps", pipe_baseline_steps, "baseline optimizer steps");
    pipe_cmd->add_option("--grouping", pipe_grouping, "attention grouping for the export")
        ->check(CLI::IsMember({"category", "price", "position"}));
    pipe_prm_train.attach(pipe_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        prm::log_info("resolved configuration:\n" + app.config_to_str(true, false));

        if (synth_cmd->parsed()) {
            prm::run_synth(synth.spec, seed, synth_out);
            return 0;
        }
        if (letor_cmd->parsed()) {
            prm::run_convert_letor(letor_graded, letor_tb, letor_eta, seed, letor_out);
            return 0;
        }
        if (base_cmd->parsed()) {
            base_flags.config.seed = seed;
            prm::run_train_baseline(base_train, base_hidden, base_flags.config, base_out);
            return 0;
        }
        if (lists_cmd->parsed()) {
            prm::run_build_lists(lists_candidates, lists_baseline, lists_n_max, lists_out);
            return 0;
        }
        if (pretrain_cmd->parsed()) {
            pretrain_flags.config.seed = seed;
            prm::run_pretrain(pretrain_data, pretrain_d_emb, pretrain_hidden,
                              pretrain_flags.config, pretrain_out);
            return 0;
        }
        if (pv_cmd->parsed()) {
            prm::run_extract_pv(pv_data, pv_model, pv_out);
            return 0;
        }
        if (prm_cmd->parsed()) {
            prm_flags.config.seed = seed;
            prm::PrmConfig model = prm_model.resolve();
            if (prm_pv.empty()) {
                model.use_pv = false;
            }
            prm::run_train_prm(prm_train, opt_path(prm_val), opt_path(prm_pv), model,
                               prm_flags.config, prm_out, prm_log);
            return 0;
        }
        if (eval_cmd->parsed()) {
            if (eval_initial) {
                prm::run_eval_initial(eval_data, eval_ks, eval_out);
            } else {
                if (eval_model.empty()) {
                    throw prm::ConfigError("eval: give --model or --initial");
                }
                prm::run_eval(eval_model, eval_data, opt_path(eval_pv), eval_ks, eval_out,
                              eval_scores);
            }
            return 0;
        }
        if (attn_cmd->parsed()) {
            prm::run_export_attention(attn_model, attn_data, opt_path(attn_pv),
                                      parse_grouping(attn_grouping), attn_block, attn_head,
                                      attn_out);
            return 0;
        }
        if (serve_cmd->parsed()) {
            prm::PrmParams params = prm::load_prm_checkpoint(serve_model);
            std::optional<prm::PvTable> pv;
            if (!serve_pv.empty()) {
                pv = prm::PvTable::load(serve_pv);
            }
            prm::PrmScorer scorer(std::move(params), std::move(pv));
            prm::ReRankServer server(scorer, serve_port);
            server.run();
            return 0;
        }
        if (pipe_cmd->parsed()) {
            const fs::path out(pipe_out);
            const fs::path data_dir = out / "data";
            auto staged = [&](const std::string& name) {
                return std::find(pipe_stages.begin(), pipe_stages.end(), name) !=
                       pipe_stages.end();
            };
            // convert-letor feeds train.jsonl when synth is not used
            fs::path train_file = data_dir / "train.jsonl";
            fs::path test_file = data_dir / "test.jsonl";
            if (staged("synth")) {
                prm::run_synth(pipe_synth.spec, seed, data_dir);
            }
            if (staged("convert-letor")) {
                prm::run_convert_letor(letor_graded, letor_tb, letor_eta, seed, train_file);
            }
            if (staged("train-baseline")) {
                prm::TrainConfig cfg = pipe_prm_train.config;
                cfg.seed = seed;
                cfg.max_steps = pipe_baseline_steps;
                prm::run_train_baseline(train_file, pipe_baseline_hidden, cfg,
                                        out / "baseline.json");
            }
            if (staged("build-lists")) {
                prm::run_build_lists(train_file, out / "baseline.json",
                                     pipe_synth.spec.n_max, out / "initial_train.jsonl");
                prm::run_build_lists(test_file, out / "baseline.json", pipe_synth.spec.n_max,
                                     out / "initial_test.jsonl");
                train_file = out / "initial_train.jsonl";
                test_file = out / "initial_test.jsonl";
            }
            if (staged("pretrain")) {
                prm::TrainConfig cfg = pipe_prm_train.config;
                cfg.seed = seed;
                cfg.max_steps = pipe_pretrain_steps;
                cfg.batch_size = pipe_pretrain_batch;
                prm::run_pretrain(data_dir / "pretrain.jsonl", pipe_d_emb,
                                  pipe_pretrain_hidden, cfg, out / "pretrain_model.json");
            }
            if (staged("extract-pv")) {
                prm::run_extract_pv(train_file, out / "pretrain_model.json",
                                    out / "pv_train.jsonl");
                prm::run_extract_pv(test_file, out / "pretrain_model.json",
                                    out / "pv_test.jsonl");
            }
            if (staged("train-prm")) {
                prm::TrainConfig cfg = pipe_prm_train.config;
                cfg.seed = seed;
                prm::PrmConfig model = pipe_model.resolve();
                std::optional<fs::path> pv_file;
                if (model.use_pv && fs::exists(out / "pv_train.jsonl")) {
                    pv_file = out / "pv_train.jsonl";
                } else {
                    model.use_pv = false;
                }
                prm::run_train_prm(train_file, std::nullopt, pv_file, model, cfg,
                                   out / "prm.json", out / "train_log.jsonl");
            }
            if (staged("eval")) {
                std::optional<fs::path> pv_file;
                if (fs::exists(out / "pv_test.jsonl")) {
                    pv_file = out / "pv_test.jsonl";
                }
                prm::run_eval(out / "prm.json", test_file, pv_file, {},
                              out / "metrics.json", out / "scores.jsonl");
                prm::run_eval_initial(test_file, {}, out / "metrics_initial.json");
            }
            if (staged("export-attention")) {
                std::optional<fs::path> pv_file;
                if (fs::exists(out / "pv_test.jsonl")) {
                    pv_file = out / "pv_test.jsonl";
                }
                prm::run_export_attention(out / "prm.json", test_file, pv_file,
                                          parse_grouping(pipe_grouping), -1, -1,
                                          out / ("attention_" + pipe_grouping + ".csv"));
            }
            return 0;
        }
        throw prm::ConfigError("no subcommand given");
    } catch (const prm::ConfigError& e) {
        prm::log_error(e.what());
        return 2;
    } catch (const prm::DependencyError& e) {
        prm::log_error(e.what());
        return 2;
    } catch (const std::exception& e) {
        prm::log_error(e.what());
        return 1;
    }
}
