#include "prm/prm_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "checkpoint_io.hpp"
#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/rng.hpp"

namespace prm {

using detail::json;

namespace {

constexpr double kLayerNormEpsilon = 1e-6;

}  // namespace

void PrmConfig::validate() const {
    if (d_feature < 1) {
        throw ConfigError("prm: d_feature must be >= 1");
    }
    if (d < 1 || num_heads < 1 || num_blocks < 1 || n_max < 1) {
        throw ConfigError("prm: d, num_heads, num_blocks, n_max must be >= 1");
    }
    if (use_pv && d_pv < 1) {
        throw ConfigError("prm: use_pv requires d_pv >= 1");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
        throw ConfigError("prm: dropout must be in [0, 1)");
    }
    if (head_style == HeadStyle::split && d % num_heads != 0) {
        throw ConfigError("prm: split heads require num_heads to divide d (" +
                          std::to_string(num_heads) + " does not divide " + std::to_string(d) +
                          ")");
    }
}

PrmParams PrmParams::init(const PrmConfig& config, Rng& rng) {
    config.validate();
    PrmParams p;
    p.config = config;
    p.we_w = Tensor2::glorot_uniform(config.input_width(), config.d, rng);
    p.we_b = Tensor2::zeros(1, config.d);
    // Zero PE: the position signal starts as a no-op and is learned.
    p.pe = Tensor2::zeros(config.n_max, config.input_width());
    const int dh = config.head_dim();
    for (int k = 0; k < config.num_blocks; ++k) {
        PrmBlockParams b;
        for (int j = 0; j < config.num_heads; ++j) {
            b.wq.push_back(Tensor2::glorot_uniform(config.d, dh, rng));
            b.wk.push_back(Tensor2::glorot_uniform(config.d, dh, rng));
            b.wv.push_back(Tensor2::glorot_uniform(config.d, dh, rng));
        }
        b.wo = Tensor2::glorot_uniform(config.num_heads * dh, config.d, rng);
        b.ffn_w1 = Tensor2::glorot_uniform(config.d, config.ffn_width(), rng);
        b.ffn_b1 = Tensor2::zeros(1, config.ffn_width());
        b.ffn_w2 = Tensor2::glorot_uniform(config.ffn_width(), config.d, rng);
        b.ffn_b2 = Tensor2::zeros(1, config.d);
        b.ln1_gain = Tensor2::full(1, config.d, 1.0);
        b.ln1_bias = Tensor2::zeros(1, config.d);
        b.ln2_gain = Tensor2::full(1, config.d, 1.0);
        b.ln2_bias = Tensor2::zeros(1, config.d);
        p.blocks.push_back(std::move(b));
    }
    p.wf_w = Tensor2::glorot_uniform(config.d, 1, rng);
    p.wf_b = Tensor2::zeros(1, 1);
    return p;
}

std::vector<ParamRef> PrmParams::refs() {
    std::vector<ParamRef> r{{"we.w", &we_w}, {"we.b", &we_b}, {"pe", &pe}};
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        PrmBlockParams& b = blocks[k];
        const std::string prefix = "block" + std::to_string(k) + ".";
        for (std::size_t j = 0; j < b.wq.size(); ++j) {
            const std::string head = prefix + "head" + std::to_string(j) + ".";
            r.push_back({head + "wq", &b.wq[j]});
            r.push_back({head + "wk", &b.wk[j]});
            r.push_back({head + "wv", &b.wv[j]});
        }
        r.push_back({prefix + "wo", &b.wo});
        r.push_back({prefix + "ffn.w1", &b.ffn_w1});
        r.push_back({prefix + "ffn.b1", &b.ffn_b1});
        r.push_back({prefix + "ffn.w2", &b.ffn_w2});
        r.push_back({prefix + "ffn.b2", &b.ffn_b2});
        r.push_back({prefix + "ln1.gain", &b.ln1_gain});
        r.push_back({prefix + "ln1.bias", &b.ln1_bias});
        r.push_back({prefix + "ln2.gain", &b.ln2_gain});
        r.push_back({prefix + "ln2.bias", &b.ln2_bias});
    }
    r.push_back({"wf.w", &wf_w});
    r.push_back({"wf.b", &wf_b});
    return r;
}

PrmBound PrmBound::bind(Tape& tape, PrmParams& params) {
    PrmBound bound;
    bound.all = bind_params(tape, params.refs());
    std::size_t i = 0;
    bound.we_w = bound.all[i++].node;
    bound.we_b = bound.all[i++].node;
    bound.pe = bound.all[i++].node;
    for (std::size_t k = 0; k < params.blocks.size(); ++k) {
        PrmBlockBound b;
        for (std::size_t j = 0; j < params.blocks[k].wq.size(); ++j) {
            b.wq.push_back(bound.all[i++].node);
            b.wk.push_back(bound.all[i++].node);
            b.wv.push_back(bound.all[i++].node);
        }
        b.wo = bound.all[i++].node;
        b.ffn_w1 = bound.all[i++].node;
        b.ffn_b1 = bound.all[i++].node;
        b.ffn_w2 = bound.all[i++].node;
        b.ffn_b2 = bound.all[i++].node;
        b.ln1_gain = bound.all[i++].node;
        b.ln1_bias = bound.all[i++].node;
        b.ln2_gain = bound.all[i++].node;
        b.ln2_bias = bound.all[i++].node;
        bound.blocks.push_back(std::move(b));
    }
    bound.wf_w = bound.all[i++].node;
    bound.wf_b = bound.all[i++].node;
    return bound;
}

// --- Forward pieces -----------------------------------------------------------

Node* prm_input_layer(Tape& tape, const PrmBound& bound, const PrmConfig& config,
                      const Tensor2& features, const Tensor2* pv) {
    const int n = features.rows;
    if (n > config.n_max) {
        throw ConfigError("input_layer: list of " + std::to_string(n) +
                          " items exceeds n_max=" + std::to_string(config.n_max));
    }
    if (features.cols != config.d_feature) {
        throw ShapeError("input_layer: features " + features.shape_str() + ", expected [n x " +
                         std::to_string(config.d_feature) + "]");
    }
    Tensor2 raw;
    if (config.use_pv) {
        if (pv == nullptr) {
            throw ConfigError("input_layer: config.use_pv is set but no PV given");
        }
        if (pv->rows != n || pv->cols != config.d_pv) {
            throw ShapeError("input_layer: pv " + pv->shape_str() + ", expected [" +
                             std::to_string(n) + " x " + std::to_string(config.d_pv) + "]");
        }
        raw = hconcat_value({&features, pv});
    } else {
        raw = features;
    }
    Node* e = tape.constant(std::move(raw));
    if (config.use_pe) {
        e = tape.add(e, tape.slice_rows(bound.pe, 0, n));
    }
    return tape.add_row(tape.matmul(e, bound.we_w), bound.we_b);
}

AttentionResult scaled_attention(Tape& tape, Node* q, Node* k, Node* v,
                                 const EntryMask* mask) {
    const int dk = k->value.cols;
    Node* logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(dk));
    Node* weights = tape.softmax_rows(logits, mask);
    return AttentionResult{tape.matmul(weights, v), weights};
}

MultiHeadResult multi_head(Tape& tape, Node* e, const PrmBlockBound& block,
                           const PrmConfig& config, const EntryMask* attn_mask) {
    std::vector<Node*> outputs;
    std::vector<Node*> weights;
    for (int j = 0; j < config.num_heads; ++j) {
        Node* q = tape.matmul(e, block.wq[static_cast<std::size_t>(j)]);
        Node* k = tape.matmul(e, block.wk[static_cast<std::size_t>(j)]);
        Node* v = tape.matmul(e, block.wv[static_cast<std::size_t>(j)]);
        AttentionResult head = scaled_attention(tape, q, k, v, attn_mask);
        outputs.push_back(head.output);
        weights.push_back(head.weights);
    }
    Node* concat = config.num_heads == 1 ? outputs.front() : tape.concat_cols(outputs);
    return MultiHeadResult{tape.matmul(concat, block.wo), std::move(weights)};
}

EncoderBlockResult encoder_block(Tape& tape, Node* e, const PrmBlockBound& block,
                                 const PrmConfig& config, const EntryMask* attn_mask,
                                 bool training, const DropoutKey& key_base) {
    MultiHeadResult mh = multi_head(tape, e, block, config, attn_mask);
    DropoutKey attn_key = key_base;
    Node* mh_out = tape.dropout(mh.output, config.dropout, training && config.use_dropout,
                                attn_key);
    Node* s_pre = config.use_residual ? tape.add(e, mh_out) : mh_out;
    Node* s = tape.layer_norm(s_pre, block.ln1_gain, block.ln1_bias, kLayerNormEpsilon);

    Node* inner = tape.relu(tape.add_row(tape.matmul(s, block.ffn_w1), block.ffn_b1));
    Node* ffn = tape.add_row(tape.matmul(inner, block.ffn_w2), block.ffn_b2);
    DropoutKey ffn_key = key_base;
    ffn_key.layer += 1;
    Node* ffn_out = tape.dropout(ffn, config.dropout, training && config.use_dropout, ffn_key);
    Node* f_pre = config.use_residual ? tape.add(s, ffn_out) : ffn_out;
    Node* f = tape.layer_norm(f_pre, block.ln2_gain, block.ln2_bias, kLayerNormEpsilon);
    return EncoderBlockResult{f, std::move(mh.head_weights)};
}

EncodeResult encode(Tape& tape, Node* e, const PrmBound& bound, const PrmConfig& config,
                    const EntryMask* attn_mask, bool training, std::uint64_t seed,
                    std::uint64_t step) {
    EncodeResult result;
    Node* x = e;
    for (int k = 0; k < config.num_blocks; ++k) {
        const DropoutKey key{seed, static_cast<std::uint64_t>(2 * k), step};
        EncoderBlockResult block = encoder_block(
            tape, x, bound.blocks[static_cast<std::size_t>(k)], config, attn_mask, training,
            key);
        x = block.output;
        result.attention.push_back(std::move(block.head_weights));
    }
    result.output = x;
    return result;
}

Node* output_scores(Tape& tape, Node* encoded, const PrmBound& bound,
                    const std::vector<std::uint8_t>& item_mask) {
    const int n = encoded->value.rows;
    if (static_cast<int>(item_mask.size()) != n) {
        throw ShapeError("output_scores: mask length " + std::to_string(item_mask.size()) +
                         " does not match " + std::to_string(n) + " items");
    }
    Node* logits = tape.add_row(tape.matmul(encoded, bound.wf_w), bound.wf_b);  // [n x 1]
    Node* row = tape.transpose(logits);                                        // [1 x n]
    EntryMask mask(item_mask.begin(), item_mask.end());
    return tape.softmax_rows(row, &mask);
}

EntryMask attention_mask_for(const std::vector<std::uint8_t>& item_mask) {
    const std::size_t n = item_mask.size();
    EntryMask mask(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const bool real_pair = item_mask[i] != 0 && item_mask[j] != 0;
            // A padded query row attends to itself so its softmax stays valid;
            // its output never reaches the scores or the loss.
            const bool pad_self = item_mask[i] == 0 && i == j;
            mask[i * n + j] = (real_pair || pad_self) ? 1 : 0;
        }
    }
    return mask;
}

PrmForwardResult prm_forward(Tape& tape, const PrmBound& bound, const PrmConfig& config,
                             const Tensor2& features, const Tensor2* pv,
                             const std::vector<std::uint8_t>& item_mask, bool training,
                             std::uint64_t seed, std::uint64_t step) {
    if (static_cast<int>(item_mask.size()) != features.rows) {
        throw ShapeError("prm_forward: mask length " + std::to_string(item_mask.size()) +
                         " does not match features " + features.shape_str());
    }
    Node* e = prm_input_layer(tape, bound, config, features, pv);
    const bool all_real =
        std::all_of(item_mask.begin(), item_mask.end(), [](std::uint8_t m) { return m != 0; });
    EntryMask attn_mask;
    const EntryMask* attn_mask_ptr = nullptr;
    if (!all_real) {
        attn_mask = attention_mask_for(item_mask);
        attn_mask_ptr = &attn_mask;
    }
    EncodeResult encoded = encode(tape, e, bound, config, attn_mask_ptr, training, seed, step);
    Node* scores = output_scores(tape, encoded.output, bound, item_mask);
    return PrmForwardResult{scores, std::move(encoded.attention)};
}

ScoredList make_scored_list(const std::string& request_id, const Tensor2& scores_row,
                            const std::vector<std::uint8_t>& item_mask) {
    if (scores_row.rows != 1 || static_cast<int>(item_mask.size()) != scores_row.cols) {
        throw ShapeError("make_scored_list: scores " + scores_row.shape_str() +
                         " vs mask length " + std::to_string(item_mask.size()));
    }
    ScoredList out;
    out.request_id = request_id;
    out.scores.assign(scores_row.data.begin(), scores_row.data.end());
    for (int i = 0; i < scores_row.cols; ++i) {
        if (item_mask[static_cast<std::size_t>(i)] != 0) {
            out.order.push_back(i);
        }
    }
    // Descending score; stable keeps the initial-list order on ties.
    std::stable_sort(out.order.begin(), out.order.end(), [&](int a, int b) {
        return out.scores[static_cast<std::size_t>(a)] > out.scores[static_cast<std::size_t>(b)];
    });
    return out;
}

Node* listwise_loss(Tape& tape, const std::vector<Node*>& score_rows,
                    const std::vector<std::vector<int>>& labels,
                    const std::vector<std::vector<std::uint8_t>>& masks,
                    bool mean_per_request) {
    if (score_rows.empty() || score_rows.size() != labels.size() ||
        score_rows.size() != masks.size()) {
        throw ShapeError("listwise_loss: scores/labels/masks size mismatch");
    }
    Node* total = nullptr;
    for (std::size_t r = 0; r < score_rows.size(); ++r) {
        Node* nll = tape.listwise_nll(score_rows[r], labels[r], masks[r]);
        total = total == nullptr ? nll : tape.add(total, nll);
    }
    if (mean_per_request) {
        total = tape.scale(total, 1.0 / static_cast<double>(score_rows.size()));
    }
    return total;
}

// --- Checkpoint -----------------------------------------------------------------

namespace {

json prm_config_to_json(const PrmConfig& c) {
    return json{{"d_feature", c.d_feature},
                {"d_pv", c.d_pv},
                {"d", c.d},
                {"n_max", c.n_max},
                {"num_blocks", c.num_blocks},
                {"num_heads", c.num_heads},
                {"ffn_inner", c.ffn_inner},
                {"dropout", c.dropout},
                {"use_pe", c.use_pe},
                {"use_pv", c.use_pv},
                {"use_residual", c.use_residual},
                {"use_dropout", c.use_dropout},
                {"head_style",
                 c.head_style == HeadStyle::paper_literal ? "paper_literal" : "split"}};
}

PrmConfig prm_config_from_json(const json& j) {
    PrmConfig c;
    c.d_feature = j.at("d_feature").get<int>();
    c.d_pv = j.at("d_pv").get<int>();
    c.d = j.at("d").get<int>();
    c.n_max = j.at("n_max").get<int>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_inner = j.at("ffn_inner").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.use_pe = j.at("use_pe").get<bool>();
    c.use_pv = j.at("use_pv").get<bool>();
    c.use_residual = j.at("use_residual").get<bool>();
    c.use_dropout = j.at("use_dropout").get<bool>();
    const std::string style = j.at("head_style").get<std::string>();
    if (style == "paper_literal") {
        c.head_style = HeadStyle::paper_literal;
    } else if (style == "split") {
        c.head_style = HeadStyle::split;
    } else {
        throw ConfigError("unknown head_style '" + style + "'");
    }
    return c;
}

}  // namespace

void save_prm_checkpoint(const std::filesystem::path& path, const PrmParams& params) {
    PrmParams& mutable_params = const_cast<PrmParams&>(params);
    detail::save_checkpoint_file(path, "prm", prm_config_to_json(params.config),
                                 mutable_params.refs());
}

PrmParams load_prm_checkpoint(const std::filesystem::path& path) {
    const json doc = detail::load_checkpoint_file(path, "prm");
    PrmConfig config = prm_config_from_json(doc.at("config"));
    Rng rng(0);
    PrmParams params = PrmParams::init(config, rng);
    detail::restore_tensors(doc, params.refs());
    return params;
}

}  // namespace prm
