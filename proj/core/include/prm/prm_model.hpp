#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prm/autodiff.hpp"
#include "prm/data.hpp"
#include "prm/params.hpp"

namespace prm {

class Rng;

/// Eq-literal heads use full [d x d] projections per head with
/// W^O [h*d x d]; split is the conventional d/h-wide variant.
enum class HeadStyle { paper_literal, split };

struct PrmConfig {
    int d_feature = 0;
    int d_pv = 0;
    int d = 64;  // latent width, = d_model
    int n_max = 30;
    int num_blocks = 4;
    int num_heads = 3;
    int ffn_inner = 0;  // 0 -> 4*d
    double dropout = 0.1;
    bool use_pe = true;
    bool use_pv = true;
    bool use_residual = true;
    bool use_dropout = true;
    HeadStyle head_style = HeadStyle::paper_literal;

    int input_width() const { return d_feature + (use_pv ? d_pv : 0); }
    int head_dim() const { return head_style == HeadStyle::paper_literal ? d : d / num_heads; }
    int ffn_width() const { return ffn_inner > 0 ? ffn_inner : 4 * d; }
    void validate() const;
};

struct PrmBlockParams {
    std::vector<Tensor2> wq, wk, wv;  // one [d x head_dim] per head
    Tensor2 wo;                       // [h*head_dim x d]
    Tensor2 ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor2 ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

struct PrmParams {
    PrmConfig config;
    Tensor2 we_w;  // [input_width x d]
    Tensor2 we_b;  // [1 x d]
    Tensor2 pe;    // [n_max x input_width], zero-initialized
    std::vector<PrmBlockParams> blocks;
    Tensor2 wf_w;  // [d x 1]
    Tensor2 wf_b;  // [1 x 1]

    static PrmParams init(const PrmConfig& config, Rng& rng);
    /// Tensor names follow "block{k}.head{j}.wq" (see README).
    std::vector<ParamRef> refs();
};

struct PrmBlockBound {
    std::vector<Node*> wq, wk, wv;
    Node* wo;
    Node* ffn_w1;
    Node* ffn_b1;
    Node* ffn_w2;
    Node* ffn_b2;
    Node* ln1_gain;
    Node* ln1_bias;
    Node* ln2_gain;
    Node* ln2_bias;
};

struct PrmBound {
    Node* we_w;
    Node* we_b;
    Node* pe;
    std::vector<PrmBlockBound> blocks;
    Node* wf_w;
    Node* wf_b;
    std::vector<BoundTensor> all;

    static PrmBound bind(Tape& tape, PrmParams& params);
};

/// Scores and re-ranked order for one request. Scores of real items sum to
/// 1; masked (padded) items score exactly 0 and are absent from `order`.
struct ScoredList {
    std::string request_id;
    std::vector<double> scores;  // initial-list order
    std::vector<int> order;      // real item indices, best first
};

ScoredList make_scored_list(const std::string& request_id, const Tensor2& scores_row,
                            const std::vector<std::uint8_t>& item_mask);

/// E = ([X ; PV] + PE[0..n)) W^E + b^E. PV must be present iff use_pv;
/// n > n_max is a capacity error.
Node* prm_input_layer(Tape& tape, const PrmBound& bound, const PrmConfig& config,
                      const Tensor2& features, const Tensor2* pv);

struct AttentionResult {
    Node* output;   // [n x d_v]
    Node* weights;  // [n x n]
};

/// softmax(Q K^T / sqrt(d_k)) V with optional entry mask on the logits.
AttentionResult scaled_attention(Tape& tape, Node* q, Node* k, Node* v,
                                 const EntryMask* mask);

struct MultiHeadResult {
    Node* output;                      // [n x d]
    std::vector<Node*> head_weights;   // h x [n x n]
};

MultiHeadResult multi_head(Tape& tape, Node* e, const PrmBlockBound& block,
                           const PrmConfig& config, const EntryMask* attn_mask);

struct EncoderBlockResult {
    Node* output;
    std::vector<Node*> head_weights;
};

/// S = LN(E + dropout(MH(E))); F = LN(S + dropout(relu(S W1 + b1) W2 + b2)).
/// use_residual drops the additive terms; use_dropout makes dropout identity.
EncoderBlockResult encoder_block(Tape& tape, Node* e, const PrmBlockBound& block,
                                 const PrmConfig& config, const EntryMask* attn_mask,
                                 bool training, const DropoutKey& key_base);

struct EncodeResult {
    Node* output;                                   // [n x d]
    std::vector<std::vector<Node*>> attention;      // [block][head] -> [n x n]
};

EncodeResult encode(Tape& tape, Node* e, const PrmBound& bound, const PrmConfig& config,
                    const EntryMask* attn_mask, bool training, std::uint64_t seed,
                    std::uint64_t step);

/// softmax(F W^F + b^F) over unmasked items -> [1 x n] scores.
Node* output_scores(Tape& tape, Node* encoded, const PrmBound& bound,
                    const std::vector<std::uint8_t>& item_mask);

struct PrmForwardResult {
    Node* scores;                                   // [1 x n]
    std::vector<std::vector<Node*>> attention;      // [block][head]
};

/// Full forward for one list. `item_mask` marks real rows of `features`;
/// padded rows must be zero. pv is required iff config.use_pv.
PrmForwardResult prm_forward(Tape& tape, const PrmBound& bound, const PrmConfig& config,
                             const Tensor2& features, const Tensor2* pv,
                             const std::vector<std::uint8_t>& item_mask, bool training,
                             std::uint64_t seed, std::uint64_t step);

/// Entry mask for self-attention: real items attend to real items; a padded
/// query row attends only to itself so no softmax row is fully masked.
EntryMask attention_mask_for(const std::vector<std::uint8_t>& item_mask);

/// Eq-literal listwise loss: -sum over requests and clicked items of
/// log Score(i). `mean_per_request` divides by the number of requests.
Node* listwise_loss(Tape& tape, const std::vector<Node*>& score_rows,
                    const std::vector<std::vector<int>>& labels,
                    const std::vector<std::vector<std::uint8_t>>& masks,
                    bool mean_per_request = false);

void save_prm_checkpoint(const std::filesystem::path& path, const PrmParams& params);
PrmParams load_prm_checkpoint(const std::filesystem::path& path);

}  // namespace prm
