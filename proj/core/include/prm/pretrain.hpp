#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "prm/autodiff.hpp"
#include "prm/data.hpp"
#include "prm/params.hpp"

namespace prm {

class Rng;

/// Item-id dictionary. Ids are resolved strictly; unknown ids raise
/// VocabError rather than being bucketed.
class Vocab {
public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> ids);

    int index_of(const std::string& id) const;  // throws VocabError
    int size() const { return static_cast<int>(ids_.size()); }
    const std::vector<std::string>& ids() const { return ids_; }

    /// Ids in first-seen order over histories and items.
    static Vocab collect(const std::vector<PretrainRecord>& records);
    static Vocab collect(const std::vector<RerankRecord>& records);

private:
    std::vector<std::string> ids_;
    std::unordered_map<std::string, int> index_;
};

struct PretrainConfig {
    int d_emb = 16;
    std::vector<int> hidden = {64, 32};  // last width is d_pv
    int d_feature = 0;
    int gender_vocab = 0;
    int age_vocab = 0;
    int purchase_vocab = 0;

    int d_pv() const { return hidden.back(); }
    int user_rep_width() const { return 4 * d_emb; }
    void validate() const;
};

/// The personalization network: click probability from (profile, history,
/// item features); the last hidden activation is the personalized vector.
struct PretrainParams {
    PretrainConfig config;
    Vocab item_vocab;
    Tensor2 item_emb;      // [V_item x d_emb]
    Tensor2 gender_emb;    // [V_gender x d_emb]
    Tensor2 age_emb;       // [V_age x d_emb]
    Tensor2 purchase_emb;  // [V_purchase x d_emb]
    std::vector<Tensor2> hidden_w;
    std::vector<Tensor2> hidden_b;  // [1 x width]
    Tensor2 out_w;                  // [d_pv x 1]
    Tensor2 out_b;                  // [1 x 1]

    static PretrainParams init(const PretrainConfig& config, const Vocab& items, Rng& rng);
    std::vector<ParamRef> refs();
};

struct PretrainBound {
    Node* item_emb;
    Node* gender_emb;
    Node* age_emb;
    Node* purchase_emb;
    std::vector<Node*> hidden_w;
    std::vector<Node*> hidden_b;
    Node* out_w;
    Node* out_b;
    std::vector<BoundTensor> all;

    static PretrainBound bind(Tape& tape, PretrainParams& params);
};

/// [1 x 4*d_emb]: (mean of history item embeddings | gender | age | purchase).
/// An empty history contributes an exact zero block.
Node* user_representation(Tape& tape, const UserProfile& user,
                          const std::vector<std::string>& history,
                          const PretrainBound& bound, const PretrainParams& params);

/// Plain-value convenience wrapper over the graph builder.
Tensor2 user_representation_value(const UserProfile& user,
                                  const std::vector<std::string>& history,
                                  PretrainParams& params);

struct PretrainForward {
    Node* p_click;  // [1 x 1], in (0, 1)
    Node* pv;       // [1 x d_pv]
};

/// `training` is part of the op contract; the network has no stochastic
/// layers, so it currently has no effect.
PretrainForward pretrain_forward(Tape& tape, Node* user_rep, const ItemEntry& item,
                                 const PretrainBound& bound, const PretrainParams& params,
                                 bool training);

/// Pointwise cross entropy over a batch:
/// -sum_i [ y_i log p_i + (1-y_i) log(1-p_i) ], p clamped to
/// [1e-12, 1-1e-12] before the logs.
Node* pretrain_loss(Tape& tape, Node* p_click_row /*[1 x B]*/,
                    const std::vector<int>& labels);

/// Value-level forward for extraction and oracles.
struct PvResult {
    double p_click;
    std::vector<double> pv;
};
PvResult pretrain_predict(PretrainParams& params, const UserProfile& user,
                          const std::vector<std::string>& history, const ItemEntry& item);

/// (request_id, item_id) -> personalized vector.
class PvTable {
public:
    static std::string key(const std::string& request_id, const std::string& item_id);

    void put(const std::string& request_id, const std::string& item_id,
             std::vector<double> pv);
    /// Throws VocabError when the pair is missing.
    const std::vector<double>& get(const std::string& request_id,
                                   const std::string& item_id) const;
    bool contains(const std::string& request_id, const std::string& item_id) const;
    std::size_t size() const { return entries_.size(); }
    int d_pv() const;

    void save(const std::filesystem::path& path) const;  // JSON lines
    static PvTable load(const std::filesystem::path& path);

private:
    struct Entry {
        std::string request_id;
        std::string item_id;
        std::vector<double> pv;
    };
    std::vector<Entry> ordered_;  // file order
    std::unordered_map<std::string, std::size_t> entries_;
};

/// pv for every (request, item) pair of the rerank set, training = false.
PvTable extract_pv_table(const std::vector<RerankRecord>& records, PretrainParams& params);

void save_pretrain_checkpoint(const std::filesystem::path& path, const PretrainParams& params);
PretrainParams load_pretrain_checkpoint(const std::filesystem::path& path);

}  // namespace prm
