#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prm/tensor.hpp"

namespace prm {

struct UserProfile {
    std::string user_id;
    int gender = 0;
    int age_bucket = 0;
    int purchase_level = 0;
};

struct ItemEntry {
    std::string item_id;
    int category = 0;
    int price_level = 1;  // 1..7
    std::vector<double> features;
    int label = 0;  // {0, 1}
};

/// One user request: profile, behavior history, and the initial ordered item
/// list (position 1 first).
struct RerankRecord {
    std::string request_id;
    UserProfile user;
    std::vector<std::string> history;
    std::vector<ItemEntry> items;
};

struct PretrainRecord {
    UserProfile user;
    std::vector<std::string> history;
    ItemEntry item;
};

struct DatasetManifest {
    int d_feature = 0;
    int n_max = 30;
    int item_vocab = 0;
    int category_vocab = 0;
    int price_vocab = 7;
    int gender_vocab = 0;
    int age_vocab = 0;
    int purchase_vocab = 0;
    long num_records = 0;
};

/// Manifest lives beside the data file as <name>.manifest.json.
std::filesystem::path manifest_path_for(const std::filesystem::path& data_path);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path, const DatasetManifest& m);

/// Scan records and derive a manifest (vocab sizes = max id + 1).
DatasetManifest build_manifest(const std::vector<RerankRecord>& records, int n_max);
DatasetManifest build_manifest(const std::vector<PretrainRecord>& records, int n_max);

/// JSON-lines readers. Each validates every record against the manifest
/// stored beside the file and reports malformed lines with their number.
std::vector<RerankRecord> parse_rerank(const std::filesystem::path& path,
                                       DatasetManifest* manifest_out = nullptr);
std::vector<PretrainRecord> parse_pretrain(const std::filesystem::path& path,
                                           DatasetManifest* manifest_out = nullptr);

/// JSON-lines writers; canonical (sorted) key order, manifest written beside.
void write_rerank(const std::filesystem::path& path, const std::vector<RerankRecord>& records,
                  const DatasetManifest& manifest);
void write_pretrain(const std::filesystem::path& path,
                    const std::vector<PretrainRecord>& records,
                    const DatasetManifest& manifest);

// --- Letor-style conversion -------------------------------------------------

/// Graded input record: expert relevance 0..4 per item instead of a click
/// label. Same JSON-lines schema as rerank records with "relevance" in place
/// of "label"; user and history are optional.
struct GradedItem {
    std::string item_id;
    int category = 0;
    int price_level = 1;
    std::vector<double> features;
    int relevance = 0;  // 0..4
};

struct GradedRecord {
    std::string request_id;
    UserProfile user;
    std::vector<std::string> history;
    std::vector<GradedItem> items;
};

std::vector<GradedRecord> parse_graded(const std::filesystem::path& path);

/// 1 / pos^eta, the probability that the item at 1-based `position` is seen.
double view_probability(int position, double eta);

/// Binary label = 1 iff relevance > t_b AND a seeded positional view draw
/// succeeds. Unviewed items stay in the list with label 0.
std::vector<RerankRecord> convert_letor(const std::vector<GradedRecord>& graded, double t_b,
                                        double eta, std::uint64_t seed);

// --- Synthetic data ----------------------------------------------------------

/// Generator sizes and planted-signal scales. Feature vectors are
/// [continuous | one-hot category | one-hot price], so the list context and
/// the planted interactions are visible to a feature-based model.
struct SynthSpec {
    int num_train_requests = 1000;
    int num_test_requests = 200;
    int num_pretrain = 4000;
    int d_cont = 4;
    int num_categories = 6;
    int num_price_levels = 7;
    int list_len_min = 8;
    int list_len_max = 16;
    int n_max = 16;
    int num_users = 200;
    int num_items = 500;
    int history_len_max = 8;
    int gender_vocab = 2;
    int age_vocab = 5;
    int purchase_vocab = 3;
    double interaction_scale = 1.0;      // planted category-affinity strength
    double personalization_scale = 0.0;  // planted per-user preference strength
    double position_penalty_scale = 0.5;
    double view_decay_eta = 0.3;
    double click_bias = -1.0;

    int d_feature() const { return d_cont + num_categories + num_price_levels; }
    void validate() const;
};

/// Everything the acceptance oracles need to score with perfect knowledge.
struct SynthGroundTruth {
    Tensor2 weights;              // [1 x d_feature], the pointwise signal
    Tensor2 affinity;             // [G x G] category-affinity matrix g
    Tensor2 gender_pref;          // [gender_vocab x d_feature]
    Tensor2 age_pref;             // [age_vocab x d_feature]
    Tensor2 purchase_pref;        // [purchase_vocab x d_feature]
    double position_penalty_scale = 0.0;
    double click_bias = 0.0;

    struct RequestTruth {
        std::string request_id;
        std::vector<double> true_p;      // Bayes click probability per item, list order
        std::vector<double> base_score;  // pointwise w.x per item, list order
    };
    std::vector<RequestTruth> requests;  // train then test, in output order
};

struct SynthDataset {
    std::vector<RerankRecord> train;
    std::vector<RerankRecord> test;
    std::vector<PretrainRecord> pretrain;
    DatasetManifest manifest;
    SynthGroundTruth truth;
};

/// Fully seeded; identical (spec, seed) gives byte-identical files.
SynthDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

/// Writes train/test/pretrain JSONL (+ manifests) and ground_truth.json
/// into `dir`. Returns the paths written.
std::vector<std::filesystem::path> write_synth_dataset(const std::filesystem::path& dir,
                                                       const SynthDataset& dataset);

SynthGroundTruth read_ground_truth(const std::filesystem::path& path);

// --- Batching ----------------------------------------------------------------

/// A record padded to fixed length: zero feature rows past the real items,
/// mask marking which rows are real.
struct PaddedList {
    Tensor2 features;                 // [n_max x d_feature]
    std::vector<std::uint8_t> mask;   // length n_max, 1 = real item
    std::vector<int> labels;          // length n_max, 0 on padding
};

PaddedList pad_record(const RerankRecord& record, int n_max);

/// Deterministic shuffled batching. Every epoch is a seeded permutation of
/// the record indices; batches are contiguous slices of it.
class BatchIter {
public:
    BatchIter(std::size_t num_records, int batch_size, std::uint64_t shuffle_seed);

    /// Fills `out` with the next batch of record indices; false at epoch end.
    bool next(std::vector<std::size_t>& out);

    /// Start a new epoch with a fresh deterministic permutation.
    void reset(std::uint64_t epoch);

private:
    std::size_t num_records_;
    int batch_size_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace prm
