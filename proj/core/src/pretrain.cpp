#include "prm/pretrain.hpp"

#include <fstream>
#include <sstream>

#include "checkpoint_io.hpp"
#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/rng.hpp"
#include "prm/util.hpp"

namespace prm {

using detail::json;

// --- Vocab --------------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> ids) : ids_(std::move(ids)) {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        index_.emplace(ids_[i], static_cast<int>(i));
    }
    if (index_.size() != ids_.size()) {
        throw ConfigError("vocab: duplicate item ids");
    }
}

int Vocab::index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) {
        throw VocabError("unknown item id '" + id + "'");
    }
    return it->second;
}

namespace {

void collect_id(std::vector<std::string>& out, std::unordered_map<std::string, int>& seen,
                const std::string& id) {
    if (seen.emplace(id, 0).second) {
        out.push_back(id);
    }
}

}  // namespace

Vocab Vocab::collect(const std::vector<PretrainRecord>& records) {
    std::vector<std::string> ids;
    std::unordered_map<std::string, int> seen;
    for (const PretrainRecord& r : records) {
        for (const std::string& h : r.history) {
            collect_id(ids, seen, h);
        }
        collect_id(ids, seen, r.item.item_id);
    }
    return Vocab(std::move(ids));
}

Vocab Vocab::collect(const std::vector<RerankRecord>& records) {
    std::vector<std::string> ids;
    std::unordered_map<std::string, int> seen;
    for (const RerankRecord& r : records) {
        for (const std::string& h : r.history) {
            collect_id(ids, seen, h);
        }
        for (const ItemEntry& item : r.items) {
            collect_id(ids, seen, item.item_id);
        }
    }
    return Vocab(std::move(ids));
}

// --- Params -------------------------------------------------------------------

void PretrainConfig::validate() const {
    if (d_emb < 1 || d_feature < 1) {
        throw ConfigError("pretrain: d_emb and d_feature must be >= 1");
    }
    if (hidden.empty()) {
        throw ConfigError("pretrain: need at least one hidden layer (its width is d_pv)");
    }
    for (int w : hidden) {
        if (w < 1) {
            throw ConfigError("pretrain: hidden widths must be >= 1");
        }
    }
    if (gender_vocab < 1 || age_vocab < 1 || purchase_vocab < 1) {
        throw ConfigError("pretrain: profile vocabularies must be >= 1");
    }
}

PretrainParams PretrainParams::init(const PretrainConfig& config, const Vocab& items,
                                    Rng& rng) {
    config.validate();
    PretrainParams p;
    p.config = config;
    p.item_vocab = items;
    p.item_emb = Tensor2::glorot_uniform(std::max(items.size(), 1), config.d_emb, rng);
    p.gender_emb = Tensor2::glorot_uniform(config.gender_vocab, config.d_emb, rng);
    p.age_emb = Tensor2::glorot_uniform(config.age_vocab, config.d_emb, rng);
    p.purchase_emb = Tensor2::glorot_uniform(config.purchase_vocab, config.d_emb, rng);
    int in_width = config.user_rep_width() + config.d_feature;
    for (int width : config.hidden) {
        p.hidden_w.push_back(Tensor2::glorot_uniform(in_width, width, rng));
        p.hidden_b.push_back(Tensor2::zeros(1, width));
        in_width = width;
    }
    p.out_w = Tensor2::glorot_uniform(config.d_pv(), 1, rng);
    p.out_b = Tensor2::zeros(1, 1);
    return p;
}

std::vector<ParamRef> PretrainParams::refs() {
    std::vector<ParamRef> r{{"emb.item", &item_emb},
                            {"emb.gender", &gender_emb},
                            {"emb.age", &age_emb},
                            {"emb.purchase", &purchase_emb}};
    for (std::size_t i = 0; i < hidden_w.size(); ++i) {
        r.push_back({"h" + std::to_string(i) + ".w", &hidden_w[i]});
        r.push_back({"h" + std::to_string(i) + ".b", &hidden_b[i]});
    }
    r.push_back({"out.w", &out_w});
    r.push_back({"out.b", &out_b});
    return r;
}

PretrainBound PretrainBound::bind(Tape& tape, PretrainParams& params) {
    PretrainBound b;
    b.all = bind_params(tape, params.refs());
    std::size_t i = 0;
    b.item_emb = b.all[i++].node;
    b.gender_emb = b.all[i++].node;
    b.age_emb = b.all[i++].node;
    b.purchase_emb = b.all[i++].node;
    for (std::size_t h = 0; h < params.hidden_w.size(); ++h) {
        b.hidden_w.push_back(b.all[i++].node);
        b.hidden_b.push_back(b.all[i++].node);
    }
    b.out_w = b.all[i++].node;
    b.out_b = b.all[i++].node;
    return b;
}

// --- Forward ------------------------------------------------------------------

Node* user_representation(Tape& tape, const UserProfile& user,
                          const std::vector<std::string>& history,
                          const PretrainBound& bound, const PretrainParams& params) {
    const PretrainConfig& cfg = params.config;
    if (user.gender < 0 || user.gender >= cfg.gender_vocab) {
        throw VocabError("gender id " + std::to_string(user.gender) +
                         " outside vocabulary of size " + std::to_string(cfg.gender_vocab));
    }
    if (user.age_bucket < 0 || user.age_bucket >= cfg.age_vocab) {
        throw VocabError("age bucket " + std::to_string(user.age_bucket) +
                         " outside vocabulary of size " + std::to_string(cfg.age_vocab));
    }
    if (user.purchase_level < 0 || user.purchase_level >= cfg.purchase_vocab) {
        throw VocabError("purchase level " + std::to_string(user.purchase_level) +
                         " outside vocabulary of size " + std::to_string(cfg.purchase_vocab));
    }

    Node* history_mean = nullptr;
    if (history.empty()) {
        history_mean = tape.constant(Tensor2::zeros(1, cfg.d_emb));
    } else {
        std::vector<int> idx;
        idx.reserve(history.size());
        for (const std::string& id : history) {
            idx.push_back(params.item_vocab.index_of(id));
        }
        Node* rows = tape.gather_rows(bound.item_emb, idx);
        // Mean pooling keeps the representation order-invariant.
        Node* ones = tape.constant(
            Tensor2::full(1, static_cast<int>(idx.size()), 1.0 / static_cast<double>(idx.size())));
        history_mean = tape.matmul(ones, rows);
    }

    const std::vector<int> g{user.gender};
    const std::vector<int> a{user.age_bucket};
    const std::vector<int> p{user.purchase_level};
    Node* parts[] = {history_mean, tape.gather_rows(bound.gender_emb, g),
                     tape.gather_rows(bound.age_emb, a),
                     tape.gather_rows(bound.purchase_emb, p)};
    return tape.concat_cols(parts);
}

Tensor2 user_representation_value(const UserProfile& user,
                                  const std::vector<std::string>& history,
                                  PretrainParams& params) {
    Tape tape;
    PretrainBound bound = PretrainBound::bind(tape, params);
    return user_representation(tape, user, history, bound, params)->value;
}

PretrainForward pretrain_forward(Tape& tape, Node* user_rep, const ItemEntry& item,
                                 const PretrainBound& bound, const PretrainParams& params,
                                 bool /*training*/) {
    const PretrainConfig& cfg = params.config;
    if (static_cast<int>(item.features.size()) != cfg.d_feature) {
        throw ShapeError("pretrain_forward: item has " + std::to_string(item.features.size()) +
                         " features, config expects " + std::to_string(cfg.d_feature));
    }
    Node* item_features =
        tape.constant(Tensor2(1, cfg.d_feature, std::vector<double>(item.features)));
    Node* parts[] = {user_rep, item_features};
    Node* x = tape.concat_cols(parts);
    for (std::size_t layer = 0; layer < bound.hidden_w.size(); ++layer) {
        x = tape.relu(tape.add_row(tape.matmul(x, bound.hidden_w[layer]),
                                   bound.hidden_b[layer]));
    }
    Node* logit = tape.add_row(tape.matmul(x, bound.out_w), bound.out_b);
    return PretrainForward{tape.sigmoid(logit), x};
}

Node* pretrain_loss(Tape& tape, Node* p_click_row, const std::vector<int>& labels) {
    const Tensor2& p = p_click_row->value;
    if (p.rows != 1 || p.cols != static_cast<int>(labels.size())) {
        throw ShapeError("pretrain_loss: labels length " + std::to_string(labels.size()) +
                         " does not match " + p.shape_str());
    }
    Tensor2 y(1, p.cols);
    for (int i = 0; i < p.cols; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label != 0 && label != 1) {
            throw ConfigError("pretrain_loss: labels must be 0/1");
        }
        y.at(0, i) = static_cast<double>(label);
    }
    Tensor2 one_minus_y(1, p.cols);
    for (int i = 0; i < p.cols; ++i) {
        one_minus_y.at(0, i) = 1.0 - y.at(0, i);
    }

    Node* clamped = tape.clamp(p_click_row, 1e-12, 1.0 - 1e-12);
    Node* pos_term = tape.mul(tape.constant(std::move(y)), tape.log(clamped));
    Node* neg_term = tape.mul(tape.constant(std::move(one_minus_y)),
                              tape.log(tape.affine(clamped, -1.0, 1.0)));
    return tape.scale(tape.add(tape.sum(pos_term), tape.sum(neg_term)), -1.0);
}

PvResult pretrain_predict(PretrainParams& params, const UserProfile& user,
                          const std::vector<std::string>& history, const ItemEntry& item) {
    Tape tape;
    PretrainBound bound = PretrainBound::bind(tape, params);
    Node* rep = user_representation(tape, user, history, bound, params);
    PretrainForward fwd = pretrain_forward(tape, rep, item, bound, params, false);
    return PvResult{fwd.p_click->value.at(0, 0), fwd.pv->value.data};
}

// --- PV table -------------------------------------------------------------------

std::string PvTable::key(const std::string& request_id, const std::string& item_id) {
    return request_id + "\x1f" + item_id;
}

void PvTable::put(const std::string& request_id, const std::string& item_id,
                  std::vector<double> pv) {
    const std::string k = key(request_id, item_id);
    auto it = entries_.find(k);
    if (it != entries_.end()) {
        ordered_[it->second].pv = std::move(pv);
        return;
    }
    entries_.emplace(k, ordered_.size());
    ordered_.push_back(Entry{request_id, item_id, std::move(pv)});
}

const std::vector<double>& PvTable::get(const std::string& request_id,
                                        const std::string& item_id) const {
    auto it = entries_.find(key(request_id, item_id));
    if (it == entries_.end()) {
        throw VocabError("pv table has no entry for request '" + request_id + "', item '" +
                         item_id + "'");
    }
    return ordered_[it->second].pv;
}

bool PvTable::contains(const std::string& request_id, const std::string& item_id) const {
    return entries_.contains(key(request_id, item_id));
}

int PvTable::d_pv() const {
    return ordered_.empty() ? 0 : static_cast<int>(ordered_.front().pv.size());
}

void PvTable::save(const std::filesystem::path& path) const {
    std::ostringstream out;
    for (const Entry& e : ordered_) {
        out << json{{"request_id", e.request_id}, {"item_id", e.item_id}, {"pv", e.pv}}.dump()
            << "\n";
    }
    write_file(path, out.str());
}

PvTable PvTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open pv table: " + path.string());
    }
    PvTable table;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const json j = json::parse(line);
            table.put(j.at("request_id").get<std::string>(),
                      j.at("item_id").get<std::string>(),
                      j.at("pv").get<std::vector<double>>());
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return table;
}

PvTable extract_pv_table(const std::vector<RerankRecord>& records, PretrainParams& params) {
    PvTable table;
    for (const RerankRecord& r : records) {
        Tape tape;
        PretrainBound bound = PretrainBound::bind(tape, params);
        Node* rep = user_representation(tape, r.user, r.history, bound, params);
        for (const ItemEntry& item : r.items) {
            PretrainForward fwd = pretrain_forward(tape, rep, item, bound, params, false);
            table.put(r.request_id, item.item_id, fwd.pv->value.data);
        }
    }
    return table;
}

// --- Checkpoint -----------------------------------------------------------------

namespace {

json pretrain_config_to_json(const PretrainConfig& c) {
    return json{{"d_emb", c.d_emb},         {"hidden", c.hidden},
                {"d_feature", c.d_feature}, {"gender_vocab", c.gender_vocab},
                {"age_vocab", c.age_vocab}, {"purchase_vocab", c.purchase_vocab}};
}

PretrainConfig pretrain_config_from_json(const json& j) {
    PretrainConfig c;
    c.d_emb = j.at("d_emb").get<int>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.d_feature = j.at("d_feature").get<int>();
    c.gender_vocab = j.at("gender_vocab").get<int>();
    c.age_vocab = j.at("age_vocab").get<int>();
    c.purchase_vocab = j.at("purchase_vocab").get<int>();
    return c;
}

}  // namespace

void save_pretrain_checkpoint(const std::filesystem::path& path,
                              const PretrainParams& params) {
    PretrainParams& mutable_params = const_cast<PretrainParams&>(params);
    detail::save_checkpoint_file(path, "pretrain", pretrain_config_to_json(params.config),
                                 mutable_params.refs(),
                                 json{{"item_vocab", params.item_vocab.ids()}});
}

PretrainParams load_pretrain_checkpoint(const std::filesystem::path& path) {
    const json doc = detail::load_checkpoint_file(path, "pretrain");
    PretrainConfig config = pretrain_config_from_json(doc.at("config"));
    Vocab vocab(doc.at("item_vocab").get<std::vector<std::string>>());
    Rng rng(0);
    PretrainParams params = PretrainParams::init(config, vocab, rng);
    detail::restore_tensors(doc, params.refs());
    return params;
}

}  // namespace prm
