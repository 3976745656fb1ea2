#include "prm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/rng.hpp"
#include "prm/util.hpp"

namespace prm {

using detail::json;

namespace detail {

json user_to_json(const UserProfile& u) {
    return json{{"user_id", u.user_id},
                {"gender", u.gender},
                {"age_bucket", u.age_bucket},
                {"purchase_level", u.purchase_level}};
}

UserProfile user_from_json(const json& j) {
    UserProfile u;
    u.user_id = j.at("user_id").get<std::string>();
    u.gender = j.at("gender").get<int>();
    u.age_bucket = j.at("age_bucket").get<int>();
    u.purchase_level = j.at("purchase_level").get<int>();
    return u;
}

json item_to_json(const ItemEntry& item) {
    return json{{"item_id", item.item_id},
                {"category", item.category},
                {"price_level", item.price_level},
                {"features", item.features},
                {"label", item.label}};
}

ItemEntry item_from_json(const json& j) {
    ItemEntry item;
    item.item_id = j.at("item_id").get<std::string>();
    item.category = j.value("category", 0);
    item.price_level = j.value("price_level", 1);
    item.features = j.at("features").get<std::vector<double>>();
    item.label = j.value("label", 0);
    return item;
}

json rerank_to_json(const RerankRecord& r) {
    json items = json::array();
    for (const ItemEntry& item : r.items) {
        items.push_back(item_to_json(item));
    }
    return json{{"request_id", r.request_id},
                {"user", user_to_json(r.user)},
                {"history", r.history},
                {"items", std::move(items)}};
}

RerankRecord rerank_from_json(const json& j) {
    RerankRecord r;
    r.request_id = j.at("request_id").get<std::string>();
    if (j.contains("user")) {
        r.user = user_from_json(j.at("user"));
    }
    if (j.contains("history")) {
        r.history = j.at("history").get<std::vector<std::string>>();
    }
    for (const json& item : j.at("items")) {
        r.items.push_back(item_from_json(item));
    }
    return r;
}

json pretrain_to_json(const PretrainRecord& r) {
    return json{{"user", user_to_json(r.user)},
                {"history", r.history},
                {"item", item_to_json(r.item)}};
}

PretrainRecord pretrain_from_json(const json& j) {
    PretrainRecord r;
    r.user = user_from_json(j.at("user"));
    if (j.contains("history")) {
        r.history = j.at("history").get<std::vector<std::string>>();
    }
    r.item = item_from_json(j.at("item"));
    return r;
}

json tensor_to_json(const Tensor2& t) {
    return json{{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}};
}

Tensor2 tensor_from_json(const json& j) {
    return Tensor2(j.at("rows").get<int>(), j.at("cols").get<int>(),
                   j.at("data").get<std::vector<double>>());
}

json manifest_to_json(const DatasetManifest& m) {
    return json{{"d_feature", m.d_feature},
                {"n_max", m.n_max},
                {"item_vocab", m.item_vocab},
                {"category_vocab", m.category_vocab},
                {"price_vocab", m.price_vocab},
                {"gender_vocab", m.gender_vocab},
                {"age_vocab", m.age_vocab},
                {"purchase_vocab", m.purchase_vocab},
                {"num_records", m.num_records}};
}

DatasetManifest manifest_from_json(const json& j) {
    DatasetManifest m;
    m.d_feature = j.at("d_feature").get<int>();
    m.n_max = j.at("n_max").get<int>();
    m.item_vocab = j.at("item_vocab").get<int>();
    m.category_vocab = j.at("category_vocab").get<int>();
    m.price_vocab = j.at("price_vocab").get<int>();
    m.gender_vocab = j.at("gender_vocab").get<int>();
    m.age_vocab = j.at("age_vocab").get<int>();
    m.purchase_vocab = j.at("purchase_vocab").get<int>();
    m.num_records = j.at("num_records").get<long>();
    return m;
}

}  // namespace detail

namespace {

std::string format_id(const char* prefix, int value) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%06d", prefix, value);
    return buf;
}

void validate_item(const ItemEntry& item, const DatasetManifest& m, long line) {
    if (static_cast<int>(item.features.size()) != m.d_feature) {
        throw ParseError("item '" + item.item_id + "' has " +
                             std::to_string(item.features.size()) +
                             " features but the manifest declares d_feature=" +
                             std::to_string(m.d_feature),
                         line);
    }
    if (item.label != 0 && item.label != 1) {
        throw ParseError("field 'label' must be 0 or 1", line);
    }
    if (item.category < 0 || item.category >= m.category_vocab) {
        throw ParseError("field 'category' value " + std::to_string(item.category) +
                             " outside vocabulary of size " +
                             std::to_string(m.category_vocab),
                         line);
    }
    if (item.price_level < 1 || item.price_level > m.price_vocab) {
        throw ParseError("field 'price_level' value " + std::to_string(item.price_level) +
                             " outside 1.." + std::to_string(m.price_vocab),
                         line);
    }
}

void validate_user(const UserProfile& u, const DatasetManifest& m, long line) {
    if (u.gender < 0 || u.gender >= m.gender_vocab) {
        throw ParseError("field 'gender' value " + std::to_string(u.gender) +
                             " outside vocabulary of size " + std::to_string(m.gender_vocab),
                         line);
    }
    if (u.age_bucket < 0 || u.age_bucket >= m.age_vocab) {
        throw ParseError("field 'age_bucket' value " + std::to_string(u.age_bucket) +
                             " outside vocabulary of size " + std::to_string(m.age_vocab),
                         line);
    }
    if (u.purchase_level < 0 || u.purchase_level >= m.purchase_vocab) {
        throw ParseError("field 'purchase_level' value " + std::to_string(u.purchase_level) +
                             " outside vocabulary of size " +
                             std::to_string(m.purchase_vocab),
                         line);
    }
}

// Reads every nonempty line of a JSONL file, reporting parse failures with
// their 1-based line number.
std::vector<std::pair<long, json>> read_json_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open file: " + path.string());
    }
    std::vector<std::pair<long, json>> out;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            out.emplace_back(line_no, json::parse(line));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

template <typename Record>
void grow_vocab(DatasetManifest& m, const Record&);

void grow_vocab_user(DatasetManifest& m, const UserProfile& u) {
    m.gender_vocab = std::max(m.gender_vocab, u.gender + 1);
    m.age_vocab = std::max(m.age_vocab, u.age_bucket + 1);
    m.purchase_vocab = std::max(m.purchase_vocab, u.purchase_level + 1);
}

void grow_vocab_item(DatasetManifest& m, const ItemEntry& item) {
    m.category_vocab = std::max(m.category_vocab, item.category + 1);
    m.price_vocab = std::max(m.price_vocab, item.price_level);
}

}  // namespace

std::filesystem::path manifest_path_for(const std::filesystem::path& data_path) {
    std::filesystem::path p = data_path;
    p += ".manifest.json";
    return p;
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
    try {
        return detail::manifest_from_json(json::parse(read_file(manifest_path)));
    } catch (const json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }
}

void write_manifest(const std::filesystem::path& manifest_path, const DatasetManifest& m) {
    write_file(manifest_path, detail::manifest_to_json(m).dump() + "\n");
}

DatasetManifest build_manifest(const std::vector<RerankRecord>& records, int n_max) {
    DatasetManifest m;
    m.n_max = n_max;
    m.num_records = static_cast<long>(records.size());
    std::vector<std::string> seen_items;
    for (const RerankRecord& r : records) {
        grow_vocab_user(m, r.user);
        for (const ItemEntry& item : r.items) {
            if (m.d_feature == 0) {
                m.d_feature = static_cast<int>(item.features.size());
            }
            grow_vocab_item(m, item);
            seen_items.push_back(item.item_id);
        }
    }
    std::sort(seen_items.begin(), seen_items.end());
    seen_items.erase(std::unique(seen_items.begin(), seen_items.end()), seen_items.end());
    m.item_vocab = static_cast<int>(seen_items.size());
    m.price_vocab = std::max(m.price_vocab, 1);
    m.category_vocab = std::max(m.category_vocab, 1);
    m.gender_vocab = std::max(m.gender_vocab, 1);
    m.age_vocab = std::max(m.age_vocab, 1);
    m.purchase_vocab = std::max(m.purchase_vocab, 1);
    return m;
}

DatasetManifest build_manifest(const std::vector<PretrainRecord>& records, int n_max) {
    DatasetManifest m;
    m.n_max = n_max;
    m.num_records = static_cast<long>(records.size());
    std::vector<std::string> seen_items;
    for (const PretrainRecord& r : records) {
        grow_vocab_user(m, r.user);
        if (m.d_feature == 0) {
            m.d_feature = static_cast<int>(r.item.features.size());
        }
        grow_vocab_item(m, r.item);
        seen_items.push_back(r.item.item_id);
        for (const std::string& h : r.history) {
            seen_items.push_back(h);
        }
    }
    std::sort(seen_items.begin(), seen_items.end());
    seen_items.erase(std::unique(seen_items.begin(), seen_items.end()), seen_items.end());
    m.item_vocab = static_cast<int>(seen_items.size());
    m.price_vocab = std::max(m.price_vocab, 1);
    m.category_vocab = std::max(m.category_vocab, 1);
    m.gender_vocab = std::max(m.gender_vocab, 1);
    m.age_vocab = std::max(m.age_vocab, 1);
    m.purchase_vocab = std::max(m.purchase_vocab, 1);
    return m;
}

std::vector<RerankRecord> parse_rerank(const std::filesystem::path& path,
                                       DatasetManifest* manifest_out) {
    std::vector<RerankRecord> records;
    std::vector<long> lines;
    for (const auto& [line_no, j] : read_json_lines(path)) {
        try {
            records.push_back(detail::rerank_from_json(j));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        lines.push_back(line_no);
    }

    const std::filesystem::path mpath = manifest_path_for(path);
    DatasetManifest manifest = std::filesystem::exists(mpath)
                                   ? read_manifest(mpath)
                                   : build_manifest(records, DatasetManifest{}.n_max);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const RerankRecord& r = records[i];
        const long line_no = lines[i];
        if (r.items.empty()) {
            throw ParseError("record '" + r.request_id + "' has no items", line_no);
        }
        if (static_cast<int>(r.items.size()) > manifest.n_max) {
            throw ParseError("record '" + r.request_id + "' has " +
                                 std::to_string(r.items.size()) +
                                 " items but the manifest declares n_max=" +
                                 std::to_string(manifest.n_max),
                             line_no);
        }
        validate_user(r.user, manifest, line_no);
        for (const ItemEntry& item : r.items) {
            validate_item(item, manifest, line_no);
        }
    }
    if (manifest_out != nullptr) {
        *manifest_out = manifest;
    }
    return records;
}

std::vector<PretrainRecord> parse_pretrain(const std::filesystem::path& path,
                                           DatasetManifest* manifest_out) {
    std::vector<PretrainRecord> records;
    std::vector<long> lines;
    for (const auto& [line_no, j] : read_json_lines(path)) {
        try {
            records.push_back(detail::pretrain_from_json(j));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
        lines.push_back(line_no);
    }
    const std::filesystem::path mpath = manifest_path_for(path);
    DatasetManifest manifest = std::filesystem::exists(mpath)
                                   ? read_manifest(mpath)
                                   : build_manifest(records, DatasetManifest{}.n_max);
    for (std::size_t i = 0; i < records.size(); ++i) {
        validate_user(records[i].user, manifest, lines[i]);
        validate_item(records[i].item, manifest, lines[i]);
    }
    if (manifest_out != nullptr) {
        *manifest_out = manifest;
    }
    return records;
}

void write_rerank(const std::filesystem::path& path, const std::vector<RerankRecord>& records,
                  const DatasetManifest& manifest) {
    std::ostringstream out;
    for (const RerankRecord& r : records) {
        out << detail::rerank_to_json(r).dump() << "\n";
    }
    write_file(path, out.str());
    DatasetManifest m = manifest;
    m.num_records = static_cast<long>(records.size());
    write_manifest(manifest_path_for(path), m);
}

void write_pretrain(const std::filesystem::path& path,
                    const std::vector<PretrainRecord>& records,
                    const DatasetManifest& manifest) {
    std::ostringstream out;
    for (const PretrainRecord& r : records) {
        out << detail::pretrain_to_json(r).dump() << "\n";
    }
    write_file(path, out.str());
    DatasetManifest m = manifest;
    m.num_records = static_cast<long>(records.size());
    write_manifest(manifest_path_for(path), m);
}

// --- Letor-style conversion --------------------------------------------------

std::vector<GradedRecord> parse_graded(const std::filesystem::path& path) {
    std::vector<GradedRecord> records;
    for (const auto& [line_no, j] : read_json_lines(path)) {
        try {
            GradedRecord r;
            r.request_id = j.at("request_id").get<std::string>();
            if (j.contains("user")) {
                r.user = detail::user_from_json(j.at("user"));
            }
            if (j.contains("history")) {
                r.history = j.at("history").get<std::vector<std::string>>();
            }
            for (const json& ji : j.at("items")) {
                GradedItem item;
                item.item_id = ji.at("item_id").get<std::string>();
                item.category = ji.value("category", 0);
                item.price_level = ji.value("price_level", 1);
                item.features = ji.at("features").get<std::vector<double>>();
                item.relevance = ji.at("relevance").get<int>();
                if (item.relevance < 0 || item.relevance > 4) {
                    throw ParseError("field 'relevance' must be in 0..4", line_no);
                }
                r.items.push_back(std::move(item));
            }
            records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return records;
}

double view_probability(int position, double eta) {
    if (position < 1) {
        throw ConfigError("view_probability: position must be >= 1");
    }
    if (eta < 0.0) {
        throw ConfigError("view_probability: eta must be >= 0");
    }
    return std::pow(static_cast<double>(position), -eta);
}

std::vector<RerankRecord> convert_letor(const std::vector<GradedRecord>& graded, double t_b,
                                        double eta, std::uint64_t seed) {
    if (eta < 0.0) {
        throw ConfigError("convert_letor: eta must be >= 0, got " + std::to_string(eta));
    }
    if (t_b < 0.0 || t_b > 4.0) {
        throw ConfigError("convert_letor: t_b must be in [0, 4], got " + std::to_string(t_b));
    }
    Rng rng(seed);
    std::vector<RerankRecord> out;
    out.reserve(graded.size());
    for (const GradedRecord& g : graded) {
        RerankRecord r;
        r.request_id = g.request_id;
        r.user = g.user;
        r.history = g.history;
        r.items.reserve(g.items.size());
        for (std::size_t idx = 0; idx < g.items.size(); ++idx) {
            const GradedItem& gi = g.items[idx];
            const bool viewed = rng.bernoulli(view_probability(static_cast<int>(idx) + 1, eta));
            ItemEntry item;
            item.item_id = gi.item_id;
            item.category = gi.category;
            item.price_level = gi.price_level;
            item.features = gi.features;
            item.label = (viewed && static_cast<double>(gi.relevance) > t_b) ? 1 : 0;
            r.items.push_back(std::move(item));
        }
        out.push_back(std::move(r));
    }
    return out;
}

// --- Synthetic data ----------------------------------------------------------

void SynthSpec::validate() const {
    if (num_train_requests < 0 || num_test_requests < 0 || num_pretrain < 0) {
        throw ConfigError("synth: request counts must be >= 0");
    }
    if (d_cont < 1 || num_categories < 1 || num_price_levels < 1) {
        throw ConfigError("synth: d_cont, num_categories, num_price_levels must be >= 1");
    }
    if (d_feature() < 2) {
        throw ConfigError("synth: d_feature must be >= 2");
    }
    if (list_len_min < 1 || list_len_max < list_len_min) {
        throw ConfigError("synth: need 1 <= list_len_min <= list_len_max");
    }
    if (list_len_max > n_max) {
        throw ConfigError("synth: list_len_max exceeds n_max");
    }
    if (num_items < list_len_max) {
        throw ConfigError("synth: num_items must be >= list_len_max");
    }
    if (num_users < 1) {
        throw ConfigError("synth: num_users must be >= 1");
    }
    if (gender_vocab < 1 || age_vocab < 1 || purchase_vocab < 1) {
        throw ConfigError("synth: profile vocabularies must be >= 1");
    }
    if (view_decay_eta < 0.0) {
        throw ConfigError("synth: view_decay_eta must be >= 0");
    }
    if (interaction_scale < 0.0 || personalization_scale < 0.0) {
        throw ConfigError("synth: signal scales must be >= 0");
    }
}

namespace {

struct CatalogItem {
    std::string item_id;
    int category = 0;
    int price_level = 1;
    std::vector<double> features;
};

struct SynthWorld {
    std::vector<CatalogItem> items;
    std::vector<UserProfile> users;
    std::vector<std::vector<std::string>> histories;  // per user
    SynthGroundTruth truth;
};

std::vector<double> make_features(const SynthSpec& spec, int category, int price_level,
                                  Rng& rng) {
    std::vector<double> f(static_cast<std::size_t>(spec.d_feature()), 0.0);
    for (int i = 0; i < spec.d_cont; ++i) {
        f[static_cast<std::size_t>(i)] = rng.normal();
    }
    f[static_cast<std::size_t>(spec.d_cont + category)] = 1.0;
    f[static_cast<std::size_t>(spec.d_cont + spec.num_categories + price_level - 1)] = 1.0;
    return f;
}

double dot(const Tensor2& row, const std::vector<double>& v) {
    double acc = 0.0;
    for (int j = 0; j < row.cols; ++j) {
        acc += row.at(0, j) * v[static_cast<std::size_t>(j)];
    }
    return acc;
}

double dot_vec(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

SynthWorld plant_world(const SynthSpec& spec, std::uint64_t seed) {
    SynthWorld w;
    Rng catalog_rng = Rng(seed).fork(1);
    Rng user_rng = Rng(seed).fork(2);
    Rng plant_rng = Rng(seed).fork(3);

    w.items.reserve(static_cast<std::size_t>(spec.num_items));
    for (int i = 0; i < spec.num_items; ++i) {
        CatalogItem item;
        item.item_id = format_id("i", i);
        item.category = catalog_rng.uniform_int(0, spec.num_categories - 1);
        item.price_level = catalog_rng.uniform_int(1, spec.num_price_levels);
        item.features = make_features(spec, item.category, item.price_level, catalog_rng);
        w.items.push_back(std::move(item));
    }

    w.users.reserve(static_cast<std::size_t>(spec.num_users));
    for (int u = 0; u < spec.num_users; ++u) {
        UserProfile p;
        p.user_id = format_id("u", u);
        p.gender = user_rng.uniform_int(0, spec.gender_vocab - 1);
        p.age_bucket = user_rng.uniform_int(0, spec.age_vocab - 1);
        p.purchase_level = user_rng.uniform_int(0, spec.purchase_vocab - 1);
        w.users.push_back(std::move(p));
        const int hist_len = spec.history_len_max > 0
                                 ? user_rng.uniform_int(0, spec.history_len_max)
                                 : 0;
        std::vector<std::string> history;
        for (int h = 0; h < hist_len; ++h) {
            history.push_back(w.items[static_cast<std::size_t>(user_rng.uniform_int(
                                           0, spec.num_items - 1))]
                                  .item_id);
        }
        w.histories.push_back(std::move(history));
    }

    SynthGroundTruth& t = w.truth;
    t.position_penalty_scale = spec.position_penalty_scale;
    t.click_bias = spec.click_bias;
    // Pointwise signal lives on the continuous block only, so the one-hot
    // blocks carry nothing the pointwise order can use.
    t.weights = Tensor2::zeros(1, spec.d_feature());
    for (int j = 0; j < spec.d_cont; ++j) {
        t.weights.at(0, j) = plant_rng.normal();
    }
    // Disjoint high-affinity category pairs (0,1), (2,3), ...; everything
    // else, including the diagonal, has zero affinity.
    t.affinity = Tensor2::zeros(spec.num_categories, spec.num_categories);
    for (int k = 0; 2 * k + 1 < spec.num_categories; ++k) {
        t.affinity.at(2 * k, 2 * k + 1) = spec.interaction_scale;
        t.affinity.at(2 * k + 1, 2 * k) = spec.interaction_scale;
    }
    t.gender_pref = Tensor2::randn(spec.gender_vocab, spec.d_feature(), plant_rng,
                                   spec.personalization_scale);
    t.age_pref = Tensor2::randn(spec.age_vocab, spec.d_feature(), plant_rng,
                                spec.personalization_scale);
    t.purchase_pref = Tensor2::randn(spec.purchase_vocab, spec.d_feature(), plant_rng,
                                     spec.personalization_scale);
    return w;
}

std::vector<double> user_pref_vector(const SynthGroundTruth& t, const UserProfile& u) {
    std::vector<double> pref(static_cast<std::size_t>(t.weights.cols), 0.0);
    for (int j = 0; j < t.weights.cols; ++j) {
        pref[static_cast<std::size_t>(j)] = t.gender_pref.at(u.gender, j) +
                                            t.age_pref.at(u.age_bucket, j) +
                                            t.purchase_pref.at(u.purchase_level, j);
    }
    return pref;
}

RerankRecord make_request(const SynthSpec& spec, const SynthWorld& w, const std::string& rid,
                          Rng& rng, SynthGroundTruth::RequestTruth& truth_out) {
    const SynthGroundTruth& t = w.truth;
    const int uidx = rng.uniform_int(0, spec.num_users - 1);
    const UserProfile& user = w.users[static_cast<std::size_t>(uidx)];
    const std::vector<double> pref = user_pref_vector(t, user);

    const int n = rng.uniform_int(spec.list_len_min, spec.list_len_max);
    // Sample n distinct catalog items.
    std::vector<int> pool(static_cast<std::size_t>(spec.num_items));
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(n));

    // Initial order: descending pointwise score, the strongest ranking a
    // feature-only model could produce.
    std::vector<double> base(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        base[static_cast<std::size_t>(i)] =
            dot(t.weights, w.items[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])]
                               .features);
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return base[static_cast<std::size_t>(a)] > base[static_cast<std::size_t>(b)];
    });

    std::vector<const CatalogItem*> list(static_cast<std::size_t>(n));
    std::vector<double> list_base(static_cast<std::size_t>(n));
    for (int pos = 0; pos < n; ++pos) {
        const int local = order[static_cast<std::size_t>(pos)];
        list[static_cast<std::size_t>(pos)] =
            &w.items[static_cast<std::size_t>(pool[static_cast<std::size_t>(local)])];
        list_base[static_cast<std::size_t>(pos)] = base[static_cast<std::size_t>(local)];
    }

    // Latent view set: top-down impression decay over initial positions.
    std::vector<bool> viewed(static_cast<std::size_t>(n), false);
    for (int pos = 0; pos < n; ++pos) {
        viewed[static_cast<std::size_t>(pos)] =
            rng.bernoulli(view_probability(pos + 1, spec.view_decay_eta));
    }

    RerankRecord record;
    record.request_id = rid;
    record.user = user;
    record.history = w.histories[static_cast<std::size_t>(uidx)];
    truth_out.request_id = rid;

    for (int pos = 0; pos < n; ++pos) {
        const CatalogItem& ci = *list[static_cast<std::size_t>(pos)];
        double interaction = 0.0;
        for (int other = 0; other < n; ++other) {
            if (other != pos && viewed[static_cast<std::size_t>(other)]) {
                interaction += t.affinity.at(
                    ci.category, list[static_cast<std::size_t>(other)]->category);
            }
        }
        const double personalized = dot_vec(pref, ci.features);
        const double logit = t.click_bias + list_base[static_cast<std::size_t>(pos)] +
                             personalized + interaction -
                             t.position_penalty_scale * std::log(pos + 1.0);
        const double p = sigmoid(logit);

        ItemEntry item;
        item.item_id = ci.item_id;
        item.category = ci.category;
        item.price_level = ci.price_level;
        item.features = ci.features;
        item.label = rng.bernoulli(p) ? 1 : 0;
        record.items.push_back(std::move(item));
        truth_out.true_p.push_back(p);
        truth_out.base_score.push_back(list_base[static_cast<std::size_t>(pos)]);
    }
    return record;
}

}  // namespace

SynthDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    SynthDataset ds;
    SynthWorld world = plant_world(spec, seed);

    Rng request_rng = Rng(seed).fork(4);
    int rid = 0;
    for (int i = 0; i < spec.num_train_requests; ++i) {
        SynthGroundTruth::RequestTruth truth;
        ds.train.push_back(make_request(spec, world, format_id("r", rid++), request_rng, truth));
        world.truth.requests.push_back(std::move(truth));
    }
    for (int i = 0; i < spec.num_test_requests; ++i) {
        SynthGroundTruth::RequestTruth truth;
        ds.test.push_back(make_request(spec, world, format_id("r", rid++), request_rng, truth));
        world.truth.requests.push_back(std::move(truth));
    }

    Rng pretrain_rng = Rng(seed).fork(5);
    for (int i = 0; i < spec.num_pretrain; ++i) {
        const int uidx = pretrain_rng.uniform_int(0, spec.num_users - 1);
        const int iidx = pretrain_rng.uniform_int(0, spec.num_items - 1);
        const UserProfile& user = world.users[static_cast<std::size_t>(uidx)];
        const CatalogItem& ci = world.items[static_cast<std::size_t>(iidx)];
        const std::vector<double> pref = user_pref_vector(world.truth, user);
        const double logit = world.truth.click_bias +
                             dot(world.truth.weights, ci.features) +
                             dot_vec(pref, ci.features);
        PretrainRecord r;
        r.user = user;
        r.history = world.histories[static_cast<std::size_t>(uidx)];
        r.item.item_id = ci.item_id;
        r.item.category = ci.category;
        r.item.price_level = ci.price_level;
        r.item.features = ci.features;
        r.item.label = pretrain_rng.bernoulli(sigmoid(logit)) ? 1 : 0;
        ds.pretrain.push_back(std::move(r));
    }

    ds.manifest.d_feature = spec.d_feature();
    ds.manifest.n_max = spec.n_max;
    ds.manifest.item_vocab = spec.num_items;
    ds.manifest.category_vocab = spec.num_categories;
    ds.manifest.price_vocab = spec.num_price_levels;
    ds.manifest.gender_vocab = spec.gender_vocab;
    ds.manifest.age_vocab = spec.age_vocab;
    ds.manifest.purchase_vocab = spec.purchase_vocab;
    ds.truth = std::move(world.truth);
    return ds;
}

std::vector<std::filesystem::path> write_synth_dataset(const std::filesystem::path& dir,
                                                       const SynthDataset& ds) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;

    const auto train_path = dir / "train.jsonl";
    write_rerank(train_path, ds.train, ds.manifest);
    written.push_back(train_path);

    const auto test_path = dir / "test.jsonl";
    write_rerank(test_path, ds.test, ds.manifest);
    written.push_back(test_path);

    const auto pretrain_path = dir / "pretrain.jsonl";
    write_pretrain(pretrain_path, ds.pretrain, ds.manifest);
    written.push_back(pretrain_path);

    json truth{{"weights", detail::tensor_to_json(ds.truth.weights)},
               {"affinity", detail::tensor_to_json(ds.truth.affinity)},
               {"gender_pref", detail::tensor_to_json(ds.truth.gender_pref)},
               {"age_pref", detail::tensor_to_json(ds.truth.age_pref)},
               {"purchase_pref", detail::tensor_to_json(ds.truth.purchase_pref)},
               {"position_penalty_scale", ds.truth.position_penalty_scale},
               {"click_bias", ds.truth.click_bias}};
    json requests = json::array();
    for (const auto& r : ds.truth.requests) {
        requests.push_back(json{{"request_id", r.request_id},
                                {"true_p", r.true_p},
                                {"base_score", r.base_score}});
    }
    truth["requests"] = std::move(requests);
    const auto truth_path = dir / "ground_truth.json";
    write_file(truth_path, truth.dump() + "\n");
    written.push_back(truth_path);
    return written;
}

SynthGroundTruth read_ground_truth(const std::filesystem::path& path) {
    try {
        const json j = json::parse(read_file(path));
        SynthGroundTruth t;
        t.weights = detail::tensor_from_json(j.at("weights"));
        t.affinity = detail::tensor_from_json(j.at("affinity"));
        t.gender_pref = detail::tensor_from_json(j.at("gender_pref"));
        t.age_pref = detail::tensor_from_json(j.at("age_pref"));
        t.purchase_pref = detail::tensor_from_json(j.at("purchase_pref"));
        t.position_penalty_scale = j.at("position_penalty_scale").get<double>();
        t.click_bias = j.at("click_bias").get<double>();
        for (const json& jr : j.at("requests")) {
            SynthGroundTruth::RequestTruth r;
            r.request_id = jr.at("request_id").get<std::string>();
            r.true_p = jr.at("true_p").get<std::vector<double>>();
            r.base_score = jr.at("base_score").get<std::vector<double>>();
            t.requests.push_back(std::move(r));
        }
        return t;
    } catch (const json::exception& e) {
        throw ParseError(std::string("ground truth: ") + e.what());
    }
}

// --- Batching ----------------------------------------------------------------

PaddedList pad_record(const RerankRecord& record, int n_max) {
    const int n = static_cast<int>(record.items.size());
    if (n > n_max) {
        throw ShapeError("pad_record: list of " + std::to_string(n) + " items exceeds n_max=" +
                         std::to_string(n_max));
    }
    if (n == 0) {
        throw ShapeError("pad_record: empty item list");
    }
    const int d = static_cast<int>(record.items.front().features.size());
    PaddedList p;
    p.features = Tensor2::zeros(n_max, d);
    p.mask.assign(static_cast<std::size_t>(n_max), 0);
    p.labels.assign(static_cast<std::size_t>(n_max), 0);
    for (int i = 0; i < n; ++i) {
        const ItemEntry& item = record.items[static_cast<std::size_t>(i)];
        if (static_cast<int>(item.features.size()) != d) {
            throw ShapeError("pad_record: mixed feature lengths in one list");
        }
        for (int j = 0; j < d; ++j) {
            p.features.at(i, j) = item.features[static_cast<std::size_t>(j)];
        }
        p.mask[static_cast<std::size_t>(i)] = 1;
        p.labels[static_cast<std::size_t>(i)] = item.label;
    }
    return p;
}

BatchIter::BatchIter(std::size_t num_records, int batch_size, std::uint64_t shuffle_seed)
    : num_records_(num_records), batch_size_(batch_size), seed_(shuffle_seed) {
    if (batch_size < 1) {
        throw ConfigError("batch_iter: batch_size must be >= 1");
    }
    reset(0);
}

bool BatchIter::next(std::vector<std::size_t>& out) {
    out.clear();
    if (cursor_ >= order_.size()) {
        return false;
    }
    const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return true;
}

void BatchIter::reset(std::uint64_t epoch) {
    order_.resize(num_records_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng = Rng(seed_).fork(epoch + 1);
    rng.shuffle(order_);
    cursor_ = 0;
}

}  // namespace prm
