#pragma once

// Internal JSON helpers shared by the data, checkpoint, and serve code.
// Not installed.

#include <nlohmann/json.hpp>

#include "prm/data.hpp"
#include "prm/tensor.hpp"

namespace prm::detail {

using json = nlohmann::json;

json user_to_json(const UserProfile& u);
UserProfile user_from_json(const json& j);

json item_to_json(const ItemEntry& item);
/// "label" is optional (defaults to 0) so score-only requests validate.
ItemEntry item_from_json(const json& j);

json rerank_to_json(const RerankRecord& r);
RerankRecord rerank_from_json(const json& j);

json pretrain_to_json(const PretrainRecord& r);
PretrainRecord pretrain_from_json(const json& j);

json tensor_to_json(const Tensor2& t);
Tensor2 tensor_from_json(const json& j);

json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const json& j);

}  // namespace prm::detail
