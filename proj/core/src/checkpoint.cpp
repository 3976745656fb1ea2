#include "checkpoint_io.hpp"

#include "json_io.hpp"
#include "prm/errors.hpp"
#include "prm/util.hpp"

namespace prm::detail {

void save_checkpoint_file(const std::filesystem::path& path, const std::string& kind,
                          const nlohmann::json& config, const std::vector<ParamRef>& refs,
                          const nlohmann::json& extra) {
    json tensors = json::object();
    for (const ParamRef& ref : refs) {
        tensors[ref.name] = tensor_to_json(*ref.tensor);
    }
    json doc{{"format_version", kCheckpointVersion},
             {"model", kind},
             {"config", config},
             {"tensors", std::move(tensors)}};
    for (const auto& [key, value] : extra.items()) {
        doc[key] = value;
    }
    write_file(path, doc.dump() + "\n");
}

nlohmann::json load_checkpoint_file(const std::filesystem::path& path,
                                    const std::string& kind) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    const int version = doc.value("format_version", -1);
    if (version != kCheckpointVersion) {
        throw ConfigError("checkpoint " + path.string() + ": unsupported format_version " +
                          std::to_string(version));
    }
    const std::string model = doc.value("model", "");
    if (model != kind) {
        throw ConfigError("checkpoint " + path.string() + ": model kind '" + model +
                          "', expected '" + kind + "'");
    }
    return doc;
}

void restore_tensors(const nlohmann::json& doc, const std::vector<ParamRef>& refs) {
    const json& tensors = doc.at("tensors");
    if (tensors.size() != refs.size()) {
        throw ConfigError("checkpoint holds " + std::to_string(tensors.size()) +
                          " tensors, model expects " + std::to_string(refs.size()));
    }
    for (const ParamRef& ref : refs) {
        if (!tensors.contains(ref.name)) {
            throw ConfigError("checkpoint is missing tensor '" + ref.name + "'");
        }
        Tensor2 loaded = tensor_from_json(tensors.at(ref.name));
        if (!loaded.same_shape(*ref.tensor)) {
            throw ConfigError("checkpoint tensor '" + ref.name + "' has shape " +
                              loaded.shape_str() + ", expected " + ref.tensor->shape_str());
        }
        *ref.tensor = std::move(loaded);
    }
}

}  // namespace prm::detail
