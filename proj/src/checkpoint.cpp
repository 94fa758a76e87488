#include "detox/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "detox/errors.hpp"

namespace detox {

using nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from_json(const json& j, const std::string& name) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
    throw ValidationError("checkpoint: tensor '" + name + "' must have shape and data");
  }
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},     {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

void assign_named(TransformerWeights& w, const json& tensors) {
  // Start from a correctly-shaped skeleton and overwrite every entry by name.
  auto named = w.named_parameters();
  for (auto& [name, t] : named) {
    if (!tensors.contains(name)) throw ValidationError("checkpoint: missing tensor '" + name + "'");
    Tensor loaded = tensor_from_json(tensors.at(name), name);
    if (loaded.shape() != t.shape()) {
      throw ShapeError("checkpoint: tensor '" + name + "' has shape " + shape_str(loaded.shape()) +
                       ", expected " + shape_str(t.shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
  }
  if (tensors.size() != named.size()) {
    throw ValidationError("checkpoint: unexpected extra tensors in weights");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const TransformerWeights* weights, const LoraAdapter* adapter) {
  json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  doc["config"] = config_to_json(config);
  if (weights) {
    json tensors = json::object();
    for (const auto& [name, t] : weights->named_parameters()) tensors[name] = tensor_to_json(t);
    doc["weights"] = std::move(tensors);
    doc["merged_adapters"] = weights->merged_adapters;
  }
  if (adapter) {
    json a;
    a["rank"] = adapter->rank;
    a["alpha"] = adapter->alpha;
    json targets = json::array();
    for (Projection p : adapter->targets) targets.push_back(projection_name(p));
    a["targets"] = targets;
    json slots = json::array();
    for (const auto& s : adapter->slots) {
      slots.push_back(json{{"block", s.block},
                           {"target", projection_name(s.target)},
                           {"a", tensor_to_json(s.a)},
                           {"b", tensor_to_json(s.b)}});
    }
    a["slots"] = std::move(slots);
    doc["adapter"] = std::move(a);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("checkpoint: cannot write " + path.string());
  out << doc.dump() << '\n';
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("checkpoint: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("checkpoint: " + path.string() + ": " + e.what());
  }
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw ValidationError("checkpoint: unsupported format_version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.config = config_from_json(doc.at("config"));
    if (doc.contains("weights")) {
      TransformerWeights w = TransformerWeights::init(ck.config, 0);
      assign_named(w, doc.at("weights"));
      w.merged_adapters = doc.value("merged_adapters", 0);
      w.validate();
      ck.weights = std::move(w);
    }
    if (doc.contains("adapter")) {
      const json& a = doc.at("adapter");
      LoraAdapter adapter;
      adapter.rank = a.at("rank").get<std::size_t>();
      adapter.alpha = a.at("alpha").get<double>();
      for (const auto& t : a.at("targets")) adapter.targets.push_back(projection_from_name(t.get<std::string>()));
      for (const auto& s : a.at("slots")) {
        LoraSlot slot;
        slot.block = s.at("block").get<std::size_t>();
        slot.target = projection_from_name(s.at("target").get<std::string>());
        slot.a = tensor_from_json(s.at("a"), "adapter.a");
        slot.b = tensor_from_json(s.at("b"), "adapter.b");
        adapter.slots.push_back(std::move(slot));
      }
      adapter.validate_against(ck.config);
      ck.adapter = std::move(adapter);
    }
    return ck;
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint: " + path.string() + ": " + e.what());
  }
}

TransformerWeights load_weights(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.weights) throw ValidationError("checkpoint: " + path.string() + " holds no base weights");
  return std::move(*ck.weights);
}

LoraAdapter load_adapter(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.adapter) throw ValidationError("checkpoint: " + path.string() + " holds no adapter");
  if (!(ck.config == expected)) {
    throw ShapeError("checkpoint: adapter " + path.string() + " was built for a different model config");
  }
  return std::move(*ck.adapter);
}

}  // namespace detox
