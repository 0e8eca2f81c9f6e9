#include "modsquad/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "modsquad/errors.hpp"

namespace modsquad {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kBlob = "params.bin";

void put_f32(std::vector<char>& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

json architecture(const ModSquadModel& model) {
  json layers = json::array();
  for (const auto* layer : model.moe_layers()) {
    layers.push_back({{"kind", layer->kind == LayerKind::attention ? "attention" : "mlp"},
                      {"n_slots", layer->n_slots},
                      {"k", layer->k},
                      {"expert_ids", layer->expert_ids}});
  }
  return {{"model", to_json(model.config)},
          {"task_ids", model.task_ids},
          {"out_dims", model.out_dims},
          {"moe_layers", layers}};
}

template <typename T>
T field(const json& j, const char* key, const char* where) {
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(std::string("checkpoint ") + where + ": missing " + key);
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("checkpoint ") + where + ": bad " + key);
  }
}

ModSquadModel skeleton(const json& arch) {
  ModelConfig config = model_config_from_json(field<json>(arch, "model", "architecture"), "checkpoint.model");
  auto task_ids = field<std::vector<std::size_t>>(arch, "task_ids", "architecture");
  auto out_dims = field<std::vector<std::size_t>>(arch, "out_dims", "architecture");
  if (task_ids.size() != out_dims.size()) throw ConfigError("checkpoint: task_ids and out_dims differ in length");
  Rng rng(0);
  ModSquadModel m = ModSquadModel::init(config, out_dims, rng);
  m.task_ids = task_ids;
  const json layers = field<json>(arch, "moe_layers", "architecture");
  auto moe = m.moe_layers();
  if (!layers.is_array() || layers.size() != moe.size()) throw ConfigError("checkpoint: MoE layer count mismatch");
  for (std::size_t l = 0; l < moe.size(); ++l) {
    MoELayer& layer = *moe[l];
    auto ids = field<std::vector<std::size_t>>(layers[l], "expert_ids", "layer");
    layer.k = field<std::size_t>(layers[l], "k", "layer");
    if (ids.empty() || layer.k == 0 || layer.k > ids.size()) throw ConfigError("checkpoint: bad layer top-k");
    std::vector<MlpExpert> mlp;
    std::vector<AttentionExpert> attn;
    for (auto id : ids) {
      if (id >= layer.n_slots) throw ConfigError("checkpoint: expert id out of range");
      if (layer.kind == LayerKind::attention) attn.push_back(layer.attn_experts[id]);
      else mlp.push_back(layer.mlp_experts[id]);
    }
    layer.expert_ids = ids;
    layer.attn_experts = std::move(attn);
    layer.mlp_experts = std::move(mlp);
  }
  return m;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ModSquadModel& model, const Tensor* log_var,
                     const json& extra, std::optional<std::size_t> task_id) {
  if (task_id && model.task_ids != std::vector<std::size_t>{*task_id}) {
    throw ContractError("save_checkpoint: a standalone checkpoint must serve exactly its task");
  }
  fs::create_directories(dir);
  auto params = model.parameters();
  if (log_var) params.push_back({"loss.log_var", *log_var, false});

  std::vector<char> blob;
  json entries = json::array();
  for (const auto& p : params) {
    entries.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"dtype", "float32"},
                       {"offset", blob.size()}});
    for (double v : p.tensor.data()) put_f32(blob, v);
  }
  json manifest = {{"version", kCheckpointVersion},
                   {"task_id", task_id ? json(*task_id) : json(nullptr)},
                   {"architecture", architecture(model)},
                   {"blob", kBlob},
                   {"blob_bytes", blob.size()},
                   {"params", entries},
                   {"extra", extra}};

  std::ofstream bin(dir / kBlob, std::ios::binary | std::ios::trunc);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw ContractError("cannot write " + (dir / kBlob).string());
  std::ofstream man(dir / kManifest, std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw ContractError("cannot write " + (dir / kManifest).string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream man(dir / kManifest);
  if (!man) throw ConfigError("checkpoint: cannot open " + (dir / kManifest).string());
  json manifest = json::parse(man, nullptr, false);
  if (manifest.is_discarded()) throw ConfigError("checkpoint: manifest is not valid JSON");
  if (field<std::string>(manifest, "version", "manifest") != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version");
  }

  std::ifstream bin(dir / field<std::string>(manifest, "blob", "manifest"), std::ios::binary);
  if (!bin) throw ConfigError("checkpoint: cannot open parameter blob");
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (blob.size() != field<std::size_t>(manifest, "blob_bytes", "manifest")) {
    throw ConfigError("checkpoint: blob size does not match manifest");
  }

  Checkpoint ck;
  ck.model = skeleton(field<json>(manifest, "architecture", "manifest"));
  if (!manifest["task_id"].is_null()) ck.task_id = field<std::size_t>(manifest, "task_id", "manifest");
  ck.extra = manifest.value("extra", json::object());

  std::map<std::string, Tensor> by_name;
  for (const auto& p : ck.model.parameters()) by_name.emplace(p.name, p.tensor);
  std::size_t restored = 0;
  for (const auto& e : field<json>(manifest, "params", "manifest")) {
    const auto name = field<std::string>(e, "name", "param");
    const auto shape = field<std::vector<std::size_t>>(e, "shape", "param");
    const auto offset = field<std::size_t>(e, "offset", "param");
    if (field<std::string>(e, "dtype", "param") != "float32") throw ConfigError("checkpoint: " + name + " is not float32");
    Tensor target;
    if (name == "loss.log_var") {
      ck.log_var = Tensor::zeros(shape, true);
      target = *ck.log_var;
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint: unexpected parameter " + name);
      target = it->second;
      ++restored;
    }
    if (target.shape() != shape) throw ConfigError("checkpoint: shape mismatch for " + name);
    if (offset + 4 * target.numel() > blob.size()) throw ConfigError("checkpoint: " + name + " overruns the blob");
    auto out = target.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_f32(blob.data() + offset + 4 * i);
  }
  if (restored != by_name.size()) throw ConfigError("checkpoint: manifest is missing parameters");
  return ck;
}

std::size_t checkpoint_blob_size(const fs::path& dir) {
  return static_cast<std::size_t>(fs::file_size(dir / kBlob));
}

}  // namespace modsquad
