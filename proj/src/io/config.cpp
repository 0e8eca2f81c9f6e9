#include "modsquad/config.hpp"

#include <cstdlib>
#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "modsquad/errors.hpp"

namespace modsquad {

namespace {

// Reads typed fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  void read(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) fail(key, "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::uint64_t& out, bool) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) fail(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, GateStats& out) {
    if (const json* v = find(key)) {
      if (v->is_string() && *v == "post_topk") out = GateStats::post_topk;
      else if (v->is_string() && *v == "pre_topk") out = GateStats::pre_topk;
      else fail(key, "expected \"post_topk\" or \"pre_topk\"");
    }
  }
  const json* child(const char* key) { return find(key); }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(path_ + "." + item.key() + ": unknown key");
    }
  }
  bool has(const char* key) const { return j_.contains(key); }
  [[noreturn]] void fail(const char* key, const std::string& what) const {
    throw ConfigError(path_ + "." + key + ": " + what);
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"d_in", c.d_in},
              {"seq_len", c.seq_len},
              {"d_model", c.d_model},
              {"blocks", c.blocks},
              {"n_experts_attn", c.n_experts_attn},
              {"k_attn", c.k_attn},
              {"n_experts_mlp", c.n_experts_mlp},
              {"k_mlp", c.k_mlp},
              {"moe_every", c.moe_every},
              {"head_dim", c.head_dim},
              {"mlp_hidden", c.mlp_hidden},
              {"flops_matched", c.flops_matched},
              {"renormalize_gates", c.renormalize_gates}};
}

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"warmup_epochs", c.warmup_epochs},
              {"base_lr", c.base_lr},
              {"weight_decay", c.weight_decay},
              {"samples_per_task", c.samples_per_task},
              {"grad_clip", c.grad_clip},
              {"theta", c.theta}};
}

json to_json(const BenchmarkConfig& c) {
  return json{{"n_groups", c.n_groups},
              {"tasks_per_group", c.tasks_per_group},
              {"heldout_tasks", c.heldout_tasks},
              {"d_in", c.d_in},
              {"seq_len", c.seq_len},
              {"d_latent", c.d_latent},
              {"regression_dim", c.regression_dim},
              {"train_samples", c.train_samples},
              {"test_samples", c.test_samples},
              {"noise_std", c.noise_std},
              {"seed", c.seed}};
}

json to_json(const LossConfig& c) {
  return json{{"w_mi", c.w_mi},
              {"gate_stats", c.gate_stats == GateStats::post_topk ? "post_topk" : "pre_topk"},
              {"balance_weight", c.balance_weight}};
}

json to_json(const RunConfig& c) {
  json model = to_json(c.model);
  model.erase("d_in");
  model.erase("seq_len");
  return json{{"model", model},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"loss", to_json(c.loss)},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  ModelConfig c;
  Section s(j, path);
  s.read("d_in", c.d_in);
  s.read("seq_len", c.seq_len);
  s.read("d_model", c.d_model);
  s.read("blocks", c.blocks);
  s.read("n_experts_attn", c.n_experts_attn);
  s.read("k_attn", c.k_attn);
  s.read("n_experts_mlp", c.n_experts_mlp);
  s.read("k_mlp", c.k_mlp);
  s.read("moe_every", c.moe_every);
  s.read("head_dim", c.head_dim);
  s.read("mlp_hidden", c.mlp_hidden);
  s.read("flops_matched", c.flops_matched);
  s.read("renormalize_gates", c.renormalize_gates);
  s.finish();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section top(j, "config");
  if (const json* m = top.child("model")) {
    Section probe(*m, "model");
    if (probe.has("d_in") || probe.has("seq_len")) {
      throw ConfigError("model: d_in and seq_len are taken from the data section");
    }
    c.model = model_config_from_json(*m, "model");
  }
  if (const json* t = top.child("train")) {
    Section s(*t, "train");
    s.read("epochs", c.train.epochs);
    s.read("warmup_epochs", c.train.warmup_epochs);
    s.read("base_lr", c.train.base_lr);
    s.read("weight_decay", c.train.weight_decay);
    s.read("samples_per_task", c.train.samples_per_task);
    s.read("grad_clip", c.train.grad_clip);
    s.read("theta", c.train.theta);
    s.finish();
  }
  if (const json* d = top.child("data")) {
    Section s(*d, "data");
    s.read("n_groups", c.data.n_groups);
    s.read("tasks_per_group", c.data.tasks_per_group);
    s.read("heldout_tasks", c.data.heldout_tasks);
    s.read("d_in", c.data.d_in);
    s.read("seq_len", c.data.seq_len);
    s.read("d_latent", c.data.d_latent);
    s.read("regression_dim", c.data.regression_dim);
    s.read("train_samples", c.data.train_samples);
    s.read("test_samples", c.data.test_samples);
    s.read("noise_std", c.data.noise_std);
    s.read("seed", c.data.seed, true);
    s.finish();
  }
  if (const json* l = top.child("loss")) {
    Section s(*l, "loss");
    s.read("w_mi", c.loss.w_mi);
    s.read("gate_stats", c.loss.gate_stats);
    s.read("balance_weight", c.loss.balance_weight);
    s.finish();
  }
  top.read("seed", c.seed, true);
  top.finish();
  c.model.d_in = c.data.d_in;
  c.model.seq_len = c.data.seq_len;
  c.train.seed = c.seed;
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (loss.w_mi < 0.0) throw ConfigError("loss.w_mi must be >= 0");
  if (loss.balance_weight < 0.0) throw ConfigError("loss.balance_weight must be >= 0");
  if (model.d_in != data.d_in || model.seq_len != data.seq_len) {
    throw ConfigError("model: token shape does not match data.d_in/data.seq_len");
  }
}

void apply_override(json& doc, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw ConfigError("empty override key");
  json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError(dotted + ": malformed override key");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    json& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError(dotted + ": " + parts[i] + " is not a section");
    node = &next;
  }
  json parsed = json::parse(value, nullptr, false);
  (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
}

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides,
                          std::optional<std::size_t> epochs) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(file.string() + ": not valid JSON");
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  if (epochs) {
    if (*epochs == 0) throw ConfigError("train.epochs must be >= 1");
    json& train = doc["train"];
    if (train.is_null()) train = json::object();
    if (!train.is_object()) throw ConfigError("train: expected an object");
    train["epochs"] = *epochs;
    const std::size_t warmup = train.contains("warmup_epochs") && train["warmup_epochs"].is_number_unsigned()
                                   ? train["warmup_epochs"].get<std::size_t>()
                                   : TrainConfig{}.warmup_epochs;
    train["warmup_epochs"] = std::min(warmup, *epochs - 1);
  }
  if (const char* env = std::getenv("MODSQUAD_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError("MODSQUAD_SEED: expected a non-negative integer");
    doc["seed"] = seed;
  }
  return run_config_from_json(doc);
}

}  // namespace modsquad
