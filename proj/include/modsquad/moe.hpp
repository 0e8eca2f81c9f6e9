#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "modsquad/routing.hpp"
#include "modsquad/tensor.hpp"

namespace modsquad {

struct ModelConfig {
  std::size_t d_in = 8;
  std::size_t seq_len = 4;
  std::size_t d_model = 64;
  std::size_t blocks = 4;
  std::size_t n_experts_attn = 8;
  std::size_t k_attn = 4;
  std::size_t n_experts_mlp = 8;
  std::size_t k_mlp = 2;
  // Block b carries MoE layers when (b + 1) % moe_every == 0.
  std::size_t moe_every = 1;
  // Dimensions of a dense (K = 1) expert. With flops_matched they are divided by K.
  std::size_t head_dim = 64;
  std::size_t mlp_hidden = 128;
  bool flops_matched = true;
  bool renormalize_gates = false;

  std::size_t expert_head_dim() const { return flops_matched ? head_dim / k_attn : head_dim; }
  std::size_t expert_hidden() const { return flops_matched ? mlp_hidden / k_mlp : mlp_hidden; }
  bool block_is_moe(std::size_t b) const { return (b + 1) % moe_every == 0; }
  void validate() const;
};

struct MlpExpert {
  Tensor w1;  // [d_model x hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden x d_model]
  Tensor b2;  // [d_model]

  static MlpExpert init(std::size_t d_model, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& z) const;
};

// Single-head attention expert owning all four projections.
struct AttentionExpert {
  Tensor w_q, w_k, w_v;  // [d_model x d_head]
  Tensor w_o;            // [d_head x d_model]

  static AttentionExpert init(std::size_t d_model, std::size_t d_head, Rng& rng);
  // Outputs for query rows `rows` of z [tokens x d_model]; every query attends
  // to all tokens of its own length-`seq_len` sequence.
  Tensor forward_rows(const Tensor& z, std::span<const std::size_t> rows, std::size_t seq_len) const;
};

// softmax(Q K^T / sqrt(d_head)) V w_o over one sequence x [L x d_model].
Tensor attention_expert_forward(const AttentionExpert& expert, const Tensor& x);

enum class LayerKind { attention, mlp };

struct MoELayer {
  LayerKind kind = LayerKind::mlp;
  std::size_t layer_id = 0;   // position among the model's MoE layers
  std::size_t n_slots = 0;    // router width N
  std::size_t k = 1;
  bool renormalize = false;
  // Router slot of each stored expert; 0..N-1 for an unpruned layer.
  std::vector<std::size_t> expert_ids;
  std::vector<MlpExpert> mlp_experts;
  std::vector<AttentionExpert> attn_experts;
  std::vector<RouterParams> routers;  // one per task of the owning model

  std::size_t stored_experts() const { return expert_ids.size(); }
  // Selection mask over router slots; empty when every slot has an expert.
  std::vector<bool> available() const;
};

// Per-MoE-layer instrumentation of expert evaluations.
struct ExpertCounter {
  std::vector<std::size_t> tokens;                    // per layer
  std::vector<std::size_t> evaluations;               // per layer, (token, expert) pairs
  std::vector<std::vector<std::size_t>> per_expert;   // per layer, per router slot

  void reset(std::size_t layers);
};

struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;
  ExpertCounter* counter = nullptr;
  // Test hook: fixed gate vector for a given MoE layer id.
  std::map<std::size_t, std::vector<double>> forced_gates;
};

struct MoEOutput {
  Tensor y;           // [tokens x d_model]
  RouteResult route;  // gates for usage accounting and the MI loss
};

// y = sum over selected k of G_task^k(x) * E_k(x + e_task).
MoEOutput moe_forward(const MoELayer& layer, const Tensor& x, std::size_t local_task,
                      const Tensor& task_embedding, std::size_t seq_len, ForwardContext& ctx);

struct Block {
  bool moe = false;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  MoELayer attn, mlp;                       // when moe
  AttentionExpert dense_attn;               // otherwise
  MlpExpert dense_mlp;
};

enum class TaskKind { regression, classification };

struct TaskHead {
  Tensor w;  // [d_model x out_dim]
  Tensor b;  // [out_dim]
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = false;
};

struct ModSquadModel {
  ModelConfig config;
  // Global id of each task this model serves; a pruned model serves one.
  std::vector<std::size_t> task_ids;
  std::vector<std::size_t> out_dims;  // per local task
  Tensor in_w, in_b, pos_embed;
  std::vector<Block> blocks;
  Tensor final_gain, final_bias;
  TaskEmbeddingTable task_embeddings;
  std::vector<TaskHead> heads;

  static ModSquadModel init(const ModelConfig& config, const std::vector<std::size_t>& out_dims,
                            Rng& rng);

  std::size_t num_tasks() const { return task_ids.size(); }
  // Local index of a global task id; throws ContractError if absent.
  std::size_t local_task(std::size_t task) const;
  std::vector<NamedParam> parameters() const;
  std::vector<const MoELayer*> moe_layers() const;
  std::vector<MoELayer*> moe_layers();
  std::size_t parameter_count() const;
  // Adds a task with fresh routers, embedding row and head; returns its id.
  std::size_t add_task(std::size_t out_dim, Rng& rng);
  ModSquadModel clone() const;
};

struct ForwardResult {
  Tensor predictions;                 // [B x out_dim(task)]
  std::vector<RouteResult> gate_log;  // one per MoE layer, in order
};

// inputs holds B sequences of config.seq_len tokens with config.d_in features.
ForwardResult model_forward(const ModSquadModel& model, std::span<const double> inputs,
                            std::size_t batch, std::size_t task, ForwardContext& ctx);

}  // namespace modsquad
