#pragma once

// Simulated tensor-parallel execution. Devices are deterministic in-process
// workers; the all-reduce sums per-device partials in ascending device order,
// so identical runs are bitwise identical.
//
// A sequential stage shards one layer over all g devices (Megatron-style: two
// all-reduces, one after the attention output projection and one after the FFN
// down projection). A parallel group of m layers assigns g/m devices per
// layer, stacking both layers' heads across the device axis; the same two
// all-reduces then combine the full-rank output projections and the sum over
// group members in one reduction each.

#include "lp/model.hpp"
#include "lp/plan.hpp"

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

struct TopologyError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DeviceTopology {
  int devices = 2;                     // g
  double latency_per_allreduce = 0.0;  // seconds per all-reduce
  double bytes_per_second = 0.0;       // 0 disables the volume term
  int bytes_per_element = 4;
};

struct SyncStats {
  long long allreduce_count = 0;
  long long elements_reduced = 0;
  double simulated_sync_time = 0.0;  // seconds under the latency/bandwidth model
  double compute_time_proxy = 0.0;   // per-device multiply-accumulate count

  void merge(const SyncStats& o) {
    allreduce_count += o.allreduce_count;
    elements_reduced += o.elements_reduced;
    simulated_sync_time += o.simulated_sync_time;
    compute_time_proxy += o.compute_time_proxy;
  }
};

template <class S>
struct DeviceShard {
  int layer_id = 0;
  Matrix<S> w_q, w_k, w_v;  // D x (local_heads * head_dim)
  Matrix<S> w_o;            // (local_heads * head_dim) x D
  Matrix<S> w_gate, w_up;   // D x (d_ff / per_layer_devices)
  Matrix<S> w_down;         // (d_ff / per_layer_devices) x D
  Vector<S> norm_attn_scale, norm_ffn_scale;
};

template <class S>
struct ShardedLayerPair {
  ModelConfig config;
  int group_size = 0;         // layers sharing the stage
  int per_layer_devices = 0;  // g / group_size
  std::vector<DeviceShard<S>> shards;  // device order: layer-major
};

inline void check_topology(const ModelConfig& cfg, const DeviceTopology& topo, int group_size) {
  if (topo.devices < 1) throw TopologyError("device count must be >= 1");
  if (group_size < 1) throw TopologyError("group size must be >= 1");
  if (topo.devices % group_size != 0) {
    throw TopologyError("device count " + std::to_string(topo.devices) +
                        " not divisible by group size " + std::to_string(group_size));
  }
  const int per_layer = topo.devices / group_size;
  if (cfg.n_heads % topo.devices != 0) {
    throw TopologyError("n_heads=" + std::to_string(cfg.n_heads) + " not divisible by g=" +
                        std::to_string(topo.devices));
  }
  if (cfg.d_ff % per_layer != 0) {
    throw TopologyError("d_ff=" + std::to_string(cfg.d_ff) + " not divisible by " +
                        std::to_string(per_layer) + " devices per layer");
  }
}

// Distributes the heads and FFN slices of a stage's layers across devices.
// Devices 0..N-1 host the first layer's shards, the next N the second's, and
// so on.
template <class S>
ShardedLayerPair<S> shard_group(const std::vector<const LayerWeights<S>*>& layers,
                                const ModelConfig& cfg, const DeviceTopology& topo) {
  check_topology(cfg, topo, int(layers.size()));
  ShardedLayerPair<S> sh;
  sh.config = cfg;
  sh.group_size = int(layers.size());
  sh.per_layer_devices = topo.devices / sh.group_size;
  const int n = sh.per_layer_devices;
  const Index width = Index(cfg.n_heads / n) * cfg.head_dim;
  const Index ff_width = cfg.d_ff / n;
  sh.shards.reserve(size_t(topo.devices));
  for (int dev = 0; dev < topo.devices; ++dev) {
    const int layer_idx = dev / n;
    const int within = dev % n;
    const LayerWeights<S>& lw = *layers[size_t(layer_idx)];
    DeviceShard<S> shard;
    shard.layer_id = layer_idx;
    shard.w_q = lw.w_q.middleCols(within * width, width);
    shard.w_k = lw.w_k.middleCols(within * width, width);
    shard.w_v = lw.w_v.middleCols(within * width, width);
    shard.w_o = lw.w_o.middleRows(within * width, width);
    shard.w_gate = lw.w_gate.middleCols(within * ff_width, ff_width);
    shard.w_up = lw.w_up.middleCols(within * ff_width, ff_width);
    shard.w_down = lw.w_down.middleRows(within * ff_width, ff_width);
    shard.norm_attn_scale = lw.norm_attn_scale;
    shard.norm_ffn_scale = lw.norm_ffn_scale;
    sh.shards.push_back(std::move(shard));
  }
  return sh;
}

template <class S>
ShardedLayerPair<S> shard_pair(const LayerWeights<S>& layer_k, const LayerWeights<S>& layer_k1,
                               const ModelConfig& cfg, const DeviceTopology& topo) {
  return shard_group<S>({&layer_k, &layer_k1}, cfg, topo);
}

namespace detail {

// One all-reduce: base plus device partials, summed in ascending device order.
template <class S>
Matrix<S> allreduce_sum(const Matrix<S>& base, const std::vector<Matrix<S>>& partials,
                        const DeviceTopology& topo, SyncStats& stats) {
  Matrix<S> acc = base;
  for (const auto& p : partials) acc += p;
  stats.allreduce_count += 1;
  stats.elements_reduced += acc.size();
  double t = topo.latency_per_allreduce;
  if (topo.bytes_per_second > 0) {
    t += double(acc.size()) * double(topo.bytes_per_element) / topo.bytes_per_second;
  }
  stats.simulated_sync_time += t;
  return acc;
}

}  // namespace detail

// Executes one stage (a sharded layer or a sharded parallel group) with TP
// semantics: per-device attention paths with per-path norms, one all-reduce,
// per-device FFN paths, one all-reduce.
template <class S>
Matrix<S> sharded_stage_forward(const Matrix<S>& x, const ShardedLayerPair<S>& sh,
                                const DeviceTopology& topo, SyncStats& stats) {
  const ModelConfig& cfg = sh.config;
  check_seq_len<S>(x, cfg);
  const double t_len = double(x.rows());
  std::vector<Matrix<S>> partials;
  partials.reserve(sh.shards.size());
  for (const auto& shard : sh.shards) {
    Matrix<S> xn = apply_norm<S>(x, shard.norm_attn_scale, cfg);
    Matrix<S> att = attention_core<S>(xn, shard.w_q, shard.w_k, shard.w_v, cfg.head_dim,
                                      cfg.rope_base);
    partials.push_back(matmul<S>(att, shard.w_o));
  }
  // per-device MAC proxy (projections + score/value contractions)
  const auto& s0 = sh.shards[0];
  stats.compute_time_proxy += t_len * double(cfg.d_model) * double(s0.w_q.cols()) * 4.0 +
                              t_len * t_len * double(s0.w_q.cols());
  Matrix<S> u = detail::allreduce_sum(x, partials, topo, stats);

  partials.clear();
  for (const auto& shard : sh.shards) {
    Matrix<S> hn = apply_norm<S>(u, shard.norm_ffn_scale, cfg);
    partials.push_back(ffn_core<S>(hn, shard.w_gate, shard.w_up, shard.w_down, cfg.activation));
  }
  stats.compute_time_proxy += t_len * double(cfg.d_model) * double(s0.w_gate.cols()) * 3.0;
  return detail::allreduce_sum(u, partials, topo, stats);
}

// LP execution of one parallel pair (or group): both attentions read x, one
// all-reduce forms x + sum of attention residuals, both FFNs read that, one
// all-reduce forms the stage output. Exactly two all-reduces.
template <class S>
std::pair<Matrix<S>, SyncStats> lp_pair_forward(const Matrix<S>& x, const ShardedLayerPair<S>& sh,
                                                const DeviceTopology& topo) {
  SyncStats stats;
  Matrix<S> out = sharded_stage_forward<S>(x, sh, topo, stats);
  return {std::move(out), stats};
}

// Megatron-style baseline for a single layer over g devices.
template <class S>
std::pair<Matrix<S>, SyncStats> tp_layer_forward(const Matrix<S>& x, const LayerWeights<S>& layer,
                                                 const ModelConfig& cfg,
                                                 const DeviceTopology& topo) {
  SyncStats stats;
  auto sh = shard_group<S>({&layer}, cfg, topo);
  Matrix<S> out = sharded_stage_forward<S>(x, sh, topo, stats);
  return {std::move(out), stats};
}

// Whole-plan execution under simulated tensor parallelism. Embedding, final
// norm and output head run replicated (no all-reduce).
template <class S>
std::pair<Matrix<S>, SyncStats> execute_plan_tp(const Checkpoint<S>& ckpt,
                                                const std::vector<int>& tokens,
                                                const ExecutionPlan& plan,
                                                const DeviceTopology& topo) {
  plan.validate(ckpt.config.n_layers, /*require_all=*/false);
  SyncStats stats;
  Matrix<S> h = embed_tokens(ckpt, tokens);
  for (const auto& stage : plan.stages) {
    std::vector<const LayerWeights<S>*> layers;
    layers.reserve(stage.layers.size());
    for (int id : stage.layers) layers.push_back(&ckpt.layers[size_t(id)]);
    auto sh = shard_group<S>(layers, ckpt.config, topo);
    h = sharded_stage_forward<S>(h, sh, topo, stats);
  }
  Matrix<S> hn = apply_norm<S>(h, ckpt.final_norm_scale, ckpt.config);
  Matrix<S> logits = matmul<S>(hn, ckpt.output_head);
  return {std::move(logits), stats};
}

inline long long allreduces_in_plan(const ExecutionPlan& plan) {
  return 2 * (long long)(plan.stages.size());
}

// Speedup estimate from the sync/compute decomposition: compute time is held
// fixed and sync time scales with the all-reduce count ratio.
inline double estimate_speedup(double sync_time, double compute_time,
                               const ExecutionPlan& plan_before, const ExecutionPlan& plan_after) {
  if (compute_time <= 0) throw std::invalid_argument("compute time must be positive");
  if (sync_time < 0) throw std::invalid_argument("sync time must be non-negative");
  const long long before = allreduces_in_plan(plan_before);
  const long long after = allreduces_in_plan(plan_after);
  if (before == 0 || after == 0) {
    throw std::invalid_argument("plans must contain at least one stage");
  }
  const double old_total = compute_time + sync_time;
  const double new_total = compute_time + sync_time * (double(after) / double(before));
  return old_total / new_total;
}

}  // namespace lp
