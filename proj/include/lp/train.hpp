#pragma once

// AdamW with a linear learning-rate decay, plus the two training entry points:
// pretraining a toy checkpoint from scratch and fine-tuning only the layers
// inside parallel groups.

#include "lp/corpus.hpp"
#include "lp/grad.hpp"
#include "lp/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lp {

struct TrainOptions {
  int steps = 0;
  int batch = 8;
  int window = 32;          // tokens per training window (capped by max_seq_len)
  double base_lr = 1e-4;    // linear decay to 0 over `steps`
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 1234;
};

template <class S>
struct OptimizerState {
  GradientSet<S> m, v;
  long long step = 0;

  static OptimizerState zero(const ModelConfig& cfg) {
    return {GradientSet<S>::zero(cfg), GradientSet<S>::zero(cfg), 0};
  }
};

namespace train_detail {

template <class S, class Tensor>
void adamw_tensor(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, double lr,
                  const TrainOptions& opt, double bc1, double bc2) {
  for (Index i = 0; i < w.size(); ++i) {
    const S gi = g.data()[i];
    S& mi = m.data()[i];
    S& vi = v.data()[i];
    mi = S(opt.beta1) * mi + S(1 - opt.beta1) * gi;
    vi = S(opt.beta2) * vi + S(1 - opt.beta2) * gi * gi;
    const S mh = mi / S(bc1);
    const S vh = vi / S(bc2);
    S& wi = w.data()[i];
    wi -= S(lr) * (mh / (std::sqrt(vh) + S(opt.eps)) + S(opt.weight_decay) * wi);
  }
}

}  // namespace train_detail

// One decoupled-weight-decay Adam step over the masked tensors. The learning
// rate decays linearly from base_lr to 0 across total_steps.
template <class S>
void adamw_step(Checkpoint<S>& ckpt, const GradientSet<S>& grads, OptimizerState<S>& state,
                const TrainMask& mask, const TrainOptions& opt, int total_steps) {
  const double lr = opt.base_lr * (1.0 - double(state.step) / double(total_steps));
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, double(state.step));
  auto upd = [&](auto& w, const auto& g, auto& m, auto& v) {
    train_detail::adamw_tensor<S>(w, g, m, v, lr, opt, bc1, bc2);
  };
  if (mask.embedding) upd(ckpt.embedding, grads.embedding, state.m.embedding, state.v.embedding);
  for (int id = 0; id < ckpt.config.n_layers; ++id) {
    if (!mask.trains_layer(id)) continue;
    auto& w = ckpt.layers[size_t(id)];
    const auto& g = grads.layers[size_t(id)];
    auto& m = state.m.layers[size_t(id)];
    auto& v = state.v.layers[size_t(id)];
    upd(w.w_q, g.w_q, m.w_q, v.w_q);
    upd(w.w_k, g.w_k, m.w_k, v.w_k);
    upd(w.w_v, g.w_v, m.w_v, v.w_v);
    upd(w.w_o, g.w_o, m.w_o, v.w_o);
    upd(w.w_gate, g.w_gate, m.w_gate, v.w_gate);
    upd(w.w_up, g.w_up, m.w_up, v.w_up);
    upd(w.w_down, g.w_down, m.w_down, v.w_down);
    upd(w.norm_attn_scale, g.norm_attn_scale, m.norm_attn_scale, v.norm_attn_scale);
    upd(w.norm_ffn_scale, g.norm_ffn_scale, m.norm_ffn_scale, v.norm_ffn_scale);
  }
  if (mask.final_norm) {
    upd(ckpt.final_norm_scale, grads.final_norm_scale, state.m.final_norm_scale,
        state.v.final_norm_scale);
  }
  if (mask.output_head) {
    upd(ckpt.output_head, grads.output_head, state.m.output_head, state.v.output_head);
  }
}

template <class S>
struct TrainResult {
  Checkpoint<S> checkpoint;
  std::vector<std::pair<int, double>> losses;  // (step, batch loss)
};

namespace train_detail {

inline std::vector<std::vector<int>> sample_windows(const std::vector<int>& tokens, int batch,
                                                    int window, uint64_t seed) {
  if (tokens.size() < size_t(window) + 1) {
    throw std::invalid_argument("corpus shorter than one training window");
  }
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  out.reserve(size_t(batch));
  for (int b = 0; b < batch; ++b) {
    const size_t start = size_t(rng.next_below(uint64_t(tokens.size() - size_t(window))));
    out.emplace_back(tokens.begin() + long(start), tokens.begin() + long(start + size_t(window)));
  }
  return out;
}

template <class S>
TrainResult<S> run_training(Checkpoint<S> ckpt, const ExecutionPlan& plan,
                            const std::vector<int>& tokens, const TrainMask& mask,
                            const TrainOptions& opt) {
  const int window = std::min(opt.window, ckpt.config.max_seq_len);
  OptimizerState<S> state = OptimizerState<S>::zero(ckpt.config);
  TrainResult<S> result;
  for (int step = 0; step < opt.steps; ++step) {
    const auto windows =
        sample_windows(tokens, opt.batch, window, mix_seed(opt.seed, uint64_t(step)));
    auto [loss, grads] = loss_and_grad<S>(ckpt, plan, windows, mask);
    adamw_step<S>(ckpt, grads, state, mask, opt, opt.steps);
    result.losses.emplace_back(step, loss);
  }
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace train_detail

// Trains a fresh seeded checkpoint on the sequential plan.
template <class S>
TrainResult<S> pretrain(const ModelConfig& cfg, const std::vector<int>& tokens,
                        const TrainOptions& opt) {
  Checkpoint<S> ckpt = generate_toy_checkpoint<S>(cfg);
  return train_detail::run_training<S>(std::move(ckpt), ExecutionPlan::sequential(cfg.n_layers),
                                       tokens, TrainMask::all(cfg.n_layers), opt);
}

// Fine-tunes only the layers inside the plan's parallel groups; every other
// tensor of the checkpoint stays byte-identical.
template <class S>
TrainResult<S> finetune_lp(const Checkpoint<S>& ckpt, const ExecutionPlan& plan,
                           const std::vector<int>& tokens, const TrainOptions& opt) {
  if (!plan.has_parallel_group()) {
    throw std::invalid_argument("fine-tuning requires a plan with at least one parallel group");
  }
  plan.validate(ckpt.config.n_layers, /*require_all=*/false);
  return train_detail::run_training<S>(ckpt, plan, tokens, TrainMask::lp_layers(plan), opt);
}

}  // namespace lp
