#pragma once

// Reverse-mode gradients through the decoder, implemented as per-module
// analytic vector-Jacobian products. The cached forward reuses the inference
// kernels, so training-time forwards are bitwise identical to inference.
// Input-side VJPs double as the transpose applications for the Jacobian-norm
// power iteration in the analysis module.

#include "lp/model.hpp"
#include "lp/plan.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

template <class S>
struct LayerGrads {
  Matrix<S> w_q, w_k, w_v, w_o, w_gate, w_up, w_down;
  Vector<S> norm_attn_scale, norm_ffn_scale;

  static LayerGrads zero(const ModelConfig& cfg) {
    const Index d = cfg.d_model, ff = cfg.d_ff;
    LayerGrads g;
    g.w_q = Matrix<S>::Zero(d, d);
    g.w_k = Matrix<S>::Zero(d, d);
    g.w_v = Matrix<S>::Zero(d, d);
    g.w_o = Matrix<S>::Zero(d, d);
    g.w_gate = Matrix<S>::Zero(d, ff);
    g.w_up = Matrix<S>::Zero(d, ff);
    g.w_down = Matrix<S>::Zero(ff, d);
    g.norm_attn_scale = Vector<S>::Zero(d);
    g.norm_ffn_scale = Vector<S>::Zero(d);
    return g;
  }
};

template <class S>
struct GradientSet {
  Matrix<S> embedding;
  std::vector<LayerGrads<S>> layers;
  Vector<S> final_norm_scale;
  Matrix<S> output_head;

  static GradientSet zero(const ModelConfig& cfg) {
    GradientSet g;
    g.embedding = Matrix<S>::Zero(cfg.vocab_size, cfg.d_model);
    g.layers.assign(size_t(cfg.n_layers), LayerGrads<S>::zero(cfg));
    g.final_norm_scale = Vector<S>::Zero(cfg.d_model);
    g.output_head = Matrix<S>::Zero(cfg.d_model, cfg.vocab_size);
    return g;
  }
};

// Which checkpoint tensors receive gradients and optimizer updates; everything
// outside the mask stays byte-identical through training.
struct TrainMask {
  std::set<int> layers;
  bool embedding = false;
  bool final_norm = false;
  bool output_head = false;

  static TrainMask all(int n_layers) {
    TrainMask m;
    for (int i = 0; i < n_layers; ++i) m.layers.insert(i);
    m.embedding = m.final_norm = m.output_head = true;
    return m;
  }

  // Only layers inside parallel groups.
  static TrainMask lp_layers(const ExecutionPlan& plan) {
    TrainMask m;
    m.layers = plan.parallel_layer_ids();
    return m;
  }

  bool trains_layer(int id) const { return layers.count(id) > 0; }
};

namespace grad_detail {

template <class S>
S act_derivative(S z, Activation act) {
  if (act == Activation::Silu) {
    const S sig = S(1) / (S(1) + std::exp(-z));
    return sig * (S(1) + z * (S(1) - sig));
  }
  const S cdf = S(0.5) * (S(1) + std::erf(z / std::sqrt(S(2))));
  const S pdf = std::exp(-z * z / S(2)) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  return cdf + z * pdf;
}

// dC -> (dA += dC B^T, dB += A^T dC) for C = A B.
template <class S>
Matrix<S> matmul_vjp_left(const Matrix<S>& d_c, const Matrix<S>& b) {
  return matmul<S>(d_c, Matrix<S>(b.transpose()));
}

template <class S>
Matrix<S> matmul_vjp_right(const Matrix<S>& a, const Matrix<S>& d_c) {
  return matmul<S>(Matrix<S>(a.transpose()), d_c);
}

// Backward through the norm. Returns dx; accumulates dscale if given.
template <class S>
Matrix<S> norm_vjp(const Matrix<S>& x, const VecRef<S>& scale, const ModelConfig& cfg,
                   const Matrix<S>& d_y, Vector<S>* d_scale) {
  const Index m = x.rows(), n = x.cols();
  Matrix<S> dx(m, n);
  if (cfg.norm_kind == NormKind::Rms) {
    for (Index i = 0; i < m; ++i) {
      S ss = S(0);
      for (Index j = 0; j < n; ++j) ss += x(i, j) * x(i, j);
      const S inv_r = S(1) / std::sqrt(ss / S(n) + S(cfg.norm_eps));
      S dot = S(0);  // sum_j dy_j * s_j * x_j
      for (Index j = 0; j < n; ++j) dot += d_y(i, j) * scale(j) * x(i, j);
      const S coef = inv_r * inv_r * inv_r / S(n) * dot;
      for (Index j = 0; j < n; ++j) {
        dx(i, j) = d_y(i, j) * scale(j) * inv_r - x(i, j) * coef;
        if (d_scale) (*d_scale)(j) += d_y(i, j) * x(i, j) * inv_r;
      }
    }
  } else {
    for (Index i = 0; i < m; ++i) {
      S mean = S(0);
      for (Index j = 0; j < n; ++j) mean += x(i, j);
      mean /= S(n);
      S var = S(0);
      for (Index j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= S(n);
      const S inv_sigma = S(1) / std::sqrt(var + S(cfg.norm_eps));
      S mean_dxh = S(0), mean_dxh_xh = S(0);
      for (Index j = 0; j < n; ++j) {
        const S xh = (x(i, j) - mean) * inv_sigma;
        const S dxh = d_y(i, j) * scale(j);
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh;
        if (d_scale) (*d_scale)(j) += d_y(i, j) * xh;
      }
      mean_dxh /= S(n);
      mean_dxh_xh /= S(n);
      for (Index j = 0; j < n; ++j) {
        const S xh = (x(i, j) - mean) * inv_sigma;
        const S dxh = d_y(i, j) * scale(j);
        dx(i, j) = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_sigma;
      }
    }
  }
  return dx;
}

// Transpose of the rotary rotation: rotate by -theta.
template <class S>
void rope_vjp_in_place(Matrix<S>& d_qk, int head_dim, double base) {
  const Index t_len = d_qk.rows();
  const int half = head_dim / 2;
  const Index n_local_heads = d_qk.cols() / head_dim;
  for (Index t = 0; t < t_len; ++t) {
    S* row = d_qk.data() + t * d_qk.cols();
    for (Index h = 0; h < n_local_heads; ++h) {
      S* head = row + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double angle = double(t) * std::pow(base, -2.0 * double(i) / double(head_dim));
        const S c = S(std::cos(angle));
        const S s = S(std::sin(angle));
        const S da = head[i];
        const S db = head[i + half];
        head[i] = da * c + db * s;
        head[i + half] = -da * s + db * c;
      }
    }
  }
}

}  // namespace grad_detail

// Cached forward of the attention residual.
template <class S>
struct AttnCache {
  Matrix<S> xn;
  AttnCoreCache<S> core;
  Matrix<S> att;
};

template <class S>
Matrix<S> attention_residual_fwd(const Matrix<S>& x, const LayerWeights<S>& layer,
                                 const ModelConfig& cfg, AttnCache<S>& cache) {
  check_seq_len<S>(x, cfg);
  cache.xn = apply_norm<S>(x, layer.norm_attn_scale, cfg);
  cache.att = attention_core<S>(cache.xn, layer.w_q, layer.w_k, layer.w_v, cfg.head_dim,
                                cfg.rope_base, &cache.core);
  return matmul<S>(cache.att, layer.w_o);
}

// VJP of attention_core: given the gradient of the per-head attention output,
// returns the gradient of the normalized input. Weight gradients (against the
// passed slices) land in dw_* when non-null.
template <class S>
Matrix<S> attention_core_vjp(const Matrix<S>& xn, const MatRef<S>& w_q, const MatRef<S>& w_k,
                             const MatRef<S>& w_v, int head_dim, double rope_base,
                             const AttnCoreCache<S>& core, const Matrix<S>& d_att,
                             Matrix<S>* dw_q = nullptr, Matrix<S>* dw_k = nullptr,
                             Matrix<S>* dw_v = nullptr) {
  using grad_detail::matmul_vjp_left;
  using grad_detail::matmul_vjp_right;
  const Index t_len = xn.rows();
  const int hd = head_dim;
  const Index width = core.q.cols();
  const Index n_local_heads = width / hd;
  const S inv_sqrt_hd = S(1.0 / std::sqrt(double(hd)));

  Matrix<S> dq = Matrix<S>::Zero(t_len, width);
  Matrix<S> dk = Matrix<S>::Zero(t_len, width);
  Matrix<S> dv = Matrix<S>::Zero(t_len, width);
  std::vector<S> dp(static_cast<size_t>(t_len), S(0));
  for (Index h = 0; h < n_local_heads; ++h) {
    const Index c0 = h * hd;
    const Matrix<S>& p = core.probs[size_t(h)];
    for (Index i = 0; i < t_len; ++i) {
      const S* datt_i = d_att.data() + i * d_att.cols() + c0;
      // dP over the causal prefix, plus dV accumulation
      S dot = S(0);  // sum_j dp_ij p_ij
      for (Index j = 0; j <= i; ++j) {
        const S pij = p(i, j);
        const S* vj = core.v.data() + j * width + c0;
        S* dvj = dv.data() + j * width + c0;
        S acc = S(0);
        for (int d = 0; d < hd; ++d) acc += datt_i[d] * vj[d];
        dp[size_t(j)] = acc;
        dot += acc * pij;
        for (int d = 0; d < hd; ++d) dvj[d] += pij * datt_i[d];
      }
      // softmax backward and score backward
      const S* qi = core.q.data() + i * width + c0;
      S* dqi = dq.data() + i * width + c0;
      for (Index j = 0; j <= i; ++j) {
        const S ds = p(i, j) * (dp[size_t(j)] - dot) * inv_sqrt_hd;
        const S* kj = core.k.data() + j * width + c0;
        S* dkj = dk.data() + j * width + c0;
        for (int d = 0; d < hd; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
        }
      }
    }
  }
  grad_detail::rope_vjp_in_place(dq, hd, rope_base);
  grad_detail::rope_vjp_in_place(dk, hd, rope_base);

  Matrix<S> d_xn = matmul_vjp_left<S>(dq, Matrix<S>(w_q));
  d_xn += matmul_vjp_left<S>(dk, Matrix<S>(w_k));
  d_xn += matmul_vjp_left<S>(dv, Matrix<S>(w_v));
  if (dw_q) *dw_q += matmul_vjp_right<S>(xn, dq);
  if (dw_k) *dw_k += matmul_vjp_right<S>(xn, dk);
  if (dw_v) *dw_v += matmul_vjp_right<S>(xn, dv);
  return d_xn;
}

// VJP of the attention residual. Returns dx; accumulates parameter gradients
// into `grads` when non-null.
template <class S>
Matrix<S> attention_residual_vjp(const Matrix<S>& x, const LayerWeights<S>& layer,
                                 const ModelConfig& cfg, const AttnCache<S>& cache,
                                 const Matrix<S>& d_out, LayerGrads<S>* grads) {
  using grad_detail::matmul_vjp_left;
  using grad_detail::matmul_vjp_right;
  Matrix<S> d_att = matmul_vjp_left<S>(d_out, layer.w_o);
  if (grads) grads->w_o += matmul_vjp_right<S>(cache.att, d_out);
  Matrix<S> d_xn = attention_core_vjp<S>(cache.xn, layer.w_q, layer.w_k, layer.w_v, cfg.head_dim,
                                         cfg.rope_base, cache.core, d_att,
                                         grads ? &grads->w_q : nullptr,
                                         grads ? &grads->w_k : nullptr,
                                         grads ? &grads->w_v : nullptr);
  Vector<S>* d_scale = grads ? &grads->norm_attn_scale : nullptr;
  return grad_detail::norm_vjp<S>(x, layer.norm_attn_scale, cfg, d_xn, d_scale);
}

template <class S>
struct FfnCache {
  Matrix<S> xn;
  FfnCoreCache<S> core;
};

template <class S>
Matrix<S> ffn_residual_fwd(const Matrix<S>& x, const LayerWeights<S>& layer,
                           const ModelConfig& cfg, FfnCache<S>& cache) {
  check_seq_len<S>(x, cfg);
  cache.xn = apply_norm<S>(x, layer.norm_ffn_scale, cfg);
  return ffn_core<S>(cache.xn, layer.w_gate, layer.w_up, layer.w_down, cfg.activation,
                     &cache.core);
}

template <class S>
Matrix<S> ffn_residual_vjp(const Matrix<S>& x, const LayerWeights<S>& layer,
                           const ModelConfig& cfg, const FfnCache<S>& cache,
                           const Matrix<S>& d_out, LayerGrads<S>* grads) {
  using grad_detail::matmul_vjp_left;
  using grad_detail::matmul_vjp_right;
  const Matrix<S>& g = cache.core.g;
  const Matrix<S>& u = cache.core.u;

  Matrix<S> act_g(g.rows(), g.cols());
  Matrix<S> dact_g(g.rows(), g.cols());
  for (Index i = 0; i < g.rows(); ++i) {
    for (Index j = 0; j < g.cols(); ++j) {
      act_g(i, j) = cfg.activation == Activation::Silu ? silu(g(i, j)) : gelu(g(i, j));
      dact_g(i, j) = grad_detail::act_derivative(g(i, j), cfg.activation);
    }
  }
  Matrix<S> a = act_g.cwiseProduct(u);
  Matrix<S> d_a = matmul_vjp_left<S>(d_out, layer.w_down);
  if (grads) grads->w_down += matmul_vjp_right<S>(a, d_out);

  Matrix<S> d_g = d_a.cwiseProduct(u).cwiseProduct(dact_g);
  Matrix<S> d_u = d_a.cwiseProduct(act_g);
  Matrix<S> d_xn = matmul_vjp_left<S>(d_g, layer.w_gate);
  d_xn += matmul_vjp_left<S>(d_u, layer.w_up);
  if (grads) {
    grads->w_gate += matmul_vjp_right<S>(cache.xn, d_g);
    grads->w_up += matmul_vjp_right<S>(cache.xn, d_u);
  }
  Vector<S>* d_scale = grads ? &grads->norm_ffn_scale : nullptr;
  return grad_detail::norm_vjp<S>(x, layer.norm_ffn_scale, cfg, d_xn, d_scale);
}

// Input-only VJPs of the residual maps at a fixed point (fresh forward, no
// parameter gradients); these are the transpose applications used by the
// Jacobian-norm estimator.
template <class S>
Matrix<S> attention_input_vjp(const Matrix<S>& x, const LayerWeights<S>& layer,
                              const ModelConfig& cfg, const Matrix<S>& d_out) {
  AttnCache<S> cache;
  attention_residual_fwd<S>(x, layer, cfg, cache);
  return attention_residual_vjp<S>(x, layer, cfg, cache, d_out, nullptr);
}

template <class S>
Matrix<S> ffn_input_vjp(const Matrix<S>& x, const LayerWeights<S>& layer, const ModelConfig& cfg,
                        const Matrix<S>& d_out) {
  FfnCache<S> cache;
  ffn_residual_fwd<S>(x, layer, cfg, cache);
  return ffn_residual_vjp<S>(x, layer, cfg, cache, d_out, nullptr);
}

// VJP of the full layer residual f(h) = A(h) + F(h + A(h)).
template <class S>
Matrix<S> layer_residual_input_vjp(const Matrix<S>& h, const LayerWeights<S>& layer,
                                   const ModelConfig& cfg, const Matrix<S>& d_out) {
  AttnCache<S> ac;
  Matrix<S> r = attention_residual_fwd<S>(h, layer, cfg, ac);
  Matrix<S> u = h + r;
  FfnCache<S> fc;
  ffn_residual_fwd<S>(u, layer, cfg, fc);
  Matrix<S> du = ffn_residual_vjp<S>(u, layer, cfg, fc, d_out, nullptr);
  Matrix<S> dr = d_out + du;
  Matrix<S> dh = du + attention_residual_vjp<S>(h, layer, cfg, ac, dr, nullptr);
  return dh;
}

namespace grad_detail {

template <class S>
struct MemberCache {
  AttnCache<S> attn;
  Matrix<S> u;  // input to the FFN
  FfnCache<S> ffn;
};

template <class S>
struct StageCache {
  Matrix<S> input;
  std::vector<MemberCache<S>> members;
};

}  // namespace grad_detail

// Mean next-token cross-entropy over a batch of token windows and its exact
// gradients through the plan. Masked-out tensors keep exactly-zero gradients.
template <class S>
std::pair<double, GradientSet<S>> loss_and_grad(const Checkpoint<S>& ckpt,
                                                const ExecutionPlan& plan,
                                                const std::vector<std::vector<int>>& windows,
                                                const TrainMask& mask) {
  plan.validate(ckpt.config.n_layers, /*require_all=*/false);
  const ModelConfig& cfg = ckpt.config;
  GradientSet<S> grads = GradientSet<S>::zero(cfg);

  long long total_preds = 0;
  for (const auto& w : windows) {
    if (w.size() < 2) throw std::invalid_argument("training window must hold >= 2 tokens");
    if (Index(w.size()) > cfg.max_seq_len) {
      throw SequenceError("training window exceeds max_seq_len");
    }
    total_preds += (long long)(w.size()) - 1;
  }
  if (total_preds == 0) throw std::invalid_argument("no predictions in batch");

  double total_loss = 0.0;
  for (size_t widx = 0; widx < windows.size(); ++widx) {
    const auto& tokens = windows[widx];
    const Index t_len = Index(tokens.size());

    // cached forward
    std::vector<grad_detail::StageCache<S>> stages(plan.stages.size());
    Matrix<S> h = embed_tokens(ckpt, tokens);
    for (size_t si = 0; si < plan.stages.size(); ++si) {
      const Stage& st = plan.stages[si];
      auto& sc = stages[si];
      sc.input = h;
      sc.members.resize(st.layers.size());
      if (st.is_parallel()) {
        Matrix<S> acc = h;
        for (size_t mi = 0; mi < st.layers.size(); ++mi) {
          const auto& layer = ckpt.layers[size_t(st.layers[mi])];
          auto& mc = sc.members[mi];
          Matrix<S> r = attention_residual_fwd<S>(sc.input, layer, cfg, mc.attn);
          mc.u = sc.input + r;
          Matrix<S> s = ffn_residual_fwd<S>(mc.u, layer, cfg, mc.ffn);
          acc += r;
          acc += s;
        }
        h = std::move(acc);
      } else {
        const auto& layer = ckpt.layers[size_t(st.layers[0])];
        auto& mc = sc.members[0];
        Matrix<S> r = attention_residual_fwd<S>(sc.input, layer, cfg, mc.attn);
        mc.u = sc.input + r;
        h = mc.u + ffn_residual_fwd<S>(mc.u, layer, cfg, mc.ffn);
      }
    }
    Matrix<S> hn = apply_norm<S>(h, ckpt.final_norm_scale, cfg);
    Matrix<S> logits = matmul<S>(hn, ckpt.output_head);

    // loss and dlogits over predicted rows
    const std::vector<int> targets(tokens.begin() + 1, tokens.end());
    Vector<S> nll = nll_rows<S>(logits.topRows(t_len - 1), targets);
    double window_loss = 0.0;
    for (Index i = 0; i < nll.size(); ++i) window_loss += double(nll[i]);
    if (!std::isfinite(window_loss)) {
      throw std::runtime_error("non-finite loss in window " + std::to_string(widx));
    }
    total_loss += window_loss;

    Matrix<S> probs = softmax_rows<S>(logits.topRows(t_len - 1));
    Matrix<S> d_logits = Matrix<S>::Zero(t_len, cfg.vocab_size);
    const S scale = S(1.0 / double(total_preds));
    for (Index i = 0; i + 1 < t_len; ++i) {
      for (Index j = 0; j < cfg.vocab_size; ++j) d_logits(i, j) = probs(i, j) * scale;
      d_logits(i, targets[size_t(i)]) -= scale;
    }

    // backward
    Matrix<S> d_hn = grad_detail::matmul_vjp_left<S>(d_logits, ckpt.output_head);
    if (mask.output_head) {
      grads.output_head += grad_detail::matmul_vjp_right<S>(hn, d_logits);
    }
    Vector<S>* d_final = mask.final_norm ? &grads.final_norm_scale : nullptr;
    Matrix<S> dh = grad_detail::norm_vjp<S>(h, ckpt.final_norm_scale, cfg, d_hn, d_final);

    for (size_t si = plan.stages.size(); si-- > 0;) {
      const Stage& st = plan.stages[si];
      auto& sc = stages[si];
      if (st.is_parallel()) {
        Matrix<S> d_base = dh;
        for (size_t mi = 0; mi < st.layers.size(); ++mi) {
          const int id = st.layers[mi];
          const auto& layer = ckpt.layers[size_t(id)];
          auto& mc = sc.members[mi];
          LayerGrads<S>* lg = mask.trains_layer(id) ? &grads.layers[size_t(id)] : nullptr;
          Matrix<S> du = ffn_residual_vjp<S>(mc.u, layer, cfg, mc.ffn, dh, lg);
          Matrix<S> dr = dh + du;
          d_base += du;
          d_base += attention_residual_vjp<S>(sc.input, layer, cfg, mc.attn, dr, lg);
        }
        dh = std::move(d_base);
      } else {
        const int id = st.layers[0];
        const auto& layer = ckpt.layers[size_t(id)];
        auto& mc = sc.members[0];
        LayerGrads<S>* lg = mask.trains_layer(id) ? &grads.layers[size_t(id)] : nullptr;
        Matrix<S> du = dh + ffn_residual_vjp<S>(mc.u, layer, cfg, mc.ffn, dh, lg);
        dh = du + attention_residual_vjp<S>(sc.input, layer, cfg, mc.attn, du, lg);
      }
    }
    if (mask.embedding) {
      for (Index t = 0; t < t_len; ++t) grads.embedding.row(tokens[size_t(t)]) += dh.row(t);
    }
  }
  return {total_loss / double(total_preds), grads};
}

}  // namespace lp
