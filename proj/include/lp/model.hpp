#pragma once

// Pre-norm decoder-only transformer. Attention and FFN are exposed as
// residual-contribution maps (callers add the skip connection), which is the
// form every plan rewrite, shard and error analysis in this project consumes.

#include "lp/config.hpp"
#include "lp/plan.hpp"
#include "lp/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

template <class S>
struct LayerWeights {
  Matrix<S> w_q, w_k, w_v;    // D x D
  Matrix<S> w_o;              // D x D
  Matrix<S> w_gate, w_up;     // D x d_ff
  Matrix<S> w_down;           // d_ff x D
  Vector<S> norm_attn_scale;  // D
  Vector<S> norm_ffn_scale;   // D
};

template <class S>
struct Checkpoint {
  ModelConfig config;
  Matrix<S> embedding;  // vocab x D
  std::vector<LayerWeights<S>> layers;
  Vector<S> final_norm_scale;  // D
  Matrix<S> output_head;       // D x vocab
};

struct SequenceError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class S>
Matrix<S> apply_norm(const MatRef<S>& x, const VecRef<S>& scale, const ModelConfig& cfg) {
  if (cfg.norm_kind == NormKind::Rms) return rmsnorm<S>(x, scale, S(cfg.norm_eps));
  return layernorm<S>(x, scale, S(cfg.norm_eps));
}

// Rotary embedding, half-rotation layout: within each head, dimension pairs
// (i, i + head_dim/2) are rotated by angle pos * base^(-2i/head_dim).
// Positions are the global row indices offset by `pos_offset`.
template <class S>
void apply_rope(Matrix<S>& qk, int head_dim, double base, Index pos_offset = 0) {
  const Index t_len = qk.rows();
  const int half = head_dim / 2;
  const Index n_local_heads = qk.cols() / head_dim;
  std::vector<double> inv_freq(static_cast<size_t>(half), 0.0);
  for (int i = 0; i < half; ++i) {
    inv_freq[size_t(i)] = std::pow(base, -2.0 * double(i) / double(head_dim));
  }
  for (Index t = 0; t < t_len; ++t) {
    S* row = qk.data() + t * qk.cols();
    const double pos = double(t + pos_offset);
    for (Index h = 0; h < n_local_heads; ++h) {
      S* head = row + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double angle = pos * inv_freq[size_t(i)];
        const S c = S(std::cos(angle));
        const S s = S(std::sin(angle));
        const S a = head[i];
        const S b = head[i + half];
        head[i] = a * c - b * s;
        head[i + half] = a * s + b * c;
      }
    }
  }
}

// Post-rope projections and per-head attention probabilities, retained by the
// backward pass.
template <class S>
struct AttnCoreCache {
  Matrix<S> q, k, v;              // q, k after rotary embedding
  std::vector<Matrix<S>> probs;   // per local head, T x T, zero above diagonal
};

// Causal multi-head attention over an already-normalized input. Weight slices
// may cover any contiguous set of heads (the tensor-parallel executor passes
// per-device column slices); output has one column block per local head.
template <class S>
Matrix<S> attention_core(const Matrix<S>& xn, const MatRef<S>& w_q, const MatRef<S>& w_k,
                         const MatRef<S>& w_v, int head_dim, double rope_base,
                         AttnCoreCache<S>* cache = nullptr) {
  const Index t_len = xn.rows();
  const Index width = w_q.cols();
  Matrix<S> q = matmul<S>(xn, w_q);
  Matrix<S> k = matmul<S>(xn, w_k);
  Matrix<S> v = matmul<S>(xn, w_v);
  apply_rope(q, head_dim, rope_base);
  apply_rope(k, head_dim, rope_base);

  const Index n_local_heads = width / head_dim;
  const S inv_sqrt_hd = S(1.0 / std::sqrt(double(head_dim)));
  if (cache) {
    cache->probs.assign(size_t(n_local_heads), Matrix<S>::Zero(t_len, t_len));
  }
  Matrix<S> att(t_len, width);
  std::vector<S> probs(static_cast<size_t>(t_len), S(0));
  for (Index h = 0; h < n_local_heads; ++h) {
    const Index c0 = h * head_dim;
    for (Index i = 0; i < t_len; ++i) {
      const S* qi = q.data() + i * width + c0;
      // scores over the causal prefix j <= i
      S mx = S(0);
      for (Index j = 0; j <= i; ++j) {
        const S* kj = k.data() + j * width + c0;
        S dot = S(0);
        for (int d = 0; d < head_dim; ++d) dot += qi[d] * kj[d];
        dot *= inv_sqrt_hd;
        probs[size_t(j)] = dot;
        if (j == 0 || dot > mx) mx = dot;
      }
      S sum = S(0);
      for (Index j = 0; j <= i; ++j) {
        probs[size_t(j)] = std::exp(probs[size_t(j)] - mx);
        sum += probs[size_t(j)];
      }
      const S inv = S(1) / sum;
      S* out = att.data() + i * width + c0;
      for (int d = 0; d < head_dim; ++d) out[d] = S(0);
      for (Index j = 0; j <= i; ++j) {
        const S p = probs[size_t(j)] * inv;
        if (cache) cache->probs[size_t(h)](i, j) = p;
        const S* vj = v.data() + j * width + c0;
        for (int d = 0; d < head_dim; ++d) out[d] += p * vj[d];
      }
    }
  }
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
  }
  return att;
}

template <class S>
struct FfnCoreCache {
  Matrix<S> g, u;  // pre-activation gate and up projections
};

template <class S>
Matrix<S> ffn_core(const Matrix<S>& xn, const MatRef<S>& w_gate, const MatRef<S>& w_up,
                   const MatRef<S>& w_down, Activation act, FfnCoreCache<S>* cache = nullptr) {
  Matrix<S> g = matmul<S>(xn, w_gate);
  Matrix<S> u = matmul<S>(xn, w_up);
  Matrix<S> a = act == Activation::Silu ? silu<S>(g) : gelu<S>(g);
  a = a.cwiseProduct(u).eval();
  Matrix<S> out = matmul<S>(a, w_down);
  if (cache) {
    cache->g = std::move(g);
    cache->u = std::move(u);
  }
  return out;
}

template <class S>
void check_seq_len(const MatRef<S>& x, const ModelConfig& cfg) {
  if (x.rows() > cfg.max_seq_len) {
    throw SequenceError("sequence length " + std::to_string(x.rows()) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
}

// Attention residual A_k(x): norm, causal MHA with rotary embeddings, output
// projection. The caller adds x.
template <class S>
Matrix<S> attention_residual(const MatRef<S>& x, const LayerWeights<S>& layer,
                             const ModelConfig& cfg) {
  check_seq_len<S>(x, cfg);
  Matrix<S> xn = apply_norm<S>(x, layer.norm_attn_scale, cfg);
  Matrix<S> att = attention_core<S>(xn, layer.w_q, layer.w_k, layer.w_v, cfg.head_dim,
                                    cfg.rope_base);
  return matmul<S>(att, layer.w_o);
}

// FFN residual F_k(x) = W_down (act(norm(x) W_gate) .* (norm(x) W_up)).
template <class S>
Matrix<S> ffn_residual(const MatRef<S>& x, const LayerWeights<S>& layer, const ModelConfig& cfg) {
  check_seq_len<S>(x, cfg);
  Matrix<S> xn = apply_norm<S>(x, layer.norm_ffn_scale, cfg);
  return ffn_core<S>(xn, layer.w_gate, layer.w_up, layer.w_down, cfg.activation);
}

template <class S>
Matrix<S> embed_tokens(const Checkpoint<S>& ckpt, const std::vector<int>& tokens) {
  Matrix<S> h(Index(tokens.size()), ckpt.config.d_model);
  for (size_t t = 0; t < tokens.size(); ++t) {
    const int id = tokens[t];
    if (id < 0 || id >= ckpt.config.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) + " outside vocab");
    }
    h.row(Index(t)) = ckpt.embedding.row(id);
  }
  return h;
}

// One sequential decoder stage: h <- u + F(u) with u = h + A(h).
template <class S>
Matrix<S> sequential_stage(const Matrix<S>& h, const LayerWeights<S>& layer,
                           const ModelConfig& cfg) {
  Matrix<S> u = h + attention_residual<S>(h, layer, cfg);
  return u + ffn_residual<S>(u, layer, cfg);
}

// Parallel-group stage: every member reads the shared input, and all residual
// contributions sum onto it (n-ary extension of the two-layer case).
template <class S>
Matrix<S> parallel_stage(const Matrix<S>& h, const std::vector<int>& group,
                         const Checkpoint<S>& ckpt) {
  Matrix<S> acc = h;
  for (int id : group) {
    const LayerWeights<S>& layer = ckpt.layers[size_t(id)];
    Matrix<S> r = attention_residual<S>(h, layer, ckpt.config);
    Matrix<S> u = h + r;
    Matrix<S> s = ffn_residual<S>(u, layer, ckpt.config);
    acc += r;
    acc += s;
  }
  return acc;
}

// Full forward pass under a plan; returns T x vocab logits.
template <class S>
Matrix<S> forward(const Checkpoint<S>& ckpt, const std::vector<int>& tokens,
                  const ExecutionPlan& plan) {
  plan.validate(ckpt.config.n_layers, /*require_all=*/false);
  if (Index(tokens.size()) > ckpt.config.max_seq_len) {
    throw SequenceError("sequence length " + std::to_string(tokens.size()) +
                        " exceeds max_seq_len " + std::to_string(ckpt.config.max_seq_len));
  }
  Matrix<S> h = embed_tokens(ckpt, tokens);
  for (const auto& stage : plan.stages) {
    if (stage.is_parallel()) {
      h = parallel_stage<S>(h, stage.layers, ckpt);
    } else {
      h = sequential_stage<S>(h, ckpt.layers[size_t(stage.layers[0])], ckpt.config);
    }
  }
  Matrix<S> hn = apply_norm<S>(h, ckpt.final_norm_scale, ckpt.config);
  return matmul<S>(hn, ckpt.output_head);
}

// exp(mean next-token NLL) over non-overlapping windows of length
// min(max_seq_len, stride). A trailing partial window still contributes when
// it holds at least two tokens.
template <class S>
double perplexity(const Checkpoint<S>& ckpt, const std::vector<int>& tokens,
                  const ExecutionPlan& plan, int stride = 0) {
  if (tokens.size() < 2) throw std::invalid_argument("perplexity: corpus shorter than 2 tokens");
  const size_t window =
      size_t(stride > 0 ? std::min(stride, ckpt.config.max_seq_len) : ckpt.config.max_seq_len);
  double total = 0.0;
  size_t count = 0;
  for (size_t start = 0; start + 1 < tokens.size(); start += window) {
    const size_t len = std::min(window, tokens.size() - start);
    if (len < 2) break;
    std::vector<int> win(tokens.begin() + long(start), tokens.begin() + long(start + len));
    Matrix<S> logits = forward<S>(ckpt, win, plan);
    std::vector<int> targets(win.begin() + 1, win.end());
    Vector<S> nll = nll_rows<S>(logits.topRows(Index(len - 1)), targets);
    for (Index i = 0; i < nll.size(); ++i) total += double(nll[i]);
    count += len - 1;
  }
  return std::exp(total / double(count));
}

// Seeded Gaussian initialization, every weight tensor scaled 1/sqrt(D).
template <class S>
Checkpoint<S> generate_toy_checkpoint(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const Index d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab_size;
  const S std_dev = S(1.0 / std::sqrt(double(d)));
  Checkpoint<S> ckpt;
  ckpt.config = cfg;
  ckpt.embedding = gaussian_matrix<S>(rng, v, d, std_dev);
  ckpt.layers.resize(size_t(cfg.n_layers));
  for (auto& layer : ckpt.layers) {
    layer.w_q = gaussian_matrix<S>(rng, d, d, std_dev);
    layer.w_k = gaussian_matrix<S>(rng, d, d, std_dev);
    layer.w_v = gaussian_matrix<S>(rng, d, d, std_dev);
    layer.w_o = gaussian_matrix<S>(rng, d, d, std_dev);
    layer.w_gate = gaussian_matrix<S>(rng, d, ff, std_dev);
    layer.w_up = gaussian_matrix<S>(rng, d, ff, std_dev);
    layer.w_down = gaussian_matrix<S>(rng, ff, d, std_dev);
    layer.norm_attn_scale = Vector<S>::Ones(d);
    layer.norm_ffn_scale = Vector<S>::Ones(d);
  }
  ckpt.final_norm_scale = Vector<S>::Ones(d);
  ckpt.output_head = gaussian_matrix<S>(rng, d, v, std_dev);
  return ckpt;
}

template <class To, class From>
LayerWeights<To> cast_layer(const LayerWeights<From>& in) {
  LayerWeights<To> out;
  out.w_q = in.w_q.template cast<To>();
  out.w_k = in.w_k.template cast<To>();
  out.w_v = in.w_v.template cast<To>();
  out.w_o = in.w_o.template cast<To>();
  out.w_gate = in.w_gate.template cast<To>();
  out.w_up = in.w_up.template cast<To>();
  out.w_down = in.w_down.template cast<To>();
  out.norm_attn_scale = in.norm_attn_scale.template cast<To>();
  out.norm_ffn_scale = in.norm_ffn_scale.template cast<To>();
  return out;
}

template <class To, class From>
Checkpoint<To> cast_checkpoint(const Checkpoint<From>& in) {
  Checkpoint<To> out;
  out.config = in.config;
  out.embedding = in.embedding.template cast<To>();
  out.layers.reserve(in.layers.size());
  for (const auto& l : in.layers) out.layers.push_back(cast_layer<To>(l));
  out.final_norm_scale = in.final_norm_scale.template cast<To>();
  out.output_head = in.output_head.template cast<To>();
  return out;
}

}  // namespace lp
