#pragma once

// Quantitative diagnostics around the layer-parallel approximation:
//  - linear CKA between standard and counterfactual activations,
//  - the exact two-layer error T_seq - T_LP and its residual norms,
//  - a first-order bound assembled from Jacobian operator norms,
//  - the epsilon-scaling study (error must decay quadratically), and
//  - per-layer error-amplification factors ||I + J_f||.
//
// Jacobian-vector products come from central finite differences; the transpose
// applications reuse the analytic reverse-mode VJPs. Analyses default to
// double precision.

#include "lp/grad.hpp"
#include "lp/model.hpp"
#include "lp/rng.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lp {

// ---------------------------------------------------------------------------
// Linear CKA

// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) with column-centered inputs.
// Zero when either centered matrix vanishes.
template <class S>
double linear_cka(const MatRef<S>& x, const MatRef<S>& y) {
  if (x.rows() != y.rows()) {
    throw ShapeError("cka: row counts differ: " + shape_str<S>(x) + " vs " + shape_str<S>(y));
  }
  if (x.rows() < 2) throw std::invalid_argument("cka: need at least 2 rows");
  Matrix<double> xc = x.template cast<double>();
  Matrix<double> yc = y.template cast<double>();
  xc.rowwise() -= xc.colwise().mean();
  yc.rowwise() -= yc.colwise().mean();
  const double xnorm = xc.norm(), ynorm = yc.norm();
  if (xnorm == 0.0 || ynorm == 0.0) return 0.0;
  const double cross = (yc.transpose() * xc).squaredNorm();
  const double den = (xc.transpose() * xc).norm() * (yc.transpose() * yc).norm();
  if (den == 0.0) return 0.0;
  return cross / den;
}

// ---------------------------------------------------------------------------
// Counterfactual CKA profile

struct CkaProfile {
  // Indexed by layer; entry k compares layer k's activations with the
  // counterfactual that removes layer k-1's residual contribution. Entry 0 has
  // no predecessor and is left as NaN.
  std::vector<double> s_attn;
  std::vector<double> s_ffn;
  int n_prompts = 0;
  uint64_t prompt_seed = 0;
};

struct CkaOptions {
  int prompt_len = 64;    // tokens per prompt (capped by max_seq_len)
  int last_tokens = 32;   // token positions fed into CKA, per prompt
  uint64_t seed = 7;      // prompt placement
};

// Records per-layer attention/FFN activations under the standard pass and
// under the pass whose input drops the previous layer's residuals, then
// stacks token rows across prompts and scores them with CKA.
template <class S>
CkaProfile counterfactual_profile(const Checkpoint<S>& ckpt, const std::vector<int>& tokens,
                                  int n_prompts, const CkaOptions& opt = {}) {
  if (n_prompts < 1) throw std::invalid_argument("counterfactual_profile: n_prompts must be >= 1");
  const ModelConfig& cfg = ckpt.config;
  const int n_layers = cfg.n_layers;
  const int prompt_len = std::min(opt.prompt_len, cfg.max_seq_len);
  if (tokens.size() < size_t(prompt_len)) {
    throw std::invalid_argument("corpus shorter than one prompt");
  }
  const int keep = std::min(opt.last_tokens, prompt_len);

  // stacked activation rows, per layer
  std::vector<Matrix<S>> a_std(static_cast<size_t>(n_layers), Matrix<S>());
  std::vector<Matrix<S>> a_cf(static_cast<size_t>(n_layers), Matrix<S>());
  std::vector<Matrix<S>> f_std(static_cast<size_t>(n_layers), Matrix<S>());
  std::vector<Matrix<S>> f_cf(static_cast<size_t>(n_layers), Matrix<S>());
  const Index rows_total = Index(n_prompts) * keep;
  for (int l = 1; l < n_layers; ++l) {
    a_std[size_t(l)].resize(rows_total, cfg.d_model);
    a_cf[size_t(l)].resize(rows_total, cfg.d_model);
    f_std[size_t(l)].resize(rows_total, cfg.d_model);
    f_cf[size_t(l)].resize(rows_total, cfg.d_model);
  }

  Rng rng(opt.seed);
  for (int p = 0; p < n_prompts; ++p) {
    const size_t start = size_t(rng.next_below(uint64_t(tokens.size() - size_t(prompt_len) + 1)));
    const std::vector<int> prompt(tokens.begin() + long(start),
                                  tokens.begin() + long(start + size_t(prompt_len)));
    // h_states[l] is the residual stream after l layers
    std::vector<Matrix<S>> h_states;
    h_states.reserve(size_t(n_layers) + 1);
    h_states.push_back(embed_tokens(ckpt, prompt));
    for (int l = 0; l < n_layers; ++l) {
      h_states.push_back(sequential_stage<S>(h_states.back(), ckpt.layers[size_t(l)], cfg));
    }
    const Index r0 = Index(p) * keep;
    const Index t0 = Index(prompt_len - keep);
    for (int l = 1; l < n_layers; ++l) {
      const auto& layer = ckpt.layers[size_t(l)];
      const Matrix<S>& h_in = h_states[size_t(l)];        // standard input to layer l
      const Matrix<S>& h_prev = h_states[size_t(l) - 1];  // counterfactual input
      Matrix<S> a1 = attention_residual<S>(h_in, layer, cfg);
      Matrix<S> f1 = ffn_residual<S>(Matrix<S>(h_in + a1), layer, cfg);
      Matrix<S> a2 = attention_residual<S>(h_prev, layer, cfg);
      Matrix<S> f2 = ffn_residual<S>(Matrix<S>(h_prev + a2), layer, cfg);
      a_std[size_t(l)].middleRows(r0, keep) = a1.middleRows(t0, keep);
      a_cf[size_t(l)].middleRows(r0, keep) = a2.middleRows(t0, keep);
      f_std[size_t(l)].middleRows(r0, keep) = f1.middleRows(t0, keep);
      f_cf[size_t(l)].middleRows(r0, keep) = f2.middleRows(t0, keep);
    }
  }

  CkaProfile profile;
  profile.n_prompts = n_prompts;
  profile.prompt_seed = opt.seed;
  profile.s_attn.assign(size_t(n_layers), std::nan(""));
  profile.s_ffn.assign(size_t(n_layers), std::nan(""));
  for (int l = 1; l < n_layers; ++l) {
    profile.s_attn[size_t(l)] = linear_cka<S>(a_std[size_t(l)], a_cf[size_t(l)]);
    profile.s_ffn[size_t(l)] = linear_cka<S>(f_std[size_t(l)], f_cf[size_t(l)]);
  }
  return profile;
}

// ---------------------------------------------------------------------------
// Exact two-layer LP error

struct LpErrorEntry {
  double measured_error = 0;  // ||T_seq - T_LP||_F
  double delta1_norm = 0;     // ||A_k(x) + F_k(u_k)||_F
  double attn_k1_norm = 0;    // ||A_{k+1}(x)||_F
  double ffn_k_norm = 0;      // ||F_k(u_k)||_F
};

template <class S>
LpErrorEntry lp_error(const Matrix<S>& x, const LayerWeights<S>& layer_k,
                      const LayerWeights<S>& layer_k1, const ModelConfig& cfg) {
  // sequential: u_k, h_k, u_{k+1}, h_{k+1}
  Matrix<S> a_k = attention_residual<S>(x, layer_k, cfg);
  Matrix<S> u_k = x + a_k;
  Matrix<S> f_k = ffn_residual<S>(u_k, layer_k, cfg);
  Matrix<S> h_k = u_k + f_k;
  Matrix<S> u_k1 = h_k + attention_residual<S>(h_k, layer_k1, cfg);
  Matrix<S> t_seq = u_k1 + ffn_residual<S>(u_k1, layer_k1, cfg);

  // layer-parallel: shared attention input, shared FFN input
  Matrix<S> a_k1 = attention_residual<S>(x, layer_k1, cfg);
  Matrix<S> u_t = x + a_k + a_k1;
  Matrix<S> t_lp = u_t + ffn_residual<S>(u_t, layer_k, cfg) + ffn_residual<S>(u_t, layer_k1, cfg);

  LpErrorEntry entry;
  entry.measured_error = double(frobenius_norm<S>(Matrix<S>(t_seq - t_lp)));
  entry.delta1_norm = double(frobenius_norm<S>(Matrix<S>(a_k + f_k)));
  entry.attn_k1_norm = double(frobenius_norm<S>(a_k1));
  entry.ffn_k_norm = double(frobenius_norm<S>(f_k));
  return entry;
}

// ---------------------------------------------------------------------------
// Jacobian operator norms by power iteration

struct JacobianEstimate {
  double op_norm = 0;
  bool converged = false;
  int iterations = 0;
};

struct PowerIterOptions {
  int max_iterations = 20;
  double tolerance = 1e-6;  // relative change of the Rayleigh quotient
  uint64_t seed = 99;
};

// Power iteration on J^T J given apply/transpose-apply callables. The Rayleigh
// quotient <v, J^T J v> / <v, v> tracks the squared top singular value.
template <class S>
JacobianEstimate power_iteration_norm(const std::function<Matrix<S>(const Matrix<S>&)>& jvp,
                                      const std::function<Matrix<S>(const Matrix<S>&)>& vjp,
                                      Index rows, Index cols, int probes,
                                      const PowerIterOptions& opt = {}) {
  if (probes < 1) throw std::invalid_argument("power_iteration_norm: probes must be >= 1");
  JacobianEstimate best;
  Rng rng(opt.seed);
  for (int p = 0; p < probes; ++p) {
    Matrix<S> v = gaussian_matrix<S>(rng, rows, cols, S(1));
    const S vn = frobenius_norm<S>(v);
    if (vn == S(0)) continue;
    v /= vn;
    double sigma2 = 0, prev = -1;
    bool converged = false;
    int it = 0;
    while (it < opt.max_iterations) {
      ++it;
      Matrix<S> w = jvp(v);
      Matrix<S> z = vjp(w);
      double num = 0, den = 0;
      for (Index i = 0; i < z.size(); ++i) {
        num += double(v.data()[i]) * double(z.data()[i]);
        den += double(v.data()[i]) * double(v.data()[i]);
      }
      sigma2 = num / den;
      const S zn = frobenius_norm<S>(z);
      if (double(zn) == 0.0) {
        sigma2 = 0;
        converged = true;
        break;
      }
      if (prev >= 0 && std::abs(sigma2 - prev) <= opt.tolerance * std::max(sigma2, 1e-30)) {
        converged = true;
        break;
      }
      prev = sigma2;
      v = z / zn;
    }
    const double norm = std::sqrt(std::max(sigma2, 0.0));
    if (norm >= best.op_norm) {
      best.op_norm = norm;
      best.converged = converged;
      best.iterations = it;
    }
  }
  return best;
}

// Largest singular value of the map's Jacobian at `x`. Forward applications
// are central finite differences with step 1e-4 ||x||_F / sqrt(T D) along unit
// directions; transpose applications must be exact VJPs of the same map.
template <class S>
JacobianEstimate jacobian_operator_norm(
    const std::function<Matrix<S>(const Matrix<S>&)>& map, const Matrix<S>& x, int probes,
    const std::function<Matrix<S>(const Matrix<S>&, const Matrix<S>&)>& vjp_at,
    const PowerIterOptions& opt = {}) {
  const Index t_len = x.rows(), d = x.cols();
  const double xnorm = double(frobenius_norm<S>(x));
  const double step = 1e-4 * (xnorm > 0 ? xnorm : 1.0) / std::sqrt(double(t_len * d));
  std::function<Matrix<S>(const Matrix<S>&)> jvp = [&map, &x, step](const Matrix<S>& v) {
    Matrix<S> plus = map(Matrix<S>(x + S(step) * v));
    Matrix<S> minus = map(Matrix<S>(x - S(step) * v));
    return Matrix<S>((plus - minus) / S(2 * step));
  };
  std::function<Matrix<S>(const Matrix<S>&)> vjp = [&vjp_at, &x](const Matrix<S>& w) {
    return vjp_at(x, w);
  };
  return power_iteration_norm<S>(jvp, vjp, t_len, d, probes, opt);
}

// ---------------------------------------------------------------------------
// First-order bound

struct BoundReport {
  LpErrorEntry error;
  JacobianEstimate j_attn_k1;  // at x
  JacobianEstimate j_ffn_k;    // at u_k
  JacobianEstimate j_ffn_k1;   // at u~
  double attention_shift = 0;
  double ffn_k_shift = 0;
  double ffn_k1_shift = 0;
  double total_bound = 0;
};

// Assembles the three first-order terms: the attention evaluation shift, the
// first FFN shift, and the second FFN shift (which compounds the attention
// shift), each as operator norm times residual magnitude.
template <class S>
BoundReport first_order_bound(const Matrix<S>& x, const LayerWeights<S>& layer_k,
                              const LayerWeights<S>& layer_k1, const ModelConfig& cfg, int probes,
                              const PowerIterOptions& opt = {}) {
  BoundReport report;
  report.error = lp_error<S>(x, layer_k, layer_k1, cfg);

  Matrix<S> a_k = attention_residual<S>(x, layer_k, cfg);
  Matrix<S> u_k = x + a_k;
  Matrix<S> u_t = u_k + attention_residual<S>(x, layer_k1, cfg);

  auto attn_map = [&](const Matrix<S>& p) { return attention_residual<S>(p, layer_k1, cfg); };
  auto attn_vjp = [&](const Matrix<S>& p, const Matrix<S>& d) {
    return attention_input_vjp<S>(p, layer_k1, cfg, d);
  };
  auto ffn_k_map = [&](const Matrix<S>& p) { return ffn_residual<S>(p, layer_k, cfg); };
  auto ffn_k_vjp = [&](const Matrix<S>& p, const Matrix<S>& d) {
    return ffn_input_vjp<S>(p, layer_k, cfg, d);
  };
  auto ffn_k1_map = [&](const Matrix<S>& p) { return ffn_residual<S>(p, layer_k1, cfg); };
  auto ffn_k1_vjp = [&](const Matrix<S>& p, const Matrix<S>& d) {
    return ffn_input_vjp<S>(p, layer_k1, cfg, d);
  };

  PowerIterOptions o = opt;
  report.j_attn_k1 = jacobian_operator_norm<S>(attn_map, x, probes, attn_vjp, o);
  o.seed = mix_seed(opt.seed, 1);
  report.j_ffn_k = jacobian_operator_norm<S>(ffn_k_map, u_k, probes, ffn_k_vjp, o);
  o.seed = mix_seed(opt.seed, 2);
  report.j_ffn_k1 = jacobian_operator_norm<S>(ffn_k1_map, u_t, probes, ffn_k1_vjp, o);

  report.attention_shift = report.j_attn_k1.op_norm * report.error.delta1_norm;
  report.ffn_k_shift = report.j_ffn_k.op_norm * report.error.attn_k1_norm;
  report.ffn_k1_shift =
      report.j_ffn_k1.op_norm * (report.error.ffn_k_norm + report.attention_shift);
  report.total_bound = report.attention_shift + report.ffn_k_shift + report.ffn_k1_shift;
  return report;
}

// ---------------------------------------------------------------------------
// Epsilon scaling study

struct EpsPoint {
  double epsilon = 0;
  double error = 0;
};

// Scales both layers' residual-branch output weights (w_o, w_down) by epsilon
// and measures the exact LP error. Both the residual magnitudes and the branch
// Jacobians scale with epsilon, so the error must decay quadratically.
template <class S>
std::vector<EpsPoint> epsilon_scaling_study(const Matrix<S>& x, const LayerWeights<S>& layer_k,
                                            const LayerWeights<S>& layer_k1,
                                            const ModelConfig& cfg,
                                            const std::vector<double>& epsilons) {
  std::vector<EpsPoint> points;
  points.reserve(epsilons.size());
  for (double eps : epsilons) {
    LayerWeights<S> lk = layer_k;
    LayerWeights<S> lk1 = layer_k1;
    lk.w_o *= S(eps);
    lk.w_down *= S(eps);
    lk1.w_o *= S(eps);
    lk1.w_down *= S(eps);
    points.push_back({eps, lp_error<S>(x, lk, lk1, cfg).measured_error});
  }
  return points;
}

// Least-squares slope of log(error) against log(epsilon); zero-error points
// are excluded.
inline double loglog_slope(const std::vector<EpsPoint>& points) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& p : points) {
    if (p.error <= 0 || p.epsilon <= 0) continue;
    const double lx = std::log(p.epsilon), ly = std::log(p.error);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n < 2) throw std::invalid_argument("loglog_slope: need at least two nonzero points");
  return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Error accumulation factors

struct AccumulationReport {
  std::vector<double> factors;        // ||I + J_f|| per layer
  std::vector<double> tail_products;  // product over layers after k
  std::vector<bool> converged;
};

// Estimates how much each layer can amplify an injected perturbation, at the
// layer inputs produced by running x through the sequential plan.
template <class S>
AccumulationReport accumulation_factors(const Checkpoint<S>& ckpt, const Matrix<S>& x,
                                        int probes = 2, const PowerIterOptions& opt = {}) {
  const ModelConfig& cfg = ckpt.config;
  const int n_layers = cfg.n_layers;
  AccumulationReport report;
  report.factors.resize(size_t(n_layers));
  report.converged.resize(size_t(n_layers));

  Matrix<S> h = x;
  for (int l = 0; l < n_layers; ++l) {
    const auto& layer = ckpt.layers[size_t(l)];
    // residual map alone, so the identity part is exact in the JVP
    auto f_map = [&](const Matrix<S>& p) {
      Matrix<S> r = attention_residual<S>(p, layer, cfg);
      Matrix<S> u = p + r;
      return Matrix<S>(r + ffn_residual<S>(u, layer, cfg));
    };
    const Index t_len = h.rows(), d = h.cols();
    const double hnorm = double(frobenius_norm<S>(h));
    const double step = 1e-4 * (hnorm > 0 ? hnorm : 1.0) / std::sqrt(double(t_len * d));

    // I + J_f: the finite difference covers f alone so zero-weight layers give
    // exactly the identity
    std::function<Matrix<S>(const Matrix<S>&)> jvp = [&, step](const Matrix<S>& v) {
      Matrix<S> plus = f_map(Matrix<S>(h + S(step) * v));
      Matrix<S> minus = f_map(Matrix<S>(h - S(step) * v));
      return Matrix<S>(v + (plus - minus) / S(2 * step));
    };
    std::function<Matrix<S>(const Matrix<S>&)> vjp = [&](const Matrix<S>& u) {
      return Matrix<S>(u + layer_residual_input_vjp<S>(h, layer, cfg, u));
    };

    PowerIterOptions o = opt;
    o.seed = mix_seed(opt.seed, uint64_t(l));
    JacobianEstimate est = power_iteration_norm<S>(jvp, vjp, t_len, d, probes, o);
    report.factors[size_t(l)] = est.op_norm;
    report.converged[size_t(l)] = est.converged;
    h = sequential_stage<S>(h, layer, cfg);
  }

  report.tail_products.resize(size_t(n_layers));
  double prod = 1.0;
  for (int l = n_layers - 1; l >= 0; --l) {
    report.tail_products[size_t(l)] = prod;  // product over layers strictly after l
    prod *= report.factors[size_t(l)];
  }
  return report;
}

}  // namespace lp
