#pragma once

// Plan and weight rewrites: shuffle, prune, merge, parallelize, pair
// parallelize, and the (s, e) perplexity sweeps over contiguous stretches.
// Ranges are 0-based inclusive [s, e] in code; the heatmap CSV uses 1-based
// indices.

#include "lp/corpus.hpp"
#include "lp/model.hpp"
#include "lp/plan.hpp"
#include "lp/rng.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace lp {

// Shortest round-trip decimal form; used for every CSV/JSON number the tool
// emits so reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void check_range(int s, int e, int n_layers) {
  if (s < 0 || e >= n_layers || s > e) {
    throw std::invalid_argument("range [" + std::to_string(s) + "," + std::to_string(e) +
                                "] invalid for " + std::to_string(n_layers) + " layers");
  }
}

namespace detail {

// Locates the stage span covering layers [s, e]; transforms require the range
// to consist of consecutive sequential stages (the base plan always does).
inline std::pair<size_t, size_t> sequential_span(const ExecutionPlan& plan, int s, int e) {
  size_t first = plan.stages.size(), last = 0;
  for (size_t i = 0; i < plan.stages.size(); ++i) {
    const Stage& st = plan.stages[i];
    const bool in_range = std::any_of(st.layers.begin(), st.layers.end(),
                                      [&](int id) { return id >= s && id <= e; });
    if (!in_range) continue;
    if (st.is_parallel() || st.layers[0] < s || st.layers[0] > e) {
      throw std::invalid_argument("range transform requires sequential stages over the range");
    }
    first = std::min(first, i);
    last = std::max(last, i);
  }
  if (first > last || first == plan.stages.size()) {
    throw std::invalid_argument("range [" + std::to_string(s) + "," + std::to_string(e) +
                                "] not present in plan");
  }
  return {first, last};
}

}  // namespace detail

// Reorders the sequential stages for layers [s, e]. `perm` maps new position i
// (within the range) to old position perm[i].
inline ExecutionPlan shuffle_range(const ExecutionPlan& plan, int s, int e,
                                   const std::vector<int>& perm) {
  if (int(perm.size()) != e - s + 1) {
    throw std::invalid_argument("permutation size " + std::to_string(perm.size()) +
                                " does not match range length " + std::to_string(e - s + 1));
  }
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= int(perm.size()) || seen[size_t(p)]) {
      throw std::invalid_argument("permutation is not a bijection on the range");
    }
    seen[size_t(p)] = true;
  }
  auto [first, last] = detail::sequential_span(plan, s, e);
  if (last - first != perm.size() - 1) {
    throw std::invalid_argument("range does not map to contiguous sequential stages");
  }
  ExecutionPlan out = plan;
  for (size_t i = 0; i < perm.size(); ++i) {
    out.stages[first + i] = plan.stages[first + size_t(perm[i])];
  }
  return out;
}

// Removes layers [s, e] from the plan. e < s is the empty range and is a
// no-op.
inline ExecutionPlan prune_range(const ExecutionPlan& plan, int s, int e) {
  if (e < s) return plan;
  ExecutionPlan out;
  for (const auto& st : plan.stages) {
    Stage kept = st;
    kept.layers.erase(std::remove_if(kept.layers.begin(), kept.layers.end(),
                                     [&](int id) { return id >= s && id <= e; }),
                      kept.layers.end());
    if (kept.layers.empty()) continue;
    if (kept.is_parallel() && kept.layers.size() == 1) {
      kept = Stage::sequential(kept.layers[0]);
    }
    out.stages.push_back(std::move(kept));
  }
  return out;
}

// Replaces layers [s, e] of the checkpoint with one layer whose tensors are
// the arithmetic means of the range. Layers above e shift down.
template <class S>
Checkpoint<S> merge_range(const Checkpoint<S>& ckpt, int s, int e) {
  check_range(s, e, ckpt.config.n_layers);
  Checkpoint<S> out;
  out.config = ckpt.config;
  out.config.n_layers = ckpt.config.n_layers - (e - s);
  out.embedding = ckpt.embedding;
  out.final_norm_scale = ckpt.final_norm_scale;
  out.output_head = ckpt.output_head;
  out.layers.reserve(size_t(out.config.n_layers));
  for (int i = 0; i < s; ++i) out.layers.push_back(ckpt.layers[size_t(i)]);

  LayerWeights<S> merged = ckpt.layers[size_t(s)];
  for (int i = s + 1; i <= e; ++i) {
    const auto& l = ckpt.layers[size_t(i)];
    merged.w_q += l.w_q;
    merged.w_k += l.w_k;
    merged.w_v += l.w_v;
    merged.w_o += l.w_o;
    merged.w_gate += l.w_gate;
    merged.w_up += l.w_up;
    merged.w_down += l.w_down;
    merged.norm_attn_scale += l.norm_attn_scale;
    merged.norm_ffn_scale += l.norm_ffn_scale;
  }
  const S inv = S(1) / S(e - s + 1);
  if (e > s) {
    merged.w_q *= inv;
    merged.w_k *= inv;
    merged.w_v *= inv;
    merged.w_o *= inv;
    merged.w_gate *= inv;
    merged.w_up *= inv;
    merged.w_down *= inv;
    merged.norm_attn_scale *= inv;
    merged.norm_ffn_scale *= inv;
  }
  out.layers.push_back(std::move(merged));
  for (int i = e + 1; i < ckpt.config.n_layers; ++i) out.layers.push_back(ckpt.layers[size_t(i)]);
  return out;
}

// Turns layers [s, e] into a single parallel group.
inline ExecutionPlan parallelize_range(const ExecutionPlan& plan, int s, int e) {
  auto [first, last] = detail::sequential_span(plan, s, e);
  std::vector<int> group;
  for (size_t i = first; i <= last; ++i) group.push_back(plan.stages[i].layers[0]);
  ExecutionPlan out;
  out.stages.assign(plan.stages.begin(), plan.stages.begin() + long(first));
  out.stages.push_back(group.size() == 1 ? Stage::sequential(group[0])
                                         : Stage::parallel(std::move(group)));
  out.stages.insert(out.stages.end(), plan.stages.begin() + long(last) + 1, plan.stages.end());
  return out;
}

// Chunks layers [s, e] left-to-right into parallel groups of `group_size`; a
// remainder of one stays sequential.
inline ExecutionPlan pair_parallelize_range(const ExecutionPlan& plan, int s, int e,
                                            int group_size = 2) {
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  auto [first, last] = detail::sequential_span(plan, s, e);
  std::vector<int> range;
  for (size_t i = first; i <= last; ++i) range.push_back(plan.stages[i].layers[0]);
  ExecutionPlan out;
  out.stages.assign(plan.stages.begin(), plan.stages.begin() + long(first));
  for (size_t i = 0; i < range.size(); i += size_t(group_size)) {
    const size_t n = std::min(size_t(group_size), range.size() - i);
    if (n == 1) {
      out.stages.push_back(Stage::sequential(range[i]));
    } else {
      out.stages.push_back(
          Stage::parallel(std::vector<int>(range.begin() + long(i), range.begin() + long(i + n))));
    }
  }
  out.stages.insert(out.stages.end(), plan.stages.begin() + long(last) + 1, plan.stages.end());
  return out;
}

struct HeatmapCell {
  int s = 0, e = 0;  // 1-based in CSV output
  double ppl = 0.0;
  std::vector<double> per_perm;  // shuffle only
};

struct HeatmapMatrix {
  std::string transform;
  int n_layers = 0;
  double baseline_ppl = 0.0;
  std::vector<HeatmapCell> cells;  // ascending (s, e)

  std::string to_csv() const {
    std::ostringstream os;
    os << "transform,n_layers,baseline_ppl\n";
    os << transform << "," << n_layers << "," << format_double(baseline_ppl) << "\n";
    os << "s,e,ppl\n";
    for (const auto& c : cells) {
      os << c.s << "," << c.e << "," << format_double(c.ppl) << "\n";
    }
    return os.str();
  }

  std::string per_perm_csv() const {
    std::ostringstream os;
    os << "s,e,perm,ppl\n";
    for (const auto& c : cells) {
      for (size_t p = 0; p < c.per_perm.size(); ++p) {
        os << c.s << "," << c.e << "," << p << "," << format_double(c.per_perm[p]) << "\n";
      }
    }
    return os.str();
  }

  std::optional<double> cell(int s1, int e1) const {
    for (const auto& c : cells) {
      if (c.s == s1 && c.e == e1) return c.ppl;
    }
    return std::nullopt;
  }
};

struct SweepOptions {
  int n_perms = 3;  // shuffle permutations averaged per cell
  int stride = 0;   // perplexity window; 0 = max_seq_len
  uint64_t seed = 17;
  int threads = 1;
  int group_size = 2;  // for kparallel
};

template <class S>
double transform_cell_ppl(const Checkpoint<S>& ckpt, const std::vector<int>& tokens,
                          const std::string& transform, int s, int e, const SweepOptions& opt,
                          std::vector<double>* per_perm = nullptr) {
  const ExecutionPlan base = ExecutionPlan::sequential(ckpt.config.n_layers);
  if (transform == "shuffle") {
    double total = 0.0;
    for (int p = 0; p < opt.n_perms; ++p) {
      Rng rng(mix_seed(opt.seed, uint64_t(p) * 1000003ULL + uint64_t(s) * 977 + uint64_t(e)));
      const auto perm = rng.permutation(e - s + 1);
      const double ppl = perplexity<S>(ckpt, tokens, shuffle_range(base, s, e, perm), opt.stride);
      if (per_perm) per_perm->push_back(ppl);
      total += ppl;
    }
    return total / double(opt.n_perms);
  }
  if (transform == "prune") {
    return perplexity<S>(ckpt, tokens, prune_range(base, s, e), opt.stride);
  }
  if (transform == "merge") {
    Checkpoint<S> merged = merge_range(ckpt, s, e);
    return perplexity<S>(merged, tokens, ExecutionPlan::sequential(merged.config.n_layers),
                         opt.stride);
  }
  if (transform == "parallel") {
    return perplexity<S>(ckpt, tokens, parallelize_range(base, s, e), opt.stride);
  }
  if (transform == "2parallel" || transform == "3parallel" || transform == "kparallel") {
    const int g = transform == "2parallel" ? 2 : (transform == "3parallel" ? 3 : opt.group_size);
    return perplexity<S>(ckpt, tokens, pair_parallelize_range(base, s, e, g), opt.stride);
  }
  throw std::invalid_argument("unknown transform: " + transform);
}

// Evaluates perplexity for every (s, e) with 0 <= s <= e < n_layers. Cells are
// independent; with threads > 1 they are computed concurrently and written
// back in deterministic (s, e) order.
template <class S>
HeatmapMatrix sweep(const Checkpoint<S>& ckpt, const std::vector<int>& tokens,
                    const std::string& transform, const SweepOptions& opt = {}) {
  // validate the name before doing any work
  if (transform != "shuffle" && transform != "prune" && transform != "merge" &&
      transform != "parallel" && transform != "2parallel" && transform != "3parallel") {
    throw std::invalid_argument("unknown transform: " + transform);
  }
  const int n = ckpt.config.n_layers;
  HeatmapMatrix hm;
  hm.transform = transform;
  hm.n_layers = n;
  hm.baseline_ppl = perplexity<S>(ckpt, tokens, ExecutionPlan::sequential(n), opt.stride);
  for (int s = 0; s < n; ++s) {
    for (int e = s; e < n; ++e) {
      HeatmapCell cell;
      cell.s = s + 1;
      cell.e = e + 1;
      hm.cells.push_back(cell);
    }
  }
  auto eval_cell = [&](HeatmapCell& cell) {
    std::vector<double> per_perm;
    cell.ppl = transform_cell_ppl<S>(ckpt, tokens, transform, cell.s - 1, cell.e - 1, opt,
                                     &per_perm);
    cell.per_perm = std::move(per_perm);
  };
  if (opt.threads <= 1) {
    for (auto& cell : hm.cells) eval_cell(cell);
  } else {
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    for (int w = 0; w < opt.threads; ++w) {
      workers.emplace_back([&]() {
        for (size_t i = next.fetch_add(1); i < hm.cells.size(); i = next.fetch_add(1)) {
          eval_cell(hm.cells[i]);
        }
      });
    }
    for (auto& t : workers) t.join();
  }
  return hm;
}

}  // namespace lp
