#include "lp/cli.hpp"

#include "lp/analysis.hpp"
#include "lp/checkpoint_io.hpp"
#include "lp/corpus.hpp"
#include "lp/lp_exec.hpp"
#include "lp/manifest.hpp"
#include "lp/model.hpp"
#include "lp/train.hpp"
#include "lp/transforms.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace lp::cli {
namespace {

using nlohmann::json;

uint64_t apply_env_seed(uint64_t seed) {
  if (const char* s = std::getenv("LP_SEED")) {
    return std::strtoull(s, nullptr, 10);
  }
  return seed;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file: " + path);
  out << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

ExecutionPlan load_plan(const std::string& path) {
  return plan_from_json(json::parse(read_text_file(path)));
}

// Flags shared by gen-model and pretrain: a JSON config file plus overrides.
struct ConfigFlags {
  std::string config_path;
  ModelConfig cfg;  // starts at toy defaults

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "model config JSON file");
    cmd->add_option("--layers", cfg.n_layers, "decoder layers");
    cmd->add_option("--d-model", cfg.d_model, "model width");
    cmd->add_option("--heads", cfg.n_heads, "attention heads");
    cmd->add_option("--d-ff", cfg.d_ff, "FFN hidden width");
    cmd->add_option("--vocab", cfg.vocab_size, "vocabulary size");
    cmd->add_option("--max-seq", cfg.max_seq_len, "maximum sequence length");
    cmd->add_option("--rope-base", cfg.rope_base, "rotary base");
    cmd->add_option_function<std::string>(
        "--norm", [this](const std::string& v) { cfg.norm_kind = norm_kind_from_string(v); },
        "normalization kind: rms|layernorm");
    cmd->add_option_function<std::string>(
        "--activation",
        [this](const std::string& v) { cfg.activation = activation_from_string(v); },
        "FFN activation: silu|gelu");
    cmd->add_option("--seed", cfg.seed, "model seed");
  }

  ModelConfig resolve() const {
    ModelConfig out = cfg;
    if (!config_path.empty()) {
      ModelConfig from_file = model_config_from_json(json::parse(read_text_file(config_path)));
      // file wins for fields the flags left at defaults; flags win otherwise
      out = from_file;
      ModelConfig defaults;
      auto pick = [](auto flag_value, auto default_value, auto file_value) {
        return flag_value == default_value ? file_value : flag_value;
      };
      out.n_layers = pick(cfg.n_layers, defaults.n_layers, from_file.n_layers);
      out.d_model = pick(cfg.d_model, defaults.d_model, from_file.d_model);
      out.n_heads = pick(cfg.n_heads, defaults.n_heads, from_file.n_heads);
      out.d_ff = pick(cfg.d_ff, defaults.d_ff, from_file.d_ff);
      out.vocab_size = pick(cfg.vocab_size, defaults.vocab_size, from_file.vocab_size);
      out.max_seq_len = pick(cfg.max_seq_len, defaults.max_seq_len, from_file.max_seq_len);
      out.rope_base = pick(cfg.rope_base, defaults.rope_base, from_file.rope_base);
      out.seed = pick(cfg.seed, defaults.seed, from_file.seed);
      if (cfg.norm_kind != defaults.norm_kind) out.norm_kind = cfg.norm_kind;
      if (cfg.activation != defaults.activation) out.activation = cfg.activation;
    }
    out.head_dim = out.d_model / std::max(out.n_heads, 1);
    out.seed = apply_env_seed(out.seed);
    out.validate();
    return out;
  }
};

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

// Loads a checkpoint in its stored precision and hands it to fn.
template <class Fn>
int with_checkpoint(const std::string& path, Fn&& fn) {
  const std::string dtype = checkpoint_dtype(path);
  if (dtype == "f32") {
    auto ckpt = load_checkpoint<float>(path);
    return fn(ckpt);
  }
  auto ckpt = load_checkpoint<double>(path);
  return fn(ckpt);
}

template <class S>
Checkpoint<double> to_analysis_precision(const Checkpoint<S>& ckpt) {
  if constexpr (std::is_same_v<S, double>) {
    return ckpt;
  } else {
    return cast_checkpoint<double>(ckpt);
  }
}

json sync_stats_json(const SyncStats& stats) {
  return json{{"allreduce_count", stats.allreduce_count},
              {"elements_reduced", stats.elements_reduced},
              {"simulated_sync_time_s", stats.simulated_sync_time},
              {"compute_time_proxy", stats.compute_time_proxy}};
}

// ---------------------------------------------------------------------------
// Subcommand payloads

struct GenModelArgs {
  ConfigFlags config;
  std::string out;
  std::string precision = "f32";
};

int cmd_gen_model(const GenModelArgs& a, RunManifest manifest) {
  Timer timer;
  ModelConfig cfg = a.config.resolve();
  manifest.seeds["model"] = cfg.seed;
  if (a.precision == "f64") {
    save_checkpoint(generate_toy_checkpoint<double>(cfg), a.out);
  } else if (a.precision == "f32") {
    save_checkpoint(generate_toy_checkpoint<float>(cfg), a.out);
  } else {
    throw std::invalid_argument("unknown precision: " + a.precision);
  }
  manifest.outputs = {a.out};
  manifest.wall_time_s = timer.seconds();
  manifest.write_all();
  std::cerr << "wrote checkpoint " << a.out << " (" << a.precision << ")\n";
  return 0;
}

struct GenCorpusArgs {
  std::string out;
  uint64_t seed = 42;
  int order = 3;
  uint64_t length = 65536;
  int vocab = 256;
};

int cmd_gen_corpus(const GenCorpusArgs& a, RunManifest manifest) {
  Timer timer;
  const uint64_t seed = apply_env_seed(a.seed);
  manifest.seeds["corpus"] = seed;
  Corpus corpus = generate_corpus(seed, a.order, a.length, a.vocab);
  save_corpus(corpus, a.out);
  manifest.outputs = {a.out};
  manifest.wall_time_s = timer.seconds();
  manifest.write_all();
  std::cerr << "wrote corpus " << a.out << " (" << corpus.tokens.size() << " tokens)\n";
  return 0;
}

struct PretrainArgs {
  ConfigFlags config;
  std::string corpus;
  std::string out;
  std::string losses;
  std::string precision = "f32";
  TrainOptions opt;
};

std::string losses_csv(const std::vector<std::pair<int, double>>& losses) {
  std::ostringstream os;
  os << "step,loss\n";
  for (const auto& [step, loss] : losses) os << step << "," << format_double(loss) << "\n";
  return os.str();
}

int cmd_pretrain(const PretrainArgs& a, RunManifest manifest) {
  Timer timer;
  ModelConfig cfg = a.config.resolve();
  TrainOptions opt = a.opt;
  opt.seed = apply_env_seed(opt.seed);
  manifest.seeds["model"] = cfg.seed;
  manifest.seeds["sampling"] = opt.seed;
  manifest.add_input(a.corpus);
  Corpus corpus = load_corpus(a.corpus);

  if (a.precision == "f64") {
    auto result = pretrain<double>(cfg, corpus.tokens, opt);
    save_checkpoint(result.checkpoint, a.out);
    if (!a.losses.empty()) write_text_file(a.losses, losses_csv(result.losses));
  } else if (a.precision == "f32") {
    auto result = pretrain<float>(cfg, corpus.tokens, opt);
    save_checkpoint(result.checkpoint, a.out);
    if (!a.losses.empty()) write_text_file(a.losses, losses_csv(result.losses));
  } else {
    throw std::invalid_argument("unknown precision: " + a.precision);
  }
  manifest.outputs = {a.out};
  if (!a.losses.empty()) manifest.outputs.push_back(a.losses);
  manifest.wall_time_s = timer.seconds();
  manifest.write_all();
  std::cerr << "pretrained " << opt.steps << " steps -> " << a.out << "\n";
  return 0;
}

struct EvalPplArgs {
  std::string checkpoint;
  std::string corpus;
  std::string plan;
  std::string out;
  int stride = 0;
};

int cmd_eval_ppl(const EvalPplArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  manifest.add_input(a.corpus);
  Corpus corpus = load_corpus(a.corpus);
  return with_checkpoint(a.checkpoint, [&](const auto& ckpt) {
    ExecutionPlan plan = a.plan.empty() ? ExecutionPlan::sequential(ckpt.config.n_layers)
                                        : load_plan(a.plan);
    if (!a.plan.empty()) manifest.add_input(a.plan);
    using S = std::decay_t<decltype(ckpt.embedding(0, 0))>;
    const double ppl = perplexity<S>(ckpt, corpus.tokens, plan, a.stride);
    json report{{"ppl", ppl},
                {"tokens", corpus.tokens.size()},
                {"effective_depth", plan.effective_depth()},
                {"stride", a.stride}};
    const std::string text = report.dump(2) + "\n";
    if (a.out.empty()) {
      std::cout << text;
    } else {
      write_text_file(a.out, text);
      manifest.outputs = {a.out};
      manifest.wall_time_s = timer.seconds();
      manifest.write_all();
    }
    std::cerr << "ppl " << format_double(ppl) << "\n";
    return 0;
  });
}

struct SweepArgs {
  std::string transform;
  std::string checkpoint;
  std::string corpus;
  std::string out;
  std::string per_perm_out;
  SweepOptions opt;
};

int cmd_sweep(const SweepArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  manifest.add_input(a.corpus);
  SweepOptions opt = a.opt;
  opt.seed = apply_env_seed(opt.seed);
  manifest.seeds["shuffle"] = opt.seed;
  Corpus corpus = load_corpus(a.corpus);
  return with_checkpoint(a.checkpoint, [&](const auto& ckpt) {
    using S = std::decay_t<decltype(ckpt.embedding(0, 0))>;
    HeatmapMatrix hm = sweep<S>(ckpt, corpus.tokens, a.transform, opt);
    write_text_file(a.out, hm.to_csv());
    manifest.outputs = {a.out};
    if (!a.per_perm_out.empty()) {
      write_text_file(a.per_perm_out, hm.per_perm_csv());
      manifest.outputs.push_back(a.per_perm_out);
    }
    manifest.wall_time_s = timer.seconds();
    manifest.write_all();
    std::cerr << a.transform << " sweep: " << hm.cells.size() << " cells, baseline ppl "
              << format_double(hm.baseline_ppl) << "\n";
    return 0;
  });
}

struct LpRunArgs {
  std::string checkpoint;
  std::string plan;
  std::string report;
  std::string corpus;
  int devices = 2;
  int seq_len = 32;
  double latency_us = 0;
  double bandwidth_gb = 0;
  uint64_t seed = 7;
};

int cmd_lp_run(const LpRunArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  manifest.add_input(a.plan);
  ExecutionPlan plan = load_plan(a.plan);
  return with_checkpoint(a.checkpoint, [&](const auto& ckpt) {
    using S = std::decay_t<decltype(ckpt.embedding(0, 0))>;
    std::vector<int> tokens;
    if (!a.corpus.empty()) {
      manifest.add_input(a.corpus);
      Corpus corpus = load_corpus(a.corpus);
      const size_t n = std::min<size_t>(corpus.tokens.size(),
                                        size_t(std::min(a.seq_len, ckpt.config.max_seq_len)));
      tokens.assign(corpus.tokens.begin(), corpus.tokens.begin() + long(n));
    } else {
      const uint64_t seed = apply_env_seed(a.seed);
      manifest.seeds["tokens"] = seed;
      Rng rng(seed);
      const int n = std::min(a.seq_len, ckpt.config.max_seq_len);
      for (int i = 0; i < n; ++i) {
        tokens.push_back(int(rng.next_below(uint64_t(ckpt.config.vocab_size))));
      }
    }
    DeviceTopology topo;
    topo.devices = a.devices;
    topo.latency_per_allreduce = a.latency_us * 1e-6;
    topo.bytes_per_second = a.bandwidth_gb * 1e9;
    topo.bytes_per_element = int(sizeof(S));
    auto [logits, stats] = execute_plan_tp<S>(ckpt, tokens, plan, topo);

    json report = sync_stats_json(stats);
    report["devices"] = a.devices;
    report["effective_depth"] = plan.effective_depth();
    report["seq_len"] = tokens.size();
    report["logits_fnv1a64"] =
        fnv1a64(logits.data(), sizeof(S) * size_t(logits.size()));
    const std::string text = report.dump(2) + "\n";
    if (a.report.empty()) {
      std::cout << text;
    } else {
      write_text_file(a.report, text);
      manifest.outputs = {a.report};
      manifest.wall_time_s = timer.seconds();
      manifest.write_all();
    }
    std::cerr << "executed " << plan.stages.size() << " stages on " << a.devices << " devices, "
              << stats.allreduce_count << " all-reduces\n";
    return 0;
  });
}

struct CkaArgs {
  std::string checkpoint;
  std::string corpus;
  std::string out;
  int prompts = 8;
  CkaOptions opt;
};

int cmd_cka(const CkaArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  manifest.add_input(a.corpus);
  CkaOptions opt = a.opt;
  opt.seed = apply_env_seed(opt.seed);
  manifest.seeds["prompts"] = opt.seed;
  Corpus corpus = load_corpus(a.corpus);
  return with_checkpoint(a.checkpoint, [&](const auto& ckpt) {
    auto analysis_ckpt = to_analysis_precision(ckpt);
    CkaProfile profile = counterfactual_profile<double>(analysis_ckpt, corpus.tokens, a.prompts,
                                                        opt);
    std::ostringstream os;
    os << "layer,s_attn,s_ffn\n";
    for (size_t l = 1; l < profile.s_attn.size(); ++l) {
      os << l << "," << format_double(profile.s_attn[l]) << ","
         << format_double(profile.s_ffn[l]) << "\n";
    }
    write_text_file(a.out, os.str());
    manifest.outputs = {a.out};
    manifest.wall_time_s = timer.seconds();
    manifest.write_all();
    std::cerr << "cka profile over " << a.prompts << " prompts -> " << a.out << "\n";
    return 0;
  });
}

// Residual stream entering layer `pair_k`, produced by running seeded tokens
// through the preceding layers.
template <class S>
Matrix<S> pair_input(const Checkpoint<S>& ckpt, int pair_k, int seq_len, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> tokens;
  const int n = std::min(seq_len, ckpt.config.max_seq_len);
  for (int i = 0; i < n; ++i) {
    tokens.push_back(int(rng.next_below(uint64_t(ckpt.config.vocab_size))));
  }
  Matrix<S> h = embed_tokens(ckpt, tokens);
  for (int l = 0; l < pair_k; ++l) {
    h = sequential_stage<S>(h, ckpt.layers[size_t(l)], ckpt.config);
  }
  return h;
}

struct ErrorBoundArgs {
  std::string checkpoint;
  std::string out;
  int pair = 0;
  int seq_len = 16;
  int probes = 4;
  uint64_t seed = 11;
};

json jacobian_json(const JacobianEstimate& e) {
  return json{{"op_norm", e.op_norm}, {"converged", e.converged}, {"iterations", e.iterations}};
}

int cmd_error_bound(const ErrorBoundArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  const uint64_t seed = apply_env_seed(a.seed);
  manifest.seeds["input"] = seed;
  return with_checkpoint(a.checkpoint, [&](const auto& raw) {
    auto ckpt = to_analysis_precision(raw);
    if (a.pair < 0 || a.pair + 1 >= ckpt.config.n_layers) {
      throw std::invalid_argument("pair index " + std::to_string(a.pair) +
                                  " needs layers k and k+1 in range");
    }
    Matrix<double> x = pair_input<double>(ckpt, a.pair, a.seq_len, seed);
    PowerIterOptions popt;
    popt.seed = mix_seed(seed, 17);
    BoundReport report = first_order_bound<double>(x, ckpt.layers[size_t(a.pair)],
                                                   ckpt.layers[size_t(a.pair) + 1], ckpt.config,
                                                   a.probes, popt);
    json j{{"pair", a.pair},
           {"seq_len", a.seq_len},
           {"probes", a.probes},
           {"measured_error", report.error.measured_error},
           {"delta1_norm", report.error.delta1_norm},
           {"attn_k1_norm", report.error.attn_k1_norm},
           {"ffn_k_norm", report.error.ffn_k_norm},
           {"attention_shift", report.attention_shift},
           {"ffn_k_shift", report.ffn_k_shift},
           {"ffn_k1_shift", report.ffn_k1_shift},
           {"total_bound", report.total_bound},
           {"j_attn_k1", jacobian_json(report.j_attn_k1)},
           {"j_ffn_k", jacobian_json(report.j_ffn_k)},
           {"j_ffn_k1", jacobian_json(report.j_ffn_k1)}};
    write_text_file(a.out, j.dump(2) + "\n");
    manifest.outputs = {a.out};
    manifest.wall_time_s = timer.seconds();
    manifest.write_all();
    std::cerr << "error bound for pair (" << a.pair << "," << a.pair + 1 << ") -> " << a.out
              << "\n";
    return 0;
  });
}

struct EpsStudyArgs {
  std::string checkpoint;  // optional; a seeded toy pair otherwise
  std::string out;
  int pair = 0;
  int seq_len = 16;
  uint64_t seed = 13;
  std::vector<double> epsilons = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3};
};

int cmd_eps_study(const EpsStudyArgs& a, RunManifest manifest) {
  Timer timer;
  const uint64_t seed = apply_env_seed(a.seed);
  manifest.seeds["input"] = seed;

  Checkpoint<double> ckpt;
  if (!a.checkpoint.empty()) {
    manifest.add_input(a.checkpoint);
    with_checkpoint(a.checkpoint, [&](const auto& raw) {
      ckpt = to_analysis_precision(raw);
      return 0;
    });
  } else {
    ModelConfig cfg;  // toy defaults
    cfg.seed = seed;
    ckpt = generate_toy_checkpoint<double>(cfg);
  }
  if (a.pair < 0 || a.pair + 1 >= ckpt.config.n_layers) {
    throw std::invalid_argument("pair index " + std::to_string(a.pair) +
                                " needs layers k and k+1 in range");
  }
  Matrix<double> x = pair_input<double>(ckpt, a.pair, a.seq_len, seed);
  auto points = epsilon_scaling_study<double>(x, ckpt.layers[size_t(a.pair)],
                                              ckpt.layers[size_t(a.pair) + 1], ckpt.config,
                                              a.epsilons);
  std::ostringstream os;
  os << "epsilon,error\n";
  for (const auto& p : points) {
    os << format_double(p.epsilon) << "," << format_double(p.error) << "\n";
  }
  write_text_file(a.out, os.str());
  manifest.outputs = {a.out};
  manifest.wall_time_s = timer.seconds();
  manifest.write_all();
  const double slope = loglog_slope(points);
  std::cout << json{{"slope", slope}}.dump() << "\n";
  std::cerr << "eps study for pair (" << a.pair << "," << a.pair + 1 << "), slope "
            << format_double(slope) << "\n";
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint;
  std::string plan;
  std::string corpus;
  std::string out;
  std::string losses;
  TrainOptions opt;
};

int cmd_finetune(const FinetuneArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.checkpoint);
  manifest.add_input(a.plan);
  manifest.add_input(a.corpus);
  TrainOptions opt = a.opt;
  opt.seed = apply_env_seed(opt.seed);
  manifest.seeds["sampling"] = opt.seed;
  ExecutionPlan plan = load_plan(a.plan);
  Corpus corpus = load_corpus(a.corpus);
  return with_checkpoint(a.checkpoint, [&](const auto& ckpt) {
    using S = std::decay_t<decltype(ckpt.embedding(0, 0))>;
    auto result = finetune_lp<S>(ckpt, plan, corpus.tokens, opt);
    save_checkpoint(result.checkpoint, a.out);
    manifest.outputs = {a.out};
    if (!a.losses.empty()) {
      write_text_file(a.losses, losses_csv(result.losses));
      manifest.outputs.push_back(a.losses);
    }
    manifest.wall_time_s = timer.seconds();
    manifest.write_all();
    std::cerr << "fine-tuned " << opt.steps << " steps on LP layers -> " << a.out << "\n";
    return 0;
  });
}

struct SyncReportArgs {
  std::string plan;
  std::string out;
  int devices = 2;
  int seq_len = 32;
  int d_model = 64;
  double latency_us = 0;
  double bandwidth_gb = 0;
  double sync_ms = -1;
  double compute_ms = -1;
};

int cmd_sync_report(const SyncReportArgs& a, RunManifest manifest) {
  Timer timer;
  manifest.add_input(a.plan);
  ExecutionPlan plan = load_plan(a.plan);
  if (plan.stages.empty()) throw std::invalid_argument("plan has no stages");
  ExecutionPlan baseline;
  for (int id : plan.covered_layers()) baseline.stages.push_back(Stage::sequential(id));

  const long long count = allreduces_in_plan(plan);
  const long long baseline_count = allreduces_in_plan(baseline);
  const double elements = double(count) * double(a.seq_len) * double(a.d_model);
  double sync_time = double(count) * a.latency_us * 1e-6;
  if (a.bandwidth_gb > 0) sync_time += elements * 4.0 / (a.bandwidth_gb * 1e9);

  json j{{"devices", a.devices},
         {"effective_depth", plan.effective_depth()},
         {"allreduce_count", count},
         {"baseline_allreduce_count", baseline_count},
         {"elements_reduced", (long long)(elements)},
         {"simulated_sync_time_s", sync_time}};
  if (a.sync_ms >= 0 && a.compute_ms > 0) {
    j["estimated_speedup"] =
        estimate_speedup(a.sync_ms * 1e-3, a.compute_ms * 1e-3, baseline, plan);
  }
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text_file(a.out, text);
    manifest.outputs = {a.out};
    manifest.wall_time_s = timer.seconds();
    manifest.write_all();
  }
  std::cerr << "plan has " << count << " all-reduces vs " << baseline_count << " sequential\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"layer-parallel transformer engine and computational-graph rewrite toolkit"};
  app.require_subcommand(1);
  int threads = 1;
  bool deterministic = true;
  app.add_option("--threads", threads, "worker threads for sweeps")->capture_default_str();
  app.add_flag("--deterministic,!--no-deterministic", deterministic,
               "single-order deterministic evaluation (always honored; flag kept for scripts)");

  std::function<int()> action;
  RunManifest manifest;
  manifest.argv = args;

  // gen-model
  auto gm = std::make_shared<GenModelArgs>();
  {
    CLI::App* cmd = app.add_subcommand("gen-model", "generate a seeded toy checkpoint");
    gm->config.attach(cmd);
    cmd->add_option("--out", gm->out, "checkpoint output path")->required();
    cmd->add_option("--precision", gm->precision, "f32|f64")->capture_default_str();
    cmd->callback([&action, gm, &manifest]() {
      action = [gm, &manifest]() { return cmd_gen_model(*gm, manifest); };
    });
  }

  // gen-corpus
  auto gc = std::make_shared<GenCorpusArgs>();
  {
    CLI::App* cmd = app.add_subcommand("gen-corpus", "generate a synthetic Markov corpus");
    cmd->add_option("--out", gc->out, "corpus output path")->required();
    cmd->add_option("--seed", gc->seed, "corpus seed")->capture_default_str();
    cmd->add_option("--order", gc->order, "Markov order")->capture_default_str();
    cmd->add_option("--length", gc->length, "token count")->capture_default_str();
    cmd->add_option("--vocab", gc->vocab, "vocabulary size (<= 256)")->capture_default_str();
    cmd->callback([&action, gc, &manifest]() {
      action = [gc, &manifest]() { return cmd_gen_corpus(*gc, manifest); };
    });
  }

  // pretrain
  auto pt = std::make_shared<PretrainArgs>();
  pt->opt.base_lr = 1e-3;
  pt->opt.steps = 2000;
  {
    CLI::App* cmd = app.add_subcommand("pretrain", "train a toy checkpoint from scratch");
    pt->config.attach(cmd);
    cmd->add_option("--corpus", pt->corpus, "training corpus")->required();
    cmd->add_option("--steps", pt->opt.steps, "optimizer steps")->capture_default_str();
    cmd->add_option("--batch", pt->opt.batch, "windows per step")->capture_default_str();
    cmd->add_option("--window", pt->opt.window, "tokens per window")->capture_default_str();
    cmd->add_option("--lr", pt->opt.base_lr, "base learning rate")->capture_default_str();
    cmd->add_option("--train-seed", pt->opt.seed, "batch sampling seed")->capture_default_str();
    cmd->add_option("--out", pt->out, "checkpoint output path")->required();
    cmd->add_option("--losses", pt->losses, "loss curve CSV path");
    cmd->add_option("--precision", pt->precision, "f32|f64")->capture_default_str();
    cmd->callback([&action, pt, &manifest]() {
      action = [pt, &manifest]() { return cmd_pretrain(*pt, manifest); };
    });
  }

  // eval-ppl
  auto ep = std::make_shared<EvalPplArgs>();
  {
    CLI::App* cmd = app.add_subcommand("eval-ppl", "perplexity of a checkpoint under a plan");
    cmd->add_option("--checkpoint", ep->checkpoint, "checkpoint path")->required();
    cmd->add_option("--corpus", ep->corpus, "evaluation corpus")->required();
    cmd->add_option("--plan", ep->plan, "plan JSON (default: sequential)");
    cmd->add_option("--stride", ep->stride, "window length (0 = max_seq_len)")
        ->capture_default_str();
    cmd->add_option("--out", ep->out, "report JSON path (default: stdout)");
    cmd->callback([&action, ep, &manifest]() {
      action = [ep, &manifest]() { return cmd_eval_ppl(*ep, manifest); };
    });
  }

  // sweep
  auto sw = std::make_shared<SweepArgs>();
  {
    CLI::App* cmd = app.add_subcommand("sweep", "perplexity heatmap over contiguous ranges");
    cmd->add_option("--transform", sw->transform,
                    "shuffle|prune|merge|parallel|2parallel|3parallel")
        ->required();
    cmd->add_option("--checkpoint", sw->checkpoint, "checkpoint path")->required();
    cmd->add_option("--corpus", sw->corpus, "evaluation corpus")->required();
    cmd->add_option("--out", sw->out, "heatmap CSV path")->required();
    cmd->add_option("--perms", sw->opt.n_perms, "shuffle permutations per cell")
        ->capture_default_str();
    cmd->add_option("--stride", sw->opt.stride, "perplexity window (0 = max_seq_len)")
        ->capture_default_str();
    cmd->add_option("--seed", sw->opt.seed, "shuffle seed")->capture_default_str();
    cmd->add_option("--per-perm-out", sw->per_perm_out, "per-permutation CSV path");
    cmd->callback([&action, sw, &manifest, &threads]() {
      action = [sw, &manifest, &threads]() {
        sw->opt.threads = threads;
        return cmd_sweep(*sw, manifest);
      };
    });
  }

  // lp-run
  auto lr = std::make_shared<LpRunArgs>();
  {
    CLI::App* cmd =
        app.add_subcommand("lp-run", "execute a plan under simulated tensor parallelism");
    cmd->add_option("--checkpoint", lr->checkpoint, "checkpoint path")->required();
    cmd->add_option("--plan", lr->plan, "plan JSON path")->required();
    cmd->add_option("--devices", lr->devices, "simulated device count")->capture_default_str();
    cmd->add_option("--latency-us", lr->latency_us, "microseconds per all-reduce")
        ->capture_default_str();
    cmd->add_option("--bandwidth-gb", lr->bandwidth_gb, "all-reduce bandwidth in GB/s (0 = off)")
        ->capture_default_str();
    cmd->add_option("--report", lr->report, "sync report JSON path (default: stdout)");
    cmd->add_option("--corpus", lr->corpus, "input tokens from this corpus");
    cmd->add_option("--seq-len", lr->seq_len, "input length")->capture_default_str();
    cmd->add_option("--seed", lr->seed, "random-token seed when no corpus is given")
        ->capture_default_str();
    cmd->callback([&action, lr, &manifest]() {
      action = [lr, &manifest]() { return cmd_lp_run(*lr, manifest); };
    });
  }

  // cka
  auto ck = std::make_shared<CkaArgs>();
  {
    CLI::App* cmd = app.add_subcommand("cka", "counterfactual CKA profile per layer");
    cmd->add_option("--checkpoint", ck->checkpoint, "checkpoint path")->required();
    cmd->add_option("--corpus", ck->corpus, "prompt corpus")->required();
    cmd->add_option("--prompts", ck->prompts, "number of prompts")->capture_default_str();
    cmd->add_option("--out", ck->out, "profile CSV path")->required();
    cmd->add_option("--prompt-len", ck->opt.prompt_len, "tokens per prompt")
        ->capture_default_str();
    cmd->add_option("--last-tokens", ck->opt.last_tokens, "token positions entering CKA")
        ->capture_default_str();
    cmd->add_option("--seed", ck->opt.seed, "prompt placement seed")->capture_default_str();
    cmd->callback([&action, ck, &manifest]() {
      action = [ck, &manifest]() { return cmd_cka(*ck, manifest); };
    });
  }

  // error-bound
  auto eb = std::make_shared<ErrorBoundArgs>();
  {
    CLI::App* cmd = app.add_subcommand("error-bound",
                                       "first-order error bound for a consecutive layer pair");
    cmd->add_option("--checkpoint", eb->checkpoint, "checkpoint path")->required();
    cmd->add_option("--pair", eb->pair, "first layer k of the pair (k, k+1)")->required();
    cmd->add_option("--out", eb->out, "report JSON path")->required();
    cmd->add_option("--seq-len", eb->seq_len, "probe sequence length")->capture_default_str();
    cmd->add_option("--probes", eb->probes, "power-iteration restarts")->capture_default_str();
    cmd->add_option("--seed", eb->seed, "probe seed")->capture_default_str();
    cmd->callback([&action, eb, &manifest]() {
      action = [eb, &manifest]() { return cmd_error_bound(*eb, manifest); };
    });
  }

  // eps-study
  auto es = std::make_shared<EpsStudyArgs>();
  {
    CLI::App* cmd =
        app.add_subcommand("eps-study", "quadratic scaling of the LP error in residual size");
    cmd->add_option("--checkpoint", es->checkpoint,
                    "checkpoint path (default: seeded toy model)");
    cmd->add_option("--pair", es->pair, "first layer k of the pair (k, k+1)")->required();
    cmd->add_option("--out", es->out, "points CSV path")->required();
    cmd->add_option("--seq-len", es->seq_len, "probe sequence length")->capture_default_str();
    cmd->add_option("--seed", es->seed, "input seed")->capture_default_str();
    cmd->add_option("--epsilons", es->epsilons, "scale factors to evaluate");
    cmd->callback([&action, es, &manifest]() {
      action = [es, &manifest]() { return cmd_eps_study(*es, manifest); };
    });
  }

  // finetune
  auto ft = std::make_shared<FinetuneArgs>();
  ft->opt.base_lr = 1e-4;
  ft->opt.steps = 500;
  {
    CLI::App* cmd = app.add_subcommand("finetune", "fine-tune only the layers in parallel groups");
    cmd->add_option("--checkpoint", ft->checkpoint, "checkpoint path")->required();
    cmd->add_option("--plan", ft->plan, "plan JSON with parallel groups")->required();
    cmd->add_option("--corpus", ft->corpus, "training corpus")->required();
    cmd->add_option("--steps", ft->opt.steps, "optimizer steps")->capture_default_str();
    cmd->add_option("--batch", ft->opt.batch, "windows per step")->capture_default_str();
    cmd->add_option("--window", ft->opt.window, "tokens per window")->capture_default_str();
    cmd->add_option("--lr", ft->opt.base_lr, "base learning rate")->capture_default_str();
    cmd->add_option("--train-seed", ft->opt.seed, "batch sampling seed")->capture_default_str();
    cmd->add_option("--out", ft->out, "checkpoint output path")->required();
    cmd->add_option("--losses", ft->losses, "loss curve CSV path");
    cmd->callback([&action, ft, &manifest]() {
      action = [ft, &manifest]() { return cmd_finetune(*ft, manifest); };
    });
  }

  // sync-report
  auto sr = std::make_shared<SyncReportArgs>();
  {
    CLI::App* cmd = app.add_subcommand("sync-report", "all-reduce accounting for a plan");
    cmd->add_option("--plan", sr->plan, "plan JSON path")->required();
    cmd->add_option("--devices", sr->devices, "simulated device count")->capture_default_str();
    cmd->add_option("--seq-len", sr->seq_len, "sequence length for volume estimates")
        ->capture_default_str();
    cmd->add_option("--d-model", sr->d_model, "model width for volume estimates")
        ->capture_default_str();
    cmd->add_option("--latency-us", sr->latency_us, "microseconds per all-reduce")
        ->capture_default_str();
    cmd->add_option("--bandwidth-gb", sr->bandwidth_gb, "bandwidth in GB/s (0 = off)")
        ->capture_default_str();
    cmd->add_option("--sync-ms", sr->sync_ms, "measured sync time for speedup estimate");
    cmd->add_option("--compute-ms", sr->compute_ms, "measured compute time for speedup estimate");
    cmd->add_option("--out", sr->out, "report JSON path (default: stdout)");
    cmd->callback([&action, sr, &manifest]() {
      action = [sr, &manifest]() { return cmd_sync_report(*sr, manifest); };
    });
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (!action) {
    std::cerr << "no subcommand selected\n";
    return 2;
  }
  manifest.subcommand = app.get_subcommands().front()->get_name();
  try {
    return action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace lp::cli
