#pragma once

// ExecutionPlan: the object every graph transform rewrites. Layer ids are
// 0-based everywhere in code and in plan JSON.

#include <json.hpp>

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

struct Stage {
  enum class Kind { Sequential, ParallelGroup };
  Kind kind = Kind::Sequential;
  std::vector<int> layers;  // one layer for Sequential, >= 1 for ParallelGroup

  static Stage sequential(int layer) { return {Kind::Sequential, {layer}}; }
  static Stage parallel(std::vector<int> ids) { return {Kind::ParallelGroup, std::move(ids)}; }

  bool is_parallel() const { return kind == Kind::ParallelGroup; }
  bool operator==(const Stage&) const = default;
};

struct PlanError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ExecutionPlan {
  std::vector<Stage> stages;

  static ExecutionPlan sequential(int n_layers) {
    ExecutionPlan p;
    p.stages.reserve(size_t(n_layers));
    for (int i = 0; i < n_layers; ++i) p.stages.push_back(Stage::sequential(i));
    return p;
  }

  // Number of sequential steps from input to output.
  int effective_depth() const { return int(stages.size()); }

  std::vector<int> covered_layers() const {
    std::vector<int> ids;
    for (const auto& st : stages) ids.insert(ids.end(), st.layers.begin(), st.layers.end());
    return ids;
  }

  bool has_parallel_group() const {
    return std::any_of(stages.begin(), stages.end(),
                       [](const Stage& s) { return s.is_parallel(); });
  }

  std::set<int> parallel_layer_ids() const {
    std::set<int> ids;
    for (const auto& st : stages) {
      if (st.is_parallel()) ids.insert(st.layers.begin(), st.layers.end());
    }
    return ids;
  }

  // Valid when every referenced id is in [0, n_layers) and appears at most
  // once. `require_all` additionally demands full coverage (forward needs it;
  // pruned plans simply omit ids).
  void validate(int n_layers, bool require_all) const {
    std::vector<int> count(size_t(n_layers), 0);
    std::vector<int> bad, dup;
    for (const auto& st : stages) {
      if (st.layers.empty()) throw PlanError("plan: empty stage");
      if (!st.is_parallel() && st.layers.size() != 1) {
        throw PlanError("plan: sequential stage with multiple layers");
      }
      for (int id : st.layers) {
        if (id < 0 || id >= n_layers) {
          bad.push_back(id);
        } else if (++count[size_t(id)] == 2) {
          dup.push_back(id);
        }
      }
    }
    std::vector<int> missing;
    if (require_all) {
      for (int i = 0; i < n_layers; ++i) {
        if (count[size_t(i)] == 0) missing.push_back(i);
      }
    }
    if (bad.empty() && dup.empty() && missing.empty()) return;
    std::ostringstream os;
    os << "invalid plan:";
    auto list = [&os](const char* label, const std::vector<int>& v) {
      if (v.empty()) return;
      os << " " << label << " [";
      for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
      os << "]";
    };
    list("out-of-range layers", bad);
    list("duplicated layers", dup);
    list("missing layers", missing);
    throw PlanError(os.str());
  }
};

inline nlohmann::json to_json(const ExecutionPlan& plan) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : plan.stages) {
    if (st.is_parallel()) {
      stages.push_back({{"par", st.layers}});
    } else {
      stages.push_back({{"seq", st.layers[0]}});
    }
  }
  return nlohmann::json{{"stages", stages}};
}

inline ExecutionPlan plan_from_json(const nlohmann::json& j) {
  ExecutionPlan plan;
  for (const auto& st : j.at("stages")) {
    if (st.contains("seq")) {
      plan.stages.push_back(Stage::sequential(st.at("seq").get<int>()));
    } else if (st.contains("par")) {
      auto ids = st.at("par").get<std::vector<int>>();
      if (ids.empty()) throw PlanError("plan: empty parallel group");
      plan.stages.push_back(Stage::parallel(std::move(ids)));
    } else {
      throw PlanError("plan: stage must have \"seq\" or \"par\"");
    }
  }
  return plan;
}

}  // namespace lp
