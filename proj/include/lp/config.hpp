#pragma once

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lp {

enum class NormKind { Rms, LayerNorm };
enum class Activation { Silu, Gelu };

inline std::string to_string(NormKind k) { return k == NormKind::Rms ? "rms" : "layernorm"; }
inline std::string to_string(Activation a) { return a == Activation::Silu ? "silu" : "gelu"; }

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "rms") return NormKind::Rms;
  if (s == "layernorm") return NormKind::LayerNorm;
  throw std::invalid_argument("unknown norm kind: " + s);
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::Silu;
  if (s == "gelu") return Activation::Gelu;
  throw std::invalid_argument("unknown activation: " + s);
}

struct ModelConfig {
  int n_layers = 12;
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 16;
  int d_ff = 256;
  int vocab_size = 256;
  int max_seq_len = 256;
  NormKind norm_kind = NormKind::Rms;
  Activation activation = Activation::Silu;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  uint64_t seed = 1;

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(head_dim, "head_dim");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (n_heads * head_dim != d_model) {
      throw std::invalid_argument("config: n_heads * head_dim != d_model");
    }
    if (rope_base <= 0) throw std::invalid_argument("config: rope_base must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},
                        {"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"head_dim", c.head_dim},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"norm_kind", to_string(c.norm_kind)},
                        {"activation", to_string(c.activation)},
                        {"rope_base", c.rope_base},
                        {"norm_eps", c.norm_eps},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.value("head_dim", c.n_heads > 0 ? c.d_model / c.n_heads : 0);
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.norm_kind = norm_kind_from_string(j.value("norm_kind", "rms"));
  c.activation = activation_from_string(j.value("activation", "silu"));
  c.rope_base = j.value("rope_base", 10000.0);
  c.norm_eps = j.value("norm_eps", 1e-5);
  c.seed = j.value("seed", uint64_t(1));
  c.validate();
  return c;
}

}  // namespace lp
