#pragma once

// Checkpoint file format (little-endian throughout):
//
//   bytes 0..7   magic "LPCKPT01"
//   u64          length of the UTF-8 JSON header
//   ...          JSON header: model config plus {"dtype": "f32"|"f64"}
//   tensors      each as u64 byte length followed by raw row-major data
//
// Tensor order: embedding; per layer w_q, w_k, w_v, w_o, w_gate, w_up, w_down,
// norm_attn_scale, norm_ffn_scale; final_norm_scale; output_head.

#include "lp/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace lp {

inline constexpr char kCheckpointMagic[8] = {'L', 'P', 'C', 'K', 'P', 'T', '0', '1'};

struct CheckpointFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class S>
const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<S, double>, "unsupported scalar");
    return "f64";
  }
}

namespace detail {

inline void write_u64(std::ostream& out, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

inline uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw CheckpointFormatError("checkpoint truncated while reading length");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(buf[i]) << (8 * i);
  return v;
}

template <class S>
void write_tensor(std::ostream& out, const S* data, uint64_t count) {
  write_u64(out, count * sizeof(S));
  out.write(reinterpret_cast<const char*>(data), std::streamsize(count * sizeof(S)));
}

template <class S>
void read_tensor(std::istream& in, S* data, uint64_t count) {
  const uint64_t bytes = read_u64(in);
  if (bytes != count * sizeof(S)) {
    throw CheckpointFormatError("tensor payload of " + std::to_string(bytes) +
                                " bytes, expected " + std::to_string(count * sizeof(S)));
  }
  in.read(reinterpret_cast<char*>(data), std::streamsize(bytes));
  if (!in) throw CheckpointFormatError("checkpoint truncated while reading tensor");
}

}  // namespace detail

template <class S>
void save_checkpoint(const Checkpoint<S>& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  nlohmann::json header = to_json(ckpt.config);
  header["dtype"] = dtype_name<S>();
  const std::string header_str = header.dump();
  detail::write_u64(out, header_str.size());
  out.write(header_str.data(), std::streamsize(header_str.size()));

  auto w = [&out](const auto& m) {
    detail::write_tensor<S>(out, m.data(), uint64_t(m.size()));
  };
  w(ckpt.embedding);
  for (const auto& l : ckpt.layers) {
    w(l.w_q);
    w(l.w_k);
    w(l.w_v);
    w(l.w_o);
    w(l.w_gate);
    w(l.w_up);
    w(l.w_down);
    w(l.norm_attn_scale);
    w(l.norm_ffn_scale);
  }
  w(ckpt.final_norm_scale);
  w(ckpt.output_head);
  if (!out) throw std::runtime_error("write failure on checkpoint: " + path);
}

inline nlohmann::json read_checkpoint_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointFormatError("not a checkpoint file (bad magic): " + path);
  }
  const uint64_t len = detail::read_u64(in);
  std::string header_str(len, '\0');
  in.read(header_str.data(), std::streamsize(len));
  if (!in) throw CheckpointFormatError("checkpoint truncated while reading header: " + path);
  return nlohmann::json::parse(header_str);
}

// Dtype stored in a checkpoint file without loading payloads.
inline std::string checkpoint_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint file: " + path);
  return read_checkpoint_header(in, path).at("dtype").get<std::string>();
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint file: " + path);
  nlohmann::json header = read_checkpoint_header(in, path);
  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != dtype_name<S>()) {
    throw CheckpointFormatError("checkpoint holds " + dtype + " data, requested " +
                                dtype_name<S>());
  }
  Checkpoint<S> ckpt;
  ckpt.config = model_config_from_json(header);
  const Index d = ckpt.config.d_model, ff = ckpt.config.d_ff, v = ckpt.config.vocab_size;

  auto r = [&in](auto& m) { detail::read_tensor<S>(in, m.data(), uint64_t(m.size())); };
  ckpt.embedding.resize(v, d);
  r(ckpt.embedding);
  ckpt.layers.resize(size_t(ckpt.config.n_layers));
  for (auto& l : ckpt.layers) {
    l.w_q.resize(d, d);
    l.w_k.resize(d, d);
    l.w_v.resize(d, d);
    l.w_o.resize(d, d);
    l.w_gate.resize(d, ff);
    l.w_up.resize(d, ff);
    l.w_down.resize(ff, d);
    l.norm_attn_scale.resize(d);
    l.norm_ffn_scale.resize(d);
    r(l.w_q);
    r(l.w_k);
    r(l.w_v);
    r(l.w_o);
    r(l.w_gate);
    r(l.w_up);
    r(l.w_down);
    r(l.norm_attn_scale);
    r(l.norm_ffn_scale);
  }
  ckpt.final_norm_scale.resize(d);
  r(ckpt.final_norm_scale);
  ckpt.output_head.resize(d, v);
  r(ckpt.output_head);
  return ckpt;
}

}  // namespace lp
