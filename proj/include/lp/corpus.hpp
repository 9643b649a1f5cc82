#pragma once

// Synthetic corpora and the byte-level corpus file format.
//
// The generator emits an order-k Markov chain: each context token contributes
// its class (token mod 4), the classes of the previous k tokens combine
// positionally into one of 64 states, and each state owns a sparse
// 4-candidate categorical over the vocabulary. The class structure is
// recoverable from token embeddings and the combination needs position-aware
// mixing, so small models can actually learn it, which is what the perplexity
// sweeps need to produce meaningful deltas.

#include "lp/rng.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

struct Corpus {
  std::vector<int> tokens;
  std::string provenance;
};

namespace detail {
inline uint64_t hash_state(uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}
}  // namespace detail

inline Corpus generate_corpus(uint64_t seed, int order, size_t length, int vocab) {
  if (order < 1) throw std::invalid_argument("corpus: order must be >= 1");
  if (length == 0) throw std::invalid_argument("corpus: length must be positive");
  if (vocab < 2) throw std::invalid_argument("corpus: vocab must be >= 2");
  constexpr int kStates = 64;
  // Candidate probabilities are fixed; candidates themselves are a seeded
  // function of the state.
  constexpr double kProbs[4] = {0.55, 0.25, 0.15, 0.05};

  Rng rng(seed);
  Corpus corpus;
  corpus.provenance =
      "synthetic(seed=" + std::to_string(seed) + ",order=" + std::to_string(order) + ")";
  corpus.tokens.reserve(length);
  std::vector<int> context(static_cast<size_t>(order), 0);
  for (int i = 0; i < order; ++i) context[size_t(i)] = int(rng.next_below(uint64_t(vocab)));

  for (size_t t = 0; t < length; ++t) {
    // position-weighted combination of the context tokens' classes
    uint64_t state = 0;
    for (int i = 0; i < order; ++i) {
      state = state * 4 + uint64_t(context[size_t(i)] & 3);
    }
    state %= kStates;
    const double u = rng.next_double();
    double cum = 0.0;
    int pick = 3;
    for (int c = 0; c < 4; ++c) {
      cum += kProbs[c];
      if (u < cum) {
        pick = c;
        break;
      }
    }
    const int next =
        int(detail::hash_state(state * 4 + uint64_t(pick) + seed * 31) % uint64_t(vocab));
    corpus.tokens.push_back(next);
    for (int i = 0; i + 1 < order; ++i) context[size_t(i)] = context[size_t(i) + 1];
    context[size_t(order - 1)] = next;
  }
  return corpus;
}

// Corpus files are raw bytes (byte-level tokens), so vocab must fit in one
// byte for round-tripping.
inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
  for (int t : corpus.tokens) {
    if (t < 0 || t > 255) {
      throw std::invalid_argument("corpus token " + std::to_string(t) +
                                  " does not fit the byte-level file format");
    }
    const char b = char(static_cast<unsigned char>(t));
    out.write(&b, 1);
  }
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.provenance = "file(" + path + ")";
  char b;
  while (in.read(&b, 1)) corpus.tokens.push_back(int(static_cast<unsigned char>(b)));
  if (corpus.tokens.empty()) throw std::runtime_error("corpus file is empty: " + path);
  return corpus;
}

}  // namespace lp
