#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace protoalign {

using Rng = std::mt19937_64;

/// Independent stream keyed by a base seed and a tuple of indices, e.g.
/// (seed, epoch, sample). Streams do not depend on the order in which they
/// are requested, which keeps parallel and serial runs identical.
inline Rng rng_stream(uint64_t seed, std::initializer_list<uint64_t> keys) {
  std::vector<uint32_t> words;
  words.reserve(2 * (keys.size() + 1));
  auto push = [&](uint64_t v) {
    words.push_back(static_cast<uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<uint32_t>(v >> 32));
  };
  push(seed);
  for (uint64_t k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace protoalign
