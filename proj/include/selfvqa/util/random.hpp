// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

namespace selfvqa::rng {

// std::mt19937_64 output is fixed by the standard; the distributions are not.
// The helpers below keep every draw reproducible across standard libraries.
using Engine = std::mt19937_64;

inline std::uint64_t uniform_below(Engine& eng, std::uint64_t bound) {
  if (bound <= 1) return 0;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return x % bound;
}

template <typename T>
void shuffle(std::vector<T>& items, Engine& eng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform_below(eng, i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

// Indices of min(k, n) distinct items drawn uniformly without replacement,
// in draw order (partial Fisher-Yates).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Engine& eng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const std::size_t take = k < n ? k : n;
  for (std::size_t i = 0; i < take; ++i) {
    auto j = i + static_cast<std::size_t>(uniform_below(eng, n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

}  // namespace selfvqa::rng
