#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mv2mae/tokenizer.hpp"

namespace mv2mae {

enum class MaskStrategy : std::uint8_t { random, tube };

/// Identifies one mask draw. `stream` separates views of the same sample.
struct MaskKey {
  std::uint64_t seed = 0;
  std::uint64_t sample_id = 0;
  std::uint64_t epoch = 0;
  std::uint64_t stream = 0;
};

/// Partition of token indices 0..N-1 into masked and visible sets.
struct MaskPlan {
  std::size_t num_tokens = 0;
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> visible;  // sorted
  double rho = 0;
  MaskStrategy strategy = MaskStrategy::random;
  MaskKey key;
};

/// Masks floor(rho * N) tokens: the prefix of a seeded uniform permutation.
MaskPlan random_mask(std::size_t num_tokens, double rho, const MaskKey& key);

/// Masks floor(rho * H'W') spatial cells across every time slice.
MaskPlan tube_mask(std::array<std::size_t, 3> grid, double rho, const MaskKey& key);

MaskPlan make_mask(MaskStrategy strategy, const PatchConfig& cfg, double rho, const MaskKey& key);

template <class T>
struct SplitTokens {
  TokenBatch<T> visible;
  std::vector<std::vector<std::size_t>> masked;
};

/// Keeps the visible tokens of each item in ascending index order.
template <class T>
SplitTokens<T> split_tokens(const TokenBatch<T>& all, const std::vector<MaskPlan>& plans);

/// Token order obtained by placing visible rows and mask placeholders back at
/// their original indices; equals 0..N-1 for a valid plan.
std::vector<std::size_t> reassembled_order(const std::vector<std::size_t>& visible_index, const MaskPlan& plan);

}  // namespace mv2mae
