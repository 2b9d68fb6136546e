#include "mv2mae/masking.hpp"

#include <algorithm>
#include <cmath>

#include "mv2mae/errors.hpp"
#include "mv2mae/rng.hpp"

namespace mv2mae {

namespace {

void check_rho(double rho) {
  if (!(rho > 0 && rho < 1)) throw ConfigError("rho", "masking ratio must lie in (0, 1), got " + std::to_string(rho));
}

std::size_t masked_count(double rho, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rho * static_cast<double>(n)));
}

KeyedRng rng_for(const MaskKey& key, std::uint64_t salt) {
  return KeyedRng{key.seed, key.sample_id, key.epoch, key.stream, salt};
}

void fill_sets(MaskPlan& plan, const std::vector<bool>& is_masked) {
  for (std::size_t i = 0; i < is_masked.size(); ++i) (is_masked[i] ? plan.masked : plan.visible).push_back(i);
}

}  // namespace

MaskPlan random_mask(std::size_t num_tokens, double rho, const MaskKey& key) {
  check_rho(rho);
  if (num_tokens < 2) throw ConfigError("num_tokens", "random masking needs at least 2 tokens");
  auto rng = rng_for(key, 0x7a2d0);
  const auto perm = rng.permutation(num_tokens);
  std::vector<bool> is_masked(num_tokens, false);
  for (std::size_t i = 0; i < masked_count(rho, num_tokens); ++i) is_masked[perm[i]] = true;
  MaskPlan plan;
  plan.num_tokens = num_tokens;
  plan.rho = rho;
  plan.strategy = MaskStrategy::random;
  plan.key = key;
  fill_sets(plan, is_masked);
  return plan;
}

MaskPlan tube_mask(std::array<std::size_t, 3> grid, double rho, const MaskKey& key) {
  check_rho(rho);
  const auto [gt, gh, gw] = grid;
  const std::size_t cells = gh * gw;
  if (gt == 0 || cells == 0) throw ConfigError("grid", "tube masking needs a non-empty token grid");
  auto rng = rng_for(key, 0x70be);
  const auto perm = rng.permutation(cells);
  std::vector<bool> cell_masked(cells, false);
  for (std::size_t i = 0; i < masked_count(rho, cells); ++i) cell_masked[perm[i]] = true;
  std::vector<bool> is_masked(gt * cells, false);
  for (std::size_t t = 0; t < gt; ++t)
    for (std::size_t c = 0; c < cells; ++c) is_masked[t * cells + c] = cell_masked[c];
  MaskPlan plan;
  plan.num_tokens = gt * cells;
  plan.rho = rho;
  plan.strategy = MaskStrategy::tube;
  plan.key = key;
  fill_sets(plan, is_masked);
  return plan;
}

MaskPlan make_mask(MaskStrategy strategy, const PatchConfig& cfg, double rho, const MaskKey& key) {
  if (strategy == MaskStrategy::tube) return tube_mask({cfg.grid_t(), cfg.grid_h(), cfg.grid_w()}, rho, key);
  return random_mask(cfg.num_tokens(), rho, key);
}

template <class T>
SplitTokens<T> split_tokens(const TokenBatch<T>& all, const std::vector<MaskPlan>& plans) {
  if (plans.size() != all.batch()) throw DimensionError("split_tokens: one mask plan per batch item required");
  SplitTokens<T> out;
  std::vector<std::vector<std::size_t>> rows;
  for (std::size_t b = 0; b < plans.size(); ++b) {
    const auto& plan = plans[b];
    if (plan.num_tokens != all.count() || all.token_index[b].size() != plan.num_tokens) {
      throw DimensionError("split_tokens: plan covers " + std::to_string(plan.num_tokens) + " tokens, batch has " +
                           std::to_string(all.count()));
    }
    if (plan.masked.empty()) throw DimensionError("split_tokens: plan masks no tokens");
    // Map original token index -> row of `all`.
    std::vector<std::size_t> row_of(plan.num_tokens);
    for (std::size_t j = 0; j < all.token_index[b].size(); ++j) row_of.at(all.token_index[b][j]) = j;
    std::vector<std::size_t> r;
    for (auto v : plan.visible) r.push_back(row_of[v]);
    rows.push_back(std::move(r));
    out.visible.token_index.push_back(plan.visible);
    out.masked.push_back(plan.masked);
  }
  out.visible.tokens = gather_rows(all.tokens, rows);
  out.visible.view_id = all.view_id;
  out.visible.is_encoded = all.is_encoded;
  return out;
}

std::vector<std::size_t> reassembled_order(const std::vector<std::size_t>& visible_index, const MaskPlan& plan) {
  constexpr std::size_t kEmpty = static_cast<std::size_t>(-1);
  std::vector<std::size_t> slots(plan.num_tokens, kEmpty);
  for (auto i : visible_index) slots.at(i) = i;
  for (auto i : plan.masked) {
    if (slots.at(i) != kEmpty) throw DimensionError("reassembled_order: token " + std::to_string(i) + " placed twice");
    slots[i] = i;
  }
  return slots;
}

template SplitTokens<float> split_tokens(const TokenBatch<float>&, const std::vector<MaskPlan>&);
template SplitTokens<double> split_tokens(const TokenBatch<double>&, const std::vector<MaskPlan>&);

}  // namespace mv2mae
