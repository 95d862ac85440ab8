#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "diet/data/data.hpp"
#include "diet/types.hpp"

namespace diet {

/// Top-N item ids in descending score order. Equal scores rank the lower id
/// first; `excluded` items never appear.
std::vector<ItemId> top_n(std::span<const double> scores, std::size_t n, std::span<const ItemId> excluded = {});

/// Single-target NDCG: 1 / log2(rank + 1) when the target is within the
/// first n entries, else 0. Throws ConfigError when n == 0.
double ndcg_at_n(std::span<const ItemId> ranked, ItemId target, std::size_t n);
double hit_at_n(std::span<const ItemId> ranked, ItemId target, std::size_t n);

struct EvalResult {
  double ndcg = 0.0;
  double hit = 0.0;
  std::size_t users = 0;
  bool exclude_history = true;
};

/// Scores every catalog item for a context.
using Scorer = std::function<std::vector<double>(std::span<const ItemId> context)>;

/// Mean per-user NDCG@n and Hit@n over the test cases, summed in test order.
/// With `exclude_history` the items of the user's context are removed from
/// the candidates (the target itself is always a candidate).
EvalResult evaluate(const Scorer& scorer, std::span<const TestCase> test, std::size_t n = 10,
                    bool exclude_history = true);

}  // namespace diet
