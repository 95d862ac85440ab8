#include "diet/evalcli/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diet/error.hpp"

namespace diet {

std::vector<ItemId> top_n(std::span<const double> scores, std::size_t n, std::span<const ItemId> excluded) {
  std::vector<char> drop(scores.size(), 0);
  for (ItemId i : excluded)
    if (i >= 0 && static_cast<std::size_t>(i) < scores.size()) drop[static_cast<std::size_t>(i)] = 1;
  std::vector<ItemId> cand;
  cand.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw NumericError("NaN score for item " + std::to_string(i));
    if (!drop[i]) cand.push_back(static_cast<ItemId>(i));
  }
  const std::size_t k = std::min(n, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), [&](ItemId a, ItemId b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    return sa != sb ? sa > sb : a < b;
  });
  cand.resize(k);
  return cand;
}

double ndcg_at_n(std::span<const ItemId> ranked, ItemId target, std::size_t n) {
  if (n == 0) throw ConfigError("N must be at least 1");
  const std::size_t limit = std::min(n, ranked.size());
  for (std::size_t r = 0; r < limit; ++r)
    if (ranked[r] == target) return 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return 0.0;
}

double hit_at_n(std::span<const ItemId> ranked, ItemId target, std::size_t n) {
  if (n == 0) throw ConfigError("N must be at least 1");
  const std::size_t limit = std::min(n, ranked.size());
  return std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(limit), target) !=
                 ranked.begin() + static_cast<std::ptrdiff_t>(limit)
             ? 1.0
             : 0.0;
}

EvalResult evaluate(const Scorer& scorer, std::span<const TestCase> test, std::size_t n, bool exclude_history) {
  if (test.empty()) throw DataError("empty test split");
  if (n == 0) throw ConfigError("N must be at least 1");
  EvalResult out;
  out.exclude_history = exclude_history;
  for (const auto& tc : test) {
    if (tc.context.empty()) throw DataError("test user " + std::to_string(tc.user) + " has no context");
    const auto scores = scorer(tc.context);
    std::vector<ItemId> excluded;
    if (exclude_history)
      for (ItemId i : tc.context)
        if (i != tc.target) excluded.push_back(i);
    const auto ranked = top_n(scores, n, excluded);
    out.ndcg += ndcg_at_n(ranked, tc.target, n);
    out.hit += hit_at_n(ranked, tc.target, n);
  }
  out.users = test.size();
  out.ndcg /= static_cast<double>(out.users);
  out.hit /= static_cast<double>(out.users);
  if (!std::isfinite(out.ndcg) || !std::isfinite(out.hit)) throw NumericError("non-finite metric");
  return out;
}

}  // namespace diet
