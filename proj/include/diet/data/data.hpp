#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diet/types.hpp"

namespace diet {

struct Interaction {
  std::int64_t user = 0;
  std::int64_t item = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Records in file order. After kcore_filter the ids are dense in
/// [0, n_users) and [0, n_items).
struct InteractionLog {
  std::vector<Interaction> records;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  bool reindexed = false;
};

/// tab: "u<TAB>i<TAB>r<TAB>t" (MovieLens-100K)
/// double-colon: "u::i::r::t" (MovieLens-1M)
/// csv: "u,i,r,t" (ratings exported from other sources)
/// Ids and timestamps are integers, ratings may be decimal. Blank lines are
/// skipped.
enum class LogFormat { Tab, DoubleColon, Csv };

LogFormat parse_log_format(std::string_view name);
std::string_view log_format_name(LogFormat f);

InteractionLog parse_interactions_text(std::string_view text, LogFormat format);
InteractionLog parse_interactions(const std::filesystem::path& path, LogFormat format);

InteractionLog keep_positive(const InteractionLog& log, double threshold = 4.0);

/// Iterated k-core on the user-item bipartite graph, then re-indexing of
/// users and items in ascending order of their original ids.
InteractionLog kcore_filter(const InteractionLog& log, std::size_t k);

enum class SplitKind { LeaveOneOut, User8020 };

SplitKind parse_split_kind(std::string_view name);
std::string_view split_kind_name(SplitKind k);

struct SplitSpec {
  SplitKind kind = SplitKind::LeaveOneOut;
  std::size_t k_core = 20;
  double positive_threshold = 4.0;
  std::uint64_t seed = 0;  // only used by the user split

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

struct TestCase {
  UserId user = 0;
  Sequence context;  // full chronological history before the target
  ItemId target = 0;

  friend bool operator==(const TestCase&, const TestCase&) = default;
};

struct DatasetStats {
  std::size_t raw_records = 0;
  std::size_t positive_records = 0;
  std::size_t core_records = 0;

  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

struct Split {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<UserId> train_users;
  std::vector<Sequence> train;  // parallel to train_users, chronological
  std::vector<TestCase> test;
  DatasetStats stats;  // filled by load_split

  friend bool operator==(const Split&, const Split&) = default;
};

/// Per-user chronological item sequences; timestamp ties keep file order.
std::vector<Sequence> user_sequences(const InteractionLog& log);

/// Leave-one-out: each user's last item is the test target, the rest train.
/// Users with fewer than two interactions are dropped with a warning.
/// User split: floor(0.8 n) users, chosen by a seeded shuffle, train on
/// their whole sequence; the others are scored on their last item.
Split split_log(const InteractionLog& log, const SplitSpec& spec);

struct Sample {
  UserId user = 0;
  Sequence context;  // at most max_len items
  ItemId target = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// One sample per prefix position: ([x1..x_{j-1}] truncated to the last
/// max_len items) -> x_j for j >= 2.
std::vector<Sample> build_sequences(const Split& split, std::size_t max_len);

/// Synthetic data for smoke tests, not a real dataset: every user walks a
/// fixed single cycle over the catalog from a random start; with
/// probability `noise` a step jumps to a uniformly random item instead.
/// Timestamps increase along each walk.
InteractionLog synthetic_markov(std::size_t n_users, std::size_t n_items, std::size_t length, double noise,
                                std::uint64_t seed);

// ---------------------------------------------------------------- cache

/// Split cache file:
///   "DSPL" u16 version u64 key
///   u32 n_users u32 n_items, u64 x 3 stats (raw, positive, core records)
///   u32 train count, per user: i32 user, u32 len, i32 x len
///   u32 test count, per case: i32 user, i32 target, u32 len, i32 x len
/// The key hashes the raw input bytes together with the format and SplitSpec, so
/// any change to either misses the cache.
std::uint64_t split_cache_key(std::span<const std::uint8_t> raw, LogFormat format, const SplitSpec& spec);
std::vector<std::uint8_t> encode_split(const Split& split, std::uint64_t key);
/// Returns the split and its stored key; throws DataError when malformed.
std::pair<Split, std::uint64_t> decode_split(std::span<const std::uint8_t> bytes);

/// Full pipeline: parse, keep positives, k-core, split. Uses (and fills)
/// `cache_dir` when it is non-empty.
Split load_split(const std::filesystem::path& path, LogFormat format, const SplitSpec& spec,
                 const std::filesystem::path& cache_dir = {});

}  // namespace diet
