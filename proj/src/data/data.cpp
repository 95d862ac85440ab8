#include "diet/data/data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>

#include "diet/bytes.hpp"
#include "diet/error.hpp"
#include "diet/numerics/rng.hpp"

namespace diet {

LogFormat parse_log_format(std::string_view name) {
  if (name == "tab") return LogFormat::Tab;
  if (name == "double-colon" || name == "::") return LogFormat::DoubleColon;
  if (name == "csv") return LogFormat::Csv;
  throw ConfigError("unknown log format '" + std::string(name) + "' (expected tab, double-colon or csv)");
}

std::string_view log_format_name(LogFormat f) {
  switch (f) {
    case LogFormat::Tab: return "tab";
    case LogFormat::DoubleColon: return "double-colon";
    case LogFormat::Csv: return "csv";
  }
  return "?";
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

[[noreturn]] void bad_line(std::size_t line_no, const std::string& why) {
  throw DataError("line " + std::to_string(line_no) + ": " + why);
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no, const char* what) {
  T value{};
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty())
    bad_line(line_no, std::string("field '") + what + "' is not a valid number: '" + std::string(field) + "'");
  return value;
}

}  // namespace

InteractionLog parse_interactions_text(std::string_view text, LogFormat format) {
  const std::string_view sep = format == LogFormat::Tab ? "\t" : format == LogFormat::DoubleColon ? "::" : ",";
  InteractionLog log;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto f = split_fields(line, sep);
    if (f.size() != 4)
      bad_line(line_no, "expected 4 fields separated by '" + std::string(sep == "\t" ? "\\t" : sep) + "', got " +
                            std::to_string(f.size()));
    log.records.push_back(Interaction{parse_number<std::int64_t>(f[0], line_no, "user"),
                                      parse_number<std::int64_t>(f[1], line_no, "item"),
                                      parse_number<double>(f[2], line_no, "rating"),
                                      parse_number<std::int64_t>(f[3], line_no, "timestamp")});
  }
  return log;
}

InteractionLog parse_interactions(const std::filesystem::path& path, LogFormat format) {
  const auto bytes = read_file(path);
  return parse_interactions_text({reinterpret_cast<const char*>(bytes.data()), bytes.size()}, format);
}

InteractionLog keep_positive(const InteractionLog& log, double threshold) {
  InteractionLog out;
  out.n_users = log.n_users;
  out.n_items = log.n_items;
  out.reindexed = log.reindexed;
  std::copy_if(log.records.begin(), log.records.end(), std::back_inserter(out.records),
               [&](const Interaction& r) { return r.rating >= threshold; });
  return out;
}

InteractionLog kcore_filter(const InteractionLog& log, std::size_t k) {
  if (k == 0) throw ConfigError("k-core needs k >= 1");
  std::vector<Interaction> cur = log.records;
  while (true) {
    std::map<std::int64_t, std::size_t> du, di;
    for (const auto& r : cur) {
      ++du[r.user];
      ++di[r.item];
    }
    std::vector<Interaction> next;
    next.reserve(cur.size());
    for (const auto& r : cur)
      if (du[r.user] >= k && di[r.item] >= k) next.push_back(r);
    if (next.size() == cur.size()) break;
    cur = std::move(next);
  }
  if (cur.empty()) spdlog::warn("k-core filter with k={} removed every interaction", k);

  std::map<std::int64_t, std::int64_t> users, items;
  for (const auto& r : cur) {
    users.emplace(r.user, 0);
    items.emplace(r.item, 0);
  }
  std::int64_t next_id = 0;
  for (auto& [orig, dense] : users) dense = next_id++;
  next_id = 0;
  for (auto& [orig, dense] : items) dense = next_id++;

  InteractionLog out;
  out.records = std::move(cur);
  for (auto& r : out.records) {
    r.user = users[r.user];
    r.item = items[r.item];
  }
  out.n_users = users.size();
  out.n_items = items.size();
  out.reindexed = true;
  return out;
}

SplitKind parse_split_kind(std::string_view name) {
  if (name == "leave-one-out" || name == "loo") return SplitKind::LeaveOneOut;
  if (name == "user-80-20" || name == "user") return SplitKind::User8020;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected leave-one-out or user-80-20)");
}

std::string_view split_kind_name(SplitKind k) { return k == SplitKind::LeaveOneOut ? "leave-one-out" : "user-80-20"; }

std::vector<Sequence> user_sequences(const InteractionLog& log) {
  if (!log.reindexed) throw DataError("user_sequences needs re-indexed ids (run kcore_filter first)");
  std::vector<std::vector<std::size_t>> rows(log.n_users);
  for (std::size_t i = 0; i < log.records.size(); ++i) rows[static_cast<std::size_t>(log.records[i].user)].push_back(i);
  std::vector<Sequence> out(log.n_users);
  for (std::size_t u = 0; u < log.n_users; ++u) {
    auto& idx = rows[u];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return log.records[a].timestamp < log.records[b].timestamp; });
    for (std::size_t i : idx) out[u].push_back(static_cast<ItemId>(log.records[i].item));
  }
  return out;
}

Split split_log(const InteractionLog& log, const SplitSpec& spec) {
  const auto seqs = user_sequences(log);
  Split split;
  split.n_users = log.n_users;
  split.n_items = log.n_items;

  std::vector<char> in_train(log.n_users, 1);
  if (spec.kind == SplitKind::User8020) {
    std::vector<UserId> order(log.n_users);
    std::iota(order.begin(), order.end(), 0);
    num::Rng rng(spec.seed);
    rng.shuffle(std::span(order));
    const std::size_t n_train = log.n_users * 8 / 10;
    for (std::size_t i = n_train; i < order.size(); ++i) in_train[static_cast<std::size_t>(order[i])] = 0;
  }

  std::size_t dropped = 0;
  for (std::size_t u = 0; u < log.n_users; ++u) {
    const auto& s = seqs[u];
    const auto uid = static_cast<UserId>(u);
    if (spec.kind == SplitKind::User8020 && in_train[u]) {
      split.train_users.push_back(uid);
      split.train.push_back(s);
      continue;
    }
    if (s.size() < 2) {
      ++dropped;
      continue;
    }
    Sequence context(s.begin(), s.end() - 1);
    if (spec.kind == SplitKind::LeaveOneOut) {
      split.train_users.push_back(uid);
      split.train.push_back(context);
    }
    split.test.push_back(TestCase{uid, std::move(context), s.back()});
  }
  if (dropped > 0) spdlog::warn("split dropped {} users with fewer than two interactions", dropped);
  return split;
}

std::vector<Sample> build_sequences(const Split& split, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("max_len must be positive");
  std::vector<Sample> out;
  for (std::size_t u = 0; u < split.train.size(); ++u) {
    const auto& s = split.train[u];
    for (std::size_t j = 1; j < s.size(); ++j) {
      const std::size_t start = j > max_len ? j - max_len : 0;
      out.push_back(Sample{split.train_users[u],
                           Sequence(s.begin() + static_cast<std::ptrdiff_t>(start), s.begin() + static_cast<std::ptrdiff_t>(j)),
                           s[j]});
    }
  }
  return out;
}

InteractionLog synthetic_markov(std::size_t n_users, std::size_t n_items, std::size_t length, double noise,
                                std::uint64_t seed) {
  if (n_items < 2 || n_users == 0 || length == 0) throw ConfigError("synthetic data needs users, length and >= 2 items");
  num::Rng rng(seed);
  // Sattolo's algorithm yields a uniformly random single cycle.
  std::vector<std::int64_t> succ(n_items);
  std::iota(succ.begin(), succ.end(), 0);
  for (std::size_t i = n_items - 1; i > 0; --i) std::swap(succ[i], succ[rng.below(i)]);

  InteractionLog log;
  std::int64_t clock = 0;
  for (std::size_t u = 0; u < n_users; ++u) {
    auto item = static_cast<std::int64_t>(rng.below(n_items));
    for (std::size_t t = 0; t < length; ++t) {
      log.records.push_back(Interaction{static_cast<std::int64_t>(u), item, 5.0, clock++});
      item = rng.uniform() < noise ? static_cast<std::int64_t>(rng.below(n_items)) : succ[static_cast<std::size_t>(item)];
    }
  }
  log.n_users = n_users;
  log.n_items = n_items;
  return log;
}

// ---------------------------------------------------------------- cache

namespace {
constexpr char kSplitMagic[4] = {'D', 'S', 'P', 'L'};
constexpr std::uint16_t kSplitVersion = 1;

void write_seq(ByteWriter& w, const Sequence& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (ItemId x : s) w.u32(static_cast<std::uint32_t>(x));
}

Sequence read_seq(ByteReader& r, std::size_t n_items) {
  const std::uint32_t n = r.u32();
  if (static_cast<std::size_t>(n) * 4 > r.remaining()) throw DataError("split cache: truncated sequence");
  Sequence s(n);
  for (auto& x : s) {
    x = static_cast<ItemId>(r.u32());
    if (x < 0 || static_cast<std::size_t>(x) >= n_items) throw DataError("split cache: item id out of range");
  }
  return s;
}
}  // namespace

std::uint64_t split_cache_key(std::span<const std::uint8_t> raw, LogFormat format, const SplitSpec& spec) {
  ByteWriter w;
  w.u64(fnv1a64(raw));
  w.u8(static_cast<std::uint8_t>(format));
  w.u8(static_cast<std::uint8_t>(spec.kind));
  w.u64(spec.k_core);
  w.f64(spec.positive_threshold);
  w.u64(spec.seed);
  w.u16(kSplitVersion);
  return fnv1a64(w.buffer());
}

std::vector<std::uint8_t> encode_split(const Split& split, std::uint64_t key) {
  ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kSplitMagic), 4});
  w.u16(kSplitVersion);
  w.u64(key);
  w.u32(static_cast<std::uint32_t>(split.n_users));
  w.u32(static_cast<std::uint32_t>(split.n_items));
  w.u64(split.stats.raw_records);
  w.u64(split.stats.positive_records);
  w.u64(split.stats.core_records);
  w.u32(static_cast<std::uint32_t>(split.train.size()));
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(split.train_users[i]));
    write_seq(w, split.train[i]);
  }
  w.u32(static_cast<std::uint32_t>(split.test.size()));
  for (const auto& t : split.test) {
    w.u32(static_cast<std::uint32_t>(t.user));
    w.u32(static_cast<std::uint32_t>(t.target));
    write_seq(w, t.context);
  }
  return w.take();
}

std::pair<Split, std::uint64_t> decode_split(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (std::memcmp(r.bytes(4).data(), kSplitMagic, 4) != 0) throw DataError("split cache: bad magic");
  if (r.u16() != kSplitVersion) throw DataError("split cache: unsupported version");
  const std::uint64_t key = r.u64();
  Split s;
  s.n_users = r.u32();
  s.n_items = r.u32();
  s.stats.raw_records = r.u64();
  s.stats.positive_records = r.u64();
  s.stats.core_records = r.u64();
  auto user = [&]() {
    const auto u = static_cast<UserId>(r.u32());
    if (u < 0 || static_cast<std::size_t>(u) >= s.n_users) throw DataError("split cache: user id out of range");
    return u;
  };
  const std::uint32_t n_train = r.u32();
  for (std::uint32_t i = 0; i < n_train; ++i) {
    s.train_users.push_back(user());
    s.train.push_back(read_seq(r, s.n_items));
  }
  const std::uint32_t n_test = r.u32();
  for (std::uint32_t i = 0; i < n_test; ++i) {
    TestCase t;
    t.user = user();
    t.target = static_cast<ItemId>(r.u32());
    if (t.target < 0 || static_cast<std::size_t>(t.target) >= s.n_items) throw DataError("split cache: bad target");
    t.context = read_seq(r, s.n_items);
    s.test.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw DataError("split cache: trailing bytes");
  return {std::move(s), key};
}

Split load_split(const std::filesystem::path& path, LogFormat format, const SplitSpec& spec,
                 const std::filesystem::path& cache_dir) {
  const auto raw = read_file(path);
  const std::uint64_t key = split_cache_key(raw, format, spec);
  std::filesystem::path cache_file;
  if (!cache_dir.empty()) {
    char name[32];
    std::snprintf(name, sizeof name, "split-%016llx.bin", static_cast<unsigned long long>(key));
    cache_file = cache_dir / name;
    if (std::filesystem::exists(cache_file)) {
      try {
        auto [split, stored] = decode_split(read_file(cache_file));
        if (stored == key) return split;
        spdlog::warn("split cache {} has a stale key, rebuilding", cache_file.string());
      } catch (const DataError& e) {
        spdlog::warn("ignoring unreadable split cache {}: {}", cache_file.string(), e.what());
      }
    }
  }

  const auto log = parse_interactions_text({reinterpret_cast<const char*>(raw.data()), raw.size()}, format);
  const auto positive = keep_positive(log, spec.positive_threshold);
  const auto core = kcore_filter(positive, spec.k_core);
  Split split = split_log(core, spec);
  split.stats = {log.records.size(), positive.records.size(), core.records.size()};
  if (!cache_file.empty()) write_file(cache_file, encode_split(split, key));
  return split;
}

}  // namespace diet
