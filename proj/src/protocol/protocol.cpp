#include "diet/protocol/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "diet/bytes.hpp"
#include "diet/evalcli/metrics.hpp"
#include "json.hpp"

namespace diet {

std::string_view wire_fault_name(WireFault f) {
  switch (f) {
    case WireFault::BadMagic: return "bad-magic";
    case WireFault::Truncated: return "truncated";
    case WireFault::LayerCount: return "layer-count";
    case WireFault::NameHash: return "name-hash";
    case WireFault::ElementCount: return "element-count";
    case WireFault::KeepCount: return "keep-count";
    case WireFault::Padding: return "padding";
    case WireFault::TrailingBytes: return "trailing-bytes";
  }
  return "?";
}

std::size_t wire_header_bytes(std::size_t layers) { return kWireFixedHeaderBytes + kWireLayerHeaderBytes * layers; }

std::vector<std::uint8_t> encode_diet(const Diet& diet) {
  if (diet.layers.size() > 0xffff) throw ShapeError("too many layers for the wire format");
  ByteWriter w;
  for (char c : kWireMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(static_cast<std::uint16_t>(diet.layers.size()));
  for (const auto& m : diet.layers) {
    if (m.bits.size() > 0xffffffffULL) throw ShapeError("layer '" + m.name + "' too large for the wire format");
    if (m.popcount() != m.keep_count)
      throw ShapeError("layer '" + m.name + "': keep count " + std::to_string(m.keep_count) + " but " +
                       std::to_string(m.popcount()) + " bits set");
    w.u64(fnv1a64(m.name));
    w.u32(static_cast<std::uint32_t>(m.bits.size()));
    w.u32(static_cast<std::uint32_t>(m.keep_count));
  }
  auto& out = w.buffer();
  for (const auto& m : diet.layers) {
    const std::size_t start = out.size();
    out.resize(start + (m.bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) out[start + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return w.take();
}

Diet decode_diet(std::span<const std::uint8_t> bytes, const BackboneParams& registry, double keep_ratio) {
  auto fail = [](WireFault f, const std::string& what) -> WireError {
    return WireError(f, "diet wire: " + std::string(wire_fault_name(f)) + ": " + what);
  };
  if (bytes.size() < kWireFixedHeaderBytes) throw fail(WireFault::Truncated, "shorter than the fixed header");
  if (!std::equal(kWireMagic.begin(), kWireMagic.end(), bytes.begin()))
    throw fail(WireFault::BadMagic, "magic mismatch");
  ByteReader r(bytes.subspan(kWireMagic.size()));
  const std::size_t count = r.u16();
  if (count != registry.layers.size())
    throw fail(WireFault::LayerCount,
               std::to_string(count) + " layers, backbone has " + std::to_string(registry.layers.size()));
  if (r.remaining() < count * kWireLayerHeaderBytes) throw fail(WireFault::Truncated, "layer headers cut short");

  Diet diet;
  diet.keep_ratio = keep_ratio;
  std::size_t payload = 0;
  for (const auto& l : registry.layers) {
    const std::uint64_t hash = r.u64();
    const std::size_t elements = r.u32();
    const std::size_t keep = r.u32();
    if (hash != fnv1a64(l.name)) throw fail(WireFault::NameHash, "layer '" + l.name + "' hash mismatch");
    if (elements != l.size())
      throw fail(WireFault::ElementCount, "layer '" + l.name + "' has " + std::to_string(l.size()) + " elements, header says " +
                                              std::to_string(elements));
    if (keep > elements) throw fail(WireFault::KeepCount, "layer '" + l.name + "' keeps more than it has");
    diet.layers.push_back(LayerMask{l.name, l.rows, l.cols, keep, std::vector<std::uint8_t>(elements, 0)});
    payload += (elements + 7) / 8;
  }
  if (r.remaining() < payload) throw fail(WireFault::Truncated, "payload cut short");
  if (r.remaining() > payload) throw fail(WireFault::TrailingBytes, std::to_string(r.remaining() - payload) + " extra bytes");

  for (auto& m : diet.layers) {
    const auto packed = r.bytes((m.bits.size() + 7) / 8);
    std::size_t set = 0;
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
      set += m.bits[i];
    }
    const std::size_t used = m.bits.size() % 8;
    if (used != 0 && (packed.back() >> used) != 0) throw fail(WireFault::Padding, "layer '" + m.name + "' has set pad bits");
    if (set != m.keep_count)
      throw fail(WireFault::KeepCount, "layer '" + m.name + "' declares " + std::to_string(m.keep_count) + " kept, payload has " +
                                           std::to_string(set));
  }
  return diet;
}

// ---------------------------------------------------------- transmission

TransmitMethod parse_transmit_method(std::string_view name) {
  if (name == "dense") return TransmitMethod::Dense;
  if (name == "csr") return TransmitMethod::Csr;
  if (name == "binary") return TransmitMethod::Binary;
  throw ConfigError("unknown transmission method '" + std::string(name) + "'");
}

std::uint64_t transmission_bits(TransmitMethod method, std::uint64_t n_params, double nonzero_fraction) {
  if (!(nonzero_fraction >= 0.0 && nonzero_fraction <= 1.0))
    throw ConfigError("nonzero fraction must lie in [0, 1]");
  switch (method) {
    case TransmitMethod::Dense: return 32 * n_params;
    case TransmitMethod::Csr:
      return static_cast<std::uint64_t>(std::llround(64.0 * nonzero_fraction * static_cast<double>(n_params)));
    case TransmitMethod::Binary: return n_params;
  }
  throw ConfigError("unknown transmission method");
}

std::uint64_t diet_wire_bits(const Diet& diet) {
  std::uint64_t bytes = wire_header_bytes(diet.layers.size());
  for (const auto& m : diet.layers) bytes += (m.bits.size() + 7) / 8;
  return 8 * bytes;
}

// ----------------------------------------------------------------- FLOPs

namespace {

// How many times each layer's weights are applied in one forward pass.
std::vector<std::uint64_t> applications(const BackboneParams& bb, std::size_t seq_len) {
  const auto& hp = bb.hyper;
  std::vector<std::uint64_t> out;
  if (bb.arch == Arch::SASRec) {
    const std::uint64_t positions = std::min(seq_len, hp.max_len);
    out.assign(bb.layers.size(), positions);
    return out;
  }
  // Caser always convolves the full max_len x d image (pads are zero rows).
  const std::size_t L = hp.max_len;
  for (const auto& l : bb.layers) {
    if (l.kind == LayerKind::ConvHorizontal) {
      const std::size_t h = l.cols / hp.d;
      out.push_back(h <= L ? L - h + 1 : 0);
    } else if (l.kind == LayerKind::ConvVertical) {
      out.push_back(hp.d);
    } else {
      out.push_back(1);
    }
  }
  return out;
}

}  // namespace

std::uint64_t count_flops(const MaskedBackbone& mb, std::size_t seq_len) {
  const auto& bb = mb.backbone();
  const auto apps = applications(bb, seq_len);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto& l = bb.layers[i];
    const auto w = mb.effective(i);
    std::uint64_t live_rows = 0;
    for (std::size_t r = 0; r < l.rows; ++r)
      live_rows += std::any_of(w.begin() + static_cast<std::ptrdiff_t>(r * l.cols),
                               w.begin() + static_cast<std::ptrdiff_t>((r + 1) * l.cols), [](double v) { return v != 0.0; });
    total += live_rows * l.cols * apps[i];
  }
  return total;
}

std::uint64_t dense_flops(const BackboneParams& bb, std::size_t seq_len) {
  const auto apps = applications(bb, seq_len);
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) total += bb.layers[i].rows * bb.layers[i].cols * apps[i];
  return total;
}

std::vector<double> zero_row_fractions(const MaskedBackbone& mb) {
  const auto& bb = mb.backbone();
  std::vector<double> out;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto& l = bb.layers[i];
    const auto w = mb.effective(i);
    std::size_t zero = 0;
    for (std::size_t r = 0; r < l.rows; ++r)
      zero += std::all_of(w.begin() + static_cast<std::ptrdiff_t>(r * l.cols),
                          w.begin() + static_cast<std::ptrdiff_t>((r + 1) * l.cols), [](double v) { return v == 0.0; });
    out.push_back(static_cast<double>(zero) / static_cast<double>(l.rows));
  }
  return out;
}

// --------------------------------------------------------------- storage

StorageMode parse_storage_mode(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "diet") return StorageMode::Diet;
  if (s == "dieting") return StorageMode::Dieting;
  throw ConfigError("unknown storage mode '" + std::string(name) + "'");
}

std::uint64_t storage_bits(StorageMode mode, const BackboneParams& bb, std::size_t n_scenarios) {
  if (n_scenarios == 0) throw ConfigError("at least one scenario is required");
  const std::uint64_t n = bb.maskable_count();
  const std::uint64_t weights = mode == StorageMode::Diet ? n : bb.largest_layer();
  return 32 * weights + n_scenarios * n;
}

// ------------------------------------------------------------- sessions

RefreshPolicy parse_refresh_policy(std::string_view name) {
  if (name == "per-session") return RefreshPolicy::PerSession;
  if (name == "on-shift") return RefreshPolicy::OnShift;
  throw ConfigError("unknown refresh policy '" + std::string(name) + "'");
}

std::string_view refresh_policy_name(RefreshPolicy p) { return p == RefreshPolicy::PerSession ? "per-session" : "on-shift"; }

SimReport simulate_session(const CloudSide& cloud, std::span<const SessionEvent> events, std::span<const TestCase> test,
                           const SimConfig& config) {
  if (!cloud.backbone) throw ConfigError("simulation needs a backbone");
  if (!cloud.dense_shipping && !cloud.diet_for) throw ConfigError("simulation needs a diet generator");
  if (config.scenarios == 0) throw ConfigError("at least one scenario is required");
  const BackboneParams& bb = *cloud.backbone;

  std::map<UserId, std::vector<const SessionEvent*>> by_user;
  for (const auto& e : events) {
    if (e.item < 0 || static_cast<std::size_t>(e.item) >= bb.n_items)
      throw DataError("event item " + std::to_string(e.item) + " is not in the embedding table");
    auto& list = by_user[e.user];
    if (!list.empty() && list.back()->timestamp > e.timestamp)
      throw DataError("events of user " + std::to_string(e.user) + " are not time-ordered");
    list.push_back(&e);
  }

  const std::uint64_t stored = storage_bits(cloud.storage, bb, config.scenarios);
  SimReport report;
  for (const auto& tc : test) {
    auto it = by_user.find(tc.user);
    if (it == by_user.end() || it->second.empty()) throw DataError("no events for test user " + std::to_string(tc.user));
    EdgeReport edge;
    edge.user = tc.user;
    edge.cost.storage_bits = stored;

    Sequence history;
    std::optional<MaskedBackbone> cached;
    const SessionEvent* prev = nullptr;
    for (const SessionEvent* e : it->second) {
      history.push_back(e->item);
      const bool refresh = !cached || (config.policy == RefreshPolicy::PerSession
                                           ? e->timestamp - prev->timestamp > config.session_gap
                                           : e->interest_shift);
      prev = e;
      if (!refresh) continue;
      ++edge.refreshes;
      if (cloud.dense_shipping) {
        edge.cost.transmit_bits += transmission_bits(TransmitMethod::Dense, bb.maskable_count(), 1.0);
        cached.emplace(bb, full_diet(bb));
      } else {
        const Diet d = cloud.diet_for(history);
        const auto wire = encode_diet(d);
        edge.cost.transmit_bits += 8 * wire.size();
        cached.emplace(bb, decode_diet(wire, bb, cloud.keep_ratio));
      }
    }

    edge.cost.flops = count_flops(*cached, history.size());
    const auto scores = forward_scores(*cached, history);
    std::vector<ItemId> excluded;
    if (config.exclude_history)
      for (ItemId i : history)
        if (i != tc.target) excluded.push_back(i);
    const auto ranked = top_n(scores, config.top_n, excluded);
    edge.cost.ndcg_at_10 = ndcg_at_n(ranked, tc.target, config.top_n);
    edge.cost.hit_at_10 = hit_at_n(ranked, tc.target, config.top_n);

    report.aggregate.transmit_bits += edge.cost.transmit_bits;
    report.aggregate.storage_bits += edge.cost.storage_bits;
    report.refreshes += edge.refreshes;
    report.edges.push_back(std::move(edge));
  }
  if (report.edges.empty()) throw DataError("simulation has no test users");
  double flops = 0.0;
  for (const auto& e : report.edges) {
    flops += static_cast<double>(e.cost.flops);
    report.aggregate.ndcg_at_10 += e.cost.ndcg_at_10;
    report.aggregate.hit_at_10 += e.cost.hit_at_10;
  }
  const double n = static_cast<double>(report.edges.size());
  report.aggregate.flops = static_cast<std::uint64_t>(std::llround(flops / n));
  report.aggregate.ndcg_at_10 /= n;
  report.aggregate.hit_at_10 /= n;
  return report;
}

std::vector<SessionEvent> events_from_test(std::span<const TestCase> test, std::size_t session_length,
                                           std::size_t shift_every, std::int64_t session_gap) {
  if (session_length == 0) throw ConfigError("session length must be positive");
  std::vector<SessionEvent> out;
  for (const auto& tc : test) {
    std::int64_t t = 0;
    for (std::size_t i = 0; i < tc.context.size(); ++i) {
      if (i > 0) t += (i % session_length == 0) ? session_gap + 1 : 1;
      out.push_back(SessionEvent{tc.user, tc.context[i], t, shift_every != 0 && i > 0 && i % shift_every == 0});
    }
  }
  return out;
}

std::string sim_report_csv(const SimReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "user,refreshes,transmit_bits,storage_bits,flops,ndcg_at_10,hit_at_10\n";
  for (const auto& e : r.edges)
    out << e.user << ',' << e.refreshes << ',' << e.cost.transmit_bits << ',' << e.cost.storage_bits << ',' << e.cost.flops
        << ',' << e.cost.ndcg_at_10 << ',' << e.cost.hit_at_10 << '\n';
  return out.str();
}

std::string sim_report_json(const SimReport& r) {
  const auto& a = r.aggregate;
  nlohmann::ordered_json j{{"users", r.edges.size()},
                           {"refreshes", r.refreshes},
                           {"transmit_bits", a.transmit_bits},
                           {"storage_bits", a.storage_bits},
                           {"flops", a.flops},
                           {"ndcg_at_10", a.ndcg_at_10},
                           {"hit_at_10", a.hit_at_10}};
  return j.dump(2) + "\n";
}

}  // namespace diet
