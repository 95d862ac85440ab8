#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diet/backbone/backbone.hpp"
#include "diet/data/data.hpp"
#include "diet/error.hpp"

namespace diet {

// ------------------------------------------------------------------ wire
//
// "DIETv1", u16 layer count, then per layer: u64 FNV-1a hash of the layer
// name, u32 element count, u32 keep count. The payload follows: each layer's
// mask bit-packed LSB-first in row-major order, padded to a byte boundary.
// All integers little-endian.

inline constexpr std::string_view kWireMagic = "DIETv1";
inline constexpr std::size_t kWireFixedHeaderBytes = 8;
inline constexpr std::size_t kWireLayerHeaderBytes = 16;

enum class WireFault { BadMagic, Truncated, LayerCount, NameHash, ElementCount, KeepCount, Padding, TrailingBytes };
std::string_view wire_fault_name(WireFault f);

class WireError : public DataError {
 public:
  WireError(WireFault fault, const std::string& what) : DataError(what), fault_(fault) {}
  WireFault fault() const { return fault_; }

 private:
  WireFault fault_;
};

std::vector<std::uint8_t> encode_diet(const Diet& diet);

/// The edge knows its backbone registry; names and shapes come from there and
/// every header field is checked against it. Throws WireError.
Diet decode_diet(std::span<const std::uint8_t> bytes, const BackboneParams& registry, double keep_ratio);

std::size_t wire_header_bytes(std::size_t layers);

// ---------------------------------------------------------- transmission

enum class TransmitMethod { Dense, Csr, Binary };
TransmitMethod parse_transmit_method(std::string_view name);

/// dense: 32 N, csr: 32 * 2 * alpha * N (rounded to the nearest bit),
/// binary: N. Throws ConfigError for alpha outside [0, 1].
std::uint64_t transmission_bits(TransmitMethod method, std::uint64_t n_params, double nonzero_fraction);

/// Bits on the wire for a concrete diet: header, payload and padding.
std::uint64_t diet_wire_bits(const Diet& diet);

// ----------------------------------------------------------------- FLOPs

/// Multiply-accumulates of weight application for one forward pass over
/// `seq_len` positions. Rows (output units, filters) whose effective weights
/// are all zero are skipped. Embedding lookups and scoring are not counted.
std::uint64_t count_flops(const MaskedBackbone& mb, std::size_t seq_len);

/// The same count for the unmasked network from layer shapes alone.
std::uint64_t dense_flops(const BackboneParams& bb, std::size_t seq_len);

/// Fraction of all-zero rows of each layer's effective weights.
std::vector<double> zero_row_fractions(const MaskedBackbone& mb);

// --------------------------------------------------------------- storage

enum class StorageMode { Diet, Dieting };
StorageMode parse_storage_mode(std::string_view name);

/// diet: 32 * sum of layer sizes + n * N mask bits;
/// dieting: 32 * |W_max| + n * N mask bits. Throws ConfigError when n == 0.
std::uint64_t storage_bits(StorageMode mode, const BackboneParams& bb, std::size_t n_scenarios);

// ------------------------------------------------------------- sessions

struct SessionEvent {
  UserId user = 0;
  ItemId item = 0;
  std::int64_t timestamp = 0;
  bool interest_shift = false;
};

/// per-session: a fresh diet whenever a session starts (a gap longer than
/// session_gap, or the user's first event). on-shift: the first event and
/// every event flagged as an interest shift.
enum class RefreshPolicy { PerSession, OnShift };
RefreshPolicy parse_refresh_policy(std::string_view name);
std::string_view refresh_policy_name(RefreshPolicy p);

struct CostReport {
  std::uint64_t transmit_bits = 0;
  std::uint64_t storage_bits = 0;
  std::uint64_t flops = 0;
  double ndcg_at_10 = 0.0;
  double hit_at_10 = 0.0;
};

struct EdgeReport {
  UserId user = 0;
  std::size_t refreshes = 0;
  CostReport cost;
};

struct SimReport {
  std::vector<EdgeReport> edges;
  /// Bits, storage and refreshes are sums; flops and metrics are means.
  CostReport aggregate;
  std::size_t refreshes = 0;
};

/// What the cloud ships on a refresh.
struct CloudSide {
  const BackboneParams* backbone = nullptr;
  /// Returns the diet for a history; empty when the cloud ships the dense
  /// network instead (the base protocol).
  std::function<Diet(std::span<const ItemId>)> diet_for;
  bool dense_shipping = false;
  StorageMode storage = StorageMode::Diet;
  double keep_ratio = 1.0;
};

struct SimConfig {
  RefreshPolicy policy = RefreshPolicy::PerSession;
  std::int64_t session_gap = 1800;
  std::size_t scenarios = 1;
  std::size_t top_n = 10;
  bool exclude_history = true;
};

/// Replays each test user's events: every refresh generates, encodes and
/// decodes a diet (bits accrue); all reranks until the next refresh reuse
/// the cached masked backbone. At the end of the stream the cached network
/// ranks the catalog for the held-out target. Throws DataError for items
/// outside the embedding table or events that are not time-ordered.
SimReport simulate_session(const CloudSide& cloud, std::span<const SessionEvent> events, std::span<const TestCase> test,
                           const SimConfig& config);

/// Events replaying each test user's context: timestamps advance by one per
/// event and jump past session_gap every `session_length` events; every
/// `shift_every`-th event (0 = never) is flagged as an interest shift.
std::vector<SessionEvent> events_from_test(std::span<const TestCase> test, std::size_t session_length,
                                           std::size_t shift_every, std::int64_t session_gap = 1800);

std::string sim_report_csv(const SimReport& r);
std::string sim_report_json(const SimReport& r);

}  // namespace diet
