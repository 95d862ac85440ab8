#include "diet/backbone/checkpoint.hpp"

#include "diet/bytes.hpp"
#include "diet/error.hpp"

namespace diet {
namespace {

constexpr char kMagic[4] = {'D', 'I', 'E', 'T'};

void write_tensor_map(ByteWriter& w, const NamedTensors& tensors) {
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.f64s(t.data());
  }
}

NamedTensors read_tensor_map(ByteReader& r) {
  NamedTensors out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw DataError("checkpoint: tensor '" + name + "' has rank 0");
    num::Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u32();
      if (e == 0) throw DataError("checkpoint: tensor '" + name + "' has a zero extent");
      n *= e;
    }
    if (n * sizeof(double) > r.remaining()) throw DataError("checkpoint: tensor '" + name + "' is truncated");
    num::Tensor t(shape);
    r.f64s(t.data());
    if (!out.emplace(std::move(name), std::move(t)).second) throw DataError("checkpoint: duplicate tensor name");
  }
  return out;
}

void write_backbone(ByteWriter& w, const BackboneParams& bb) {
  const auto& h = bb.hyper;
  w.u8(static_cast<std::uint8_t>(bb.arch));
  for (std::size_t v : {h.d, h.blocks, h.heads, h.max_len, h.horiz_filters, h.vert_filters, h.max_horiz_height})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(bb.n_items));
  w.u8(bb.shared_buffer ? 1 : 0);
  if (bb.shared_buffer) {
    const auto& buf = *bb.layers.front().storage;
    w.u64(buf.size());
    w.f64s(buf);
  }
  w.u16(static_cast<std::uint16_t>(bb.layers.size()));
  for (const auto& l : bb.layers) {
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.rows));
    w.u32(static_cast<std::uint32_t>(l.cols));
    if (!bb.shared_buffer) w.f64s(l.weights());
  }
  write_tensor_map(w, bb.dense);
}

BackboneParams read_backbone(ByteReader& r) {
  BackboneParams bb;
  const std::uint8_t arch = r.u8();
  if (arch != static_cast<std::uint8_t>(Arch::SASRec) && arch != static_cast<std::uint8_t>(Arch::Caser))
    throw DataError("checkpoint: unknown architecture tag " + std::to_string(arch));
  bb.arch = static_cast<Arch>(arch);
  auto& h = bb.hyper;
  for (std::size_t* v : {&h.d, &h.blocks, &h.heads, &h.max_len, &h.horiz_filters, &h.vert_filters, &h.max_horiz_height})
    *v = r.u32();
  bb.n_items = r.u32();
  bb.shared_buffer = r.u8() != 0;
  std::shared_ptr<std::vector<double>> shared;
  if (bb.shared_buffer) {
    const std::uint64_t n = r.u64();
    if (n * sizeof(double) > r.remaining()) throw DataError("checkpoint: shared buffer is truncated");
    shared = std::make_shared<std::vector<double>>(n);
    r.f64s(*shared);
  }
  const std::uint16_t count = r.u16();
  for (std::uint16_t i = 0; i < count; ++i) {
    LayerWeights l;
    l.name = r.str();
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::ConvVertical)) throw DataError("checkpoint: unknown layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.rows = r.u32();
    l.cols = r.u32();
    if (bb.shared_buffer) {
      if (l.size() > shared->size()) throw DataError("checkpoint: layer '" + l.name + "' exceeds the shared buffer");
      l.storage = shared;
    } else {
      if (l.size() * sizeof(double) > r.remaining()) throw DataError("checkpoint: layer '" + l.name + "' is truncated");
      l.storage = std::make_shared<std::vector<double>>(l.size());
      r.f64s(*l.storage);
    }
    bb.layers.push_back(std::move(l));
  }
  bb.dense = read_tensor_map(r);
  if (!bb.dense.count("item_embedding")) throw DataError("checkpoint: backbone has no item embedding");
  return bb;
}

void section(ByteWriter& out, char tag, const std::vector<std::uint8_t>& payload) {
  out.u8(static_cast<std::uint8_t>(tag));
  out.u64(payload.size());
  out.bytes(payload);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<char, std::vector<std::uint8_t>>> sections;
  if (ckpt.backbone) {
    ByteWriter w;
    write_backbone(w, *ckpt.backbone);
    sections.emplace_back('B', w.take());
  }
  for (auto [tag, map] : {std::pair{'G', &ckpt.generator}, std::pair{'S', &ckpt.score_maps}, std::pair{'O', &ckpt.other}}) {
    if (map->empty()) continue;
    ByteWriter w;
    write_tensor_map(w, *map);
    sections.emplace_back(tag, w.take());
  }
  if (!ckpt.config_json.empty()) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(ckpt.config_json.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(ckpt.config_json.data()), ckpt.config_json.size()});
    sections.emplace_back('C', w.take());
  }

  ByteWriter out;
  out.bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  out.u16(kCheckpointVersion);
  out.u16(static_cast<std::uint16_t>(sections.size()));
  for (const auto& [tag, payload] : sections) section(out, tag, payload);
  return out.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint16_t count = r.u16();
  Checkpoint ckpt;
  for (std::uint16_t i = 0; i < count; ++i) {
    const char tag = static_cast<char>(r.u8());
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw DataError("checkpoint: section is truncated");
    ByteReader s(r.bytes(len));
    switch (tag) {
      case 'B': ckpt.backbone = read_backbone(s); break;
      case 'G': ckpt.generator = read_tensor_map(s); break;
      case 'S': ckpt.score_maps = read_tensor_map(s); break;
      case 'O': ckpt.other = read_tensor_map(s); break;
      case 'C': {
        const std::uint32_t n = s.u32();
        const auto text = s.bytes(n);
        ckpt.config_json.assign(text.begin(), text.end());
        break;
      }
      default: throw DataError(std::string("checkpoint: unknown section tag '") + tag + "'");
    }
    if (s.remaining() != 0) throw DataError(std::string("checkpoint: trailing bytes in section '") + tag + "'");
  }
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes after last section");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace diet
