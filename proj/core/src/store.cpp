#include "implab/store.hpp"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <zlib.h>

#include "implab/errors.hpp"

namespace implab {

namespace {

constexpr char kCheckpointMagic[4] = {'L', 'T', 'C', 'K'};
constexpr char kMaskMagic[4] = {'L', 'T', 'M', 'K'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

// ---- little-endian writer/reader -------------------------------------------

struct Writer {
  std::string out;
  void u8(std::uint8_t v) { out.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
  void str(const std::string& s) {
    u64(s.size());
    out.append(s);
  }
  void tensor(const Tensor& t) {
    u64(t.shape.size());
    for (std::size_t d : t.shape) u64(d);
    for (double v : t.data) f64(v);
  }
};

struct Reader {
  const std::string& bytes;
  const std::string& path;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw IoError("'" + path + "': truncated at byte " + std::to_string(pos) + " (need " +
                    std::to_string(n) + " more)");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t u = u64();
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    const std::uint64_t nd = u64();
    if (nd == 0) return Tensor{};
    if (nd > 8) throw IoError("'" + path + "': implausible tensor rank " + std::to_string(nd));
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) d = u64();
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.data) v = f64();
    return t;
  }
};

std::string read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

// Shared container framing: magic + version + payload length + payload + CRC.
std::string frame(const char magic[4], const std::string& payload) {
  std::string out(magic, 4);
  Writer w;
  w.u32(kVersion);
  w.u64(payload.size());
  out += w.out;
  out += payload;
  Writer tail;
  tail.u32(crc_of(payload));
  out += tail.out;
  return out;
}

std::string unframe(const char magic[4], const std::string& bytes, const std::string& path,
                    const char* what) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic, 4) != 0)
    throw IoError("'" + path + "': not a " + std::string(what) + " file (bad magic)");
  Reader r{bytes, path, 4};
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw IoError("'" + path + "': unsupported " + std::string(what) + " version " +
                  std::to_string(version) + " (expected " + std::to_string(kVersion) + ")");
  const std::uint64_t len = r.u64();
  r.need(len + 4);
  std::string payload = bytes.substr(r.pos, len);
  Reader tail{bytes, path, r.pos + len};
  const std::uint32_t stored = tail.u32();
  if (stored != crc_of(payload))
    throw IoError("'" + path + "': checksum mismatch, file is corrupt");
  return payload;
}

void write_mask_payload(Writer& w, const Mask& m) {
  w.u64(m.size());
  w.u64(m.layout_id());
  w.u64(m.popcount());
  for (std::uint64_t word : m.words()) w.u64(word);
}

Mask read_mask_payload(Reader& r) {
  const std::uint64_t n_bits = r.u64();
  const std::uint64_t layout = r.u64();
  const std::uint64_t stored_pop = r.u64();
  Mask m = Mask::zeros(n_bits, layout);
  const std::size_t n_words = (n_bits + 63) / 64;
  std::vector<std::uint64_t> words(n_words);
  for (auto& word : words) word = r.u64();
  m.set_words(std::move(words));
  if (m.popcount() != stored_pop)
    throw IoError("'" + r.path + "': mask popcount header says " + std::to_string(stored_pop) +
                  " but bits hold " + std::to_string(m.popcount()));
  return m;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  Writer w;
  // model config
  w.u64(ckpt.config.width);
  w.u64(ckpt.config.depth);
  w.u64(ckpt.config.in_channels);
  w.u8(ckpt.config.use_batchnorm ? 1 : 0);
  w.u8(ckpt.config.head_kind == HeadKind::Classifier ? 0 : 1);
  w.u64(ckpt.config.head_arg);
  // parameters
  w.u64(ckpt.params.entries.size());
  for (const auto& e : ckpt.params.entries) {
    w.str(e.name);
    w.u8(static_cast<std::uint8_t>((e.prunable ? 1 : 0) | (e.trainable ? 2 : 0) |
                                   (e.decay ? 4 : 0) | (e.is_head ? 8 : 0)));
    w.u64(e.mask_offset);
    w.tensor(e.value);
  }
  w.u64(ckpt.params.revision);
  // mask
  write_mask_payload(w, ckpt.mask);
  // optimizer state
  w.u64(ckpt.opt.velocity.size());
  for (const auto& v : ckpt.opt.velocity) {
    w.u8(v.shape.empty() ? 0 : 1);
    if (!v.shape.empty()) w.tensor(v);
  }
  w.u64(ckpt.opt.step_count);
  // rng + lineage
  w.u64(ckpt.rng_seed);
  w.u64(ckpt.rng_counter);
  w.u64(ckpt.round);
  w.u64(ckpt.epoch);
  w.str(ckpt.task_id);
  w.str(ckpt.parent_id);

  write_file_atomic(path, frame(kCheckpointMagic, w.out));

  nlohmann::ordered_json side;
  const auto now = std::chrono::system_clock::now();
  side["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                             now.time_since_epoch())
                             .count();
  side["task"] = ckpt.task_id;
  side["parent"] = ckpt.parent_id;
  side["round"] = ckpt.round;
  side["epoch"] = ckpt.epoch;
  side["sparsity"] = ckpt.mask.sparsity();
  side["d1"] = ckpt.mask.size();
  write_file_atomic(path + ".json", side.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_all(path);
  const std::string payload = unframe(kCheckpointMagic, bytes, path, "checkpoint");
  Reader r{payload, path};
  Checkpoint c;
  c.config.width = r.u64();
  c.config.depth = r.u64();
  c.config.in_channels = r.u64();
  c.config.use_batchnorm = r.u8() != 0;
  c.config.head_kind = r.u8() == 0 ? HeadKind::Classifier : HeadKind::Projector;
  c.config.head_arg = r.u64();
  const std::uint64_t n_entries = r.u64();
  c.params.entries.resize(n_entries);
  for (auto& e : c.params.entries) {
    e.name = r.str();
    const std::uint8_t flags = r.u8();
    e.prunable = flags & 1;
    e.trainable = flags & 2;
    e.decay = flags & 4;
    e.is_head = flags & 8;
    e.mask_offset = r.u64();
    e.value = r.tensor();
  }
  c.params.revision = r.u64();
  c.mask = read_mask_payload(r);
  const std::uint64_t n_vel = r.u64();
  c.opt.velocity.resize(n_vel);
  for (auto& v : c.opt.velocity)
    if (r.u8() != 0) v = r.tensor();
  c.opt.step_count = r.u64();
  c.rng_seed = r.u64();
  c.rng_counter = r.u64();
  c.round = r.u64();
  c.epoch = r.u64();
  c.task_id = r.str();
  c.parent_id = r.str();
  if (r.pos != payload.size())
    throw IoError("'" + path + "': " + std::to_string(payload.size() - r.pos) +
                  " trailing bytes after the checkpoint payload");
  if (c.mask.size() != c.params.d1() || c.mask.layout_id() != c.params.layout_hash())
    throw IoError("'" + path + "': mask layout does not match the stored parameters");
  return c;
}

void save_mask(const Mask& mask, const std::string& path) {
  Writer w;
  write_mask_payload(w, mask);
  write_file_atomic(path, frame(kMaskMagic, w.out));
}

Mask load_mask(const std::string& path) {
  const std::string bytes = read_all(path);
  const std::string payload = unframe(kMaskMagic, bytes, path, "mask");
  Reader r{payload, path};
  Mask m = read_mask_payload(r);
  if (r.pos != payload.size())
    throw IoError("'" + path + "': " + std::to_string(payload.size() - r.pos) +
                  " trailing bytes after the mask payload");
  return m;
}

}  // namespace implab
