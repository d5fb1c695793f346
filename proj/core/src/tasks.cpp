#include "implab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "implab/errors.hpp"

namespace implab {

namespace {

// Align-corners bilinear resampling of one H x W plane.
void bilinear_resize(const double* src, std::size_t sh, std::size_t sw, double* dst,
                     std::size_t dh, std::size_t dw) {
  for (std::size_t y = 0; y < dh; ++y) {
    const double fy = dh > 1 ? static_cast<double>(y) * (sh - 1) / (dh - 1) : 0.0;
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = dw > 1 ? static_cast<double>(x) * (sw - 1) / (dw - 1) : 0.0;
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
      dst[y * dw + x] = top * (1.0 - wy) + bot * wy;
    }
  }
}

// Class templates: coarse 4x4 random grids per channel, upsampled to the
// target resolution, optionally recolored by a fixed per-channel affine.
std::vector<Tensor> class_templates(const SynthSpec& spec) {
  constexpr std::size_t kGrid = 4;
  Rng trng(spec.template_seed);
  std::vector<Tensor> out;
  out.reserve(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    Tensor t = Tensor::zeros({spec.channels, spec.resolution, spec.resolution});
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      double coarse[kGrid * kGrid];
      for (double& v : coarse) v = trng.normal();
      bilinear_resize(coarse, kGrid, kGrid,
                      t.data.data() + ch * spec.resolution * spec.resolution,
                      spec.resolution, spec.resolution);
    }
    out.push_back(std::move(t));
  }
  if (spec.domain_shift) {
    Rng drng(spec.template_seed ^ fnv1a64("domain-shift"));
    std::vector<double> gain(spec.channels), bias(spec.channels);
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      gain[ch] = drng.uniform(0.6, 1.4);
      bias[ch] = drng.uniform(-0.3, 0.3);
    }
    for (auto& t : out)
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        double* p = t.data.data() + ch * spec.resolution * spec.resolution;
        for (std::size_t k = 0; k < spec.resolution * spec.resolution; ++k)
          p[k] = gain[ch] * p[k] + bias[ch];
      }
  }
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (images.shape.size() != 4)
    throw DimensionError("dataset images must be [N, C, H, W], got " + images.shape_str());
  const std::size_t n = images.shape[0];
  if (!labels.empty()) {
    if (labels.size() != n)
      throw DimensionError("dataset has " + std::to_string(n) + " images but " +
                           std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
        throw ConfigError("label " + std::to_string(labels[i]) + " at index " +
                          std::to_string(i) + " outside [0, " + std::to_string(n_classes) + ")");
  }
  std::vector<char> seen(n, 0);
  for (std::size_t idx : train_idx) {
    if (idx >= n) throw DimensionError("train split index " + std::to_string(idx) + " out of range");
    if (seen[idx]) throw ConfigError("split index " + std::to_string(idx) + " appears twice");
    seen[idx] = 1;
  }
  for (std::size_t idx : test_idx) {
    if (idx >= n) throw DimensionError("test split index " + std::to_string(idx) + " out of range");
    if (seen[idx])
      throw ConfigError("split index " + std::to_string(idx) + " in both train and test");
    seen[idx] = 1;
  }
}

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("synthetic dataset needs n_classes >= 2");
  if (spec.n == 0) throw ConfigError("synthetic dataset needs n >= 1");
  if (spec.resolution < 4) throw ConfigError("synthetic dataset needs resolution >= 4");
  if (spec.train_fraction <= 0.0 || spec.train_fraction > 1.0)
    throw ConfigError("train_fraction must be in (0, 1]");

  const auto templates = class_templates(spec);
  const std::size_t C = spec.channels, R = spec.resolution, plane = R * R;

  Dataset ds;
  ds.name = spec.name + (spec.domain_shift ? "-shift" : "");
  ds.n_classes = spec.n_classes;
  ds.images = Tensor::zeros({spec.n, C, R, R});
  ds.labels.resize(spec.n);

  Rng srng(spec.sample_seed);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const int y = static_cast<int>(i % spec.n_classes);
    ds.labels[i] = y;
    const double a = srng.uniform(0.8, 1.2);
    const int dy = static_cast<int>(srng.uniform_below(3)) - 1;
    const int dx = static_cast<int>(srng.uniform_below(3)) - 1;
    const Tensor& t = templates[static_cast<std::size_t>(y)];
    double* img = ds.images.data.data() + i * C * plane;
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double* tp = t.data.data() + ch * plane;
      double* ip = img + ch * plane;
      for (std::size_t py = 0; py < R; ++py)
        for (std::size_t px = 0; px < R; ++px) {
          const int sy = static_cast<int>(py) + dy;
          const int sx = static_cast<int>(px) + dx;
          double v = 0.0;
          if (sy >= 0 && sy < static_cast<int>(R) && sx >= 0 && sx < static_cast<int>(R))
            v = a * tp[static_cast<std::size_t>(sy) * R + static_cast<std::size_t>(sx)];
          ip[py * R + px] = v + spec.noise_sigma * srng.normal();
        }
    }
  }

  const auto n_train = static_cast<std::size_t>(
      std::floor(spec.train_fraction * static_cast<double>(spec.n)));
  ds.train_idx.resize(n_train);
  for (std::size_t i = 0; i < n_train; ++i) ds.train_idx[i] = i;
  ds.test_idx.resize(spec.n - n_train);
  for (std::size_t i = n_train; i < spec.n; ++i) ds.test_idx[i - n_train] = i;
  ds.validate();
  return ds;
}

Tensor oracle_features(const Dataset& ds, const SynthSpec& spec) {
  const auto templates = class_templates(spec);
  const std::size_t n = ds.size(), C = spec.channels, plane = spec.resolution * spec.resolution;
  if (ds.images.shape[1] != C || ds.images.shape[2] != spec.resolution)
    throw DimensionError("dataset shape does not match the generator spec");
  // Per-channel centered correlation against each class template; the fixed
  // recolor affine cancels under centering.
  Tensor feats = Tensor::zeros({n, spec.n_classes});
  std::vector<Tensor> centered = templates;
  for (auto& t : centered)
    for (std::size_t ch = 0; ch < C; ++ch) {
      double* p = t.data.data() + ch * plane;
      double m = 0.0;
      for (std::size_t k = 0; k < plane; ++k) m += p[k];
      m /= static_cast<double>(plane);
      for (std::size_t k = 0; k < plane; ++k) p[k] -= m;
    }
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = ds.images.data.data() + i * C * plane;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      double f = 0.0;
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* ip = img + ch * plane;
        const double* tp = centered[c].data.data() + ch * plane;
        double im = 0.0;
        for (std::size_t k = 0; k < plane; ++k) im += ip[k];
        im /= static_cast<double>(plane);
        for (std::size_t k = 0; k < plane; ++k) f += (ip[k] - im) * tp[k];
      }
      feats.data[i * spec.n_classes + c] = f;
    }
  }
  return feats;
}

void AugPolicy::validate() const {
  if (!(crop_lo > 0.0 && crop_lo <= crop_hi && crop_hi <= 1.0))
    throw ConfigError("crop range must satisfy 0 < lo <= hi <= 1");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip probability outside [0, 1]");
  if (noise_sigma < 0.0 || noise_sigma > 0.5) throw ConfigError("noise sigma outside [0, 0.5]");
  if (channel_jitter < 0.0 || channel_jitter > 0.5)
    throw ConfigError("channel jitter outside [0, 0.5]");
}

Tensor augment(const Tensor& images, const AugPolicy& policy, Rng& rng) {
  policy.validate();
  if (images.shape.size() != 4)
    throw DimensionError("augment expects [N, C, H, W], got " + images.shape_str());
  const std::size_t N = images.shape[0], C = images.shape[1], H = images.shape[2],
                    W = images.shape[3];
  Tensor out = Tensor::zeros(images.shape);
  std::vector<double> window;
  for (std::size_t i = 0; i < N; ++i) {
    const double frac = rng.uniform(policy.crop_lo, policy.crop_hi);
    const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(
                                                 frac * static_cast<double>(H))));
    const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(
                                                 frac * static_cast<double>(W))));
    const std::size_t top = rng.uniform_below(H - std::min(ch, H) + 1);
    const std::size_t left = rng.uniform_below(W - std::min(cw, W) + 1);
    const bool flip = rng.uniform() < policy.flip_prob;
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = images.data.data() + (i * C + c) * H * W;
      double* dst = out.data.data() + (i * C + c) * H * W;
      window.assign(ch * cw, 0.0);
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) window[y * cw + x] = src[(top + y) * W + left + x];
      bilinear_resize(window.data(), ch, cw, dst, H, W);
      if (flip)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W / 2; ++x)
            std::swap(dst[y * W + x], dst[y * W + (W - 1 - x)]);
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double gain = 1.0 + rng.uniform(-policy.channel_jitter, policy.channel_jitter);
      double* dst = out.data.data() + (i * C + c) * H * W;
      for (std::size_t k = 0; k < H * W; ++k) dst[k] *= gain;
    }
    if (policy.noise_sigma > 0.0) {
      double* dst = out.data.data() + i * C * H * W;
      for (std::size_t k = 0; k < C * H * W; ++k) dst[k] += policy.noise_sigma * rng.normal();
    }
  }
  return out;
}

void TaskSpec::validate(std::size_t batch_size) const {
  if (name.empty()) throw ConfigError("task name must be non-empty");
  dataset.validate();
  aug.validate();
  if (kind == TaskKind::Supervised && dataset.labels.empty())
    throw ConfigError("supervised task '" + name + "' needs a labeled dataset");
  if (kind != TaskKind::Supervised) {
    if (temperature <= 0.0) throw ConfigError("contrastive temperature must be > 0");
    if (kind == TaskKind::MomentumQueue) {
      if (queue_size < batch_size)
        throw ConfigError("queue_size " + std::to_string(queue_size) +
                          " must be >= batch_size " + std::to_string(batch_size));
      if (momentum_coef < 0.0 || momentum_coef > 1.0)
        throw ConfigError("momentum coefficient outside [0, 1]");
    }
  }
}

// ---- IDX ------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

struct IdxHeader {
  unsigned dtype;
  std::vector<std::size_t> dims;
  std::size_t data_offset;
};

std::size_t dtype_size(unsigned dtype, const std::string& path) {
  switch (dtype) {
    case 0x08: return 1;  // unsigned byte
    case 0x0C: return 4;  // int32
    case 0x0D: return 4;  // float32
    case 0x0E: return 8;  // float64
    default:
      throw IoError("'" + path + "': unsupported IDX element type 0x" +
                    [&] { std::ostringstream s; s << std::hex << dtype; return s.str(); }());
  }
}

IdxHeader parse_idx_header(const std::vector<unsigned char>& b, const std::string& path) {
  if (b.size() < 4) throw IoError("'" + path + "': truncated IDX header at byte " +
                                  std::to_string(b.size()));
  if (b[0] != 0 || b[1] != 0)
    throw IoError("'" + path + "': bad IDX magic at byte 0 (expected 0x0000 prefix)");
  IdxHeader h;
  h.dtype = b[2];
  const std::size_t ndim = b[3];
  if (ndim == 0 || ndim > 4)
    throw IoError("'" + path + "': IDX rank " + std::to_string(ndim) + " unsupported");
  if (b.size() < 4 + 4 * ndim)
    throw IoError("'" + path + "': truncated IDX dims at byte " + std::to_string(b.size()));
  for (std::size_t d = 0; d < ndim; ++d) {
    const std::size_t off = 4 + 4 * d;
    const std::size_t v = (std::size_t(b[off]) << 24) | (std::size_t(b[off + 1]) << 16) |
                          (std::size_t(b[off + 2]) << 8) | std::size_t(b[off + 3]);
    h.dims.push_back(v);
  }
  h.data_offset = 4 + 4 * ndim;
  std::size_t count = 1;
  for (std::size_t v : h.dims) count *= v;
  const std::size_t need = h.data_offset + count * dtype_size(h.dtype, path);
  if (b.size() < need)
    throw IoError("'" + path + "': truncated IDX data, have " + std::to_string(b.size()) +
                  " bytes, need " + std::to_string(need) + " (failed at byte " +
                  std::to_string(b.size()) + ")");
  return h;
}

double read_be_element(const unsigned char* p, unsigned dtype) {
  switch (dtype) {
    case 0x08: return static_cast<double>(*p) / 255.0;
    case 0x0C: {
      const auto u = (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
                     (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
      std::int32_t s;
      std::memcpy(&s, &u, 4);
      return static_cast<double>(s);
    }
    case 0x0D: {
      const auto u = (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
                     (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
      float f;
      std::memcpy(&f, &u, 4);
      return static_cast<double>(f);
    }
    default: {  // 0x0E
      std::uint64_t u = 0;
      for (int i = 0; i < 8; ++i) u = (u << 8) | p[i];
      double d;
      std::memcpy(&d, &u, 8);
      return d;
    }
  }
}

void append_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void write_atomic(const std::string& path, const std::string& bytes) {
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

}  // namespace

Tensor load_idx_images(const std::string& path) {
  const auto bytes = read_file(path);
  const IdxHeader h = parse_idx_header(bytes, path);
  std::vector<std::size_t> shape;
  if (h.dims.size() == 3)
    shape = {h.dims[0], 1, h.dims[1], h.dims[2]};
  else if (h.dims.size() == 4)
    shape = {h.dims[0], h.dims[1], h.dims[2], h.dims[3]};
  else
    throw IoError("'" + path + "': image IDX must have rank 3 or 4, got " +
                  std::to_string(h.dims.size()));
  Tensor t = Tensor::zeros(shape);
  const std::size_t esz = dtype_size(h.dtype, path);
  const unsigned char* p = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < t.size(); ++i, p += esz)
    t.data[i] = read_be_element(p, h.dtype);
  check_finite(t, "IDX image data in '" + path + "'");
  return t;
}

std::vector<int> load_idx_labels(const std::string& path) {
  const auto bytes = read_file(path);
  const IdxHeader h = parse_idx_header(bytes, path);
  if (h.dims.size() != 1)
    throw IoError("'" + path + "': label IDX must have rank 1, got " +
                  std::to_string(h.dims.size()));
  if (h.dtype != 0x08 && h.dtype != 0x0C)
    throw IoError("'" + path + "': label IDX must hold bytes or int32");
  std::vector<int> labels(h.dims[0]);
  const std::size_t esz = dtype_size(h.dtype, path);
  const unsigned char* p = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < labels.size(); ++i, p += esz) {
    const double v = h.dtype == 0x08 ? static_cast<double>(*p) : read_be_element(p, h.dtype);
    labels[i] = static_cast<int>(v);
  }
  return labels;
}

void save_idx_images(const Tensor& images, const std::string& path) {
  if (images.shape.size() != 4)
    throw DimensionError("IDX image writer expects [N, C, H, W], got " + images.shape_str());
  std::string out;
  out.reserve(4 + 16 + images.size() * 8);
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x0E);
  out.push_back(4);
  for (std::size_t d : images.shape) append_be32(out, static_cast<std::uint32_t>(d));
  for (double v : images.data) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  write_atomic(path, out);
}

void save_idx_labels(const std::vector<int>& labels, const std::string& path) {
  std::string out;
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x0C);
  out.push_back(1);
  append_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int v : labels) append_be32(out, static_cast<std::uint32_t>(v));
  write_atomic(path, out);
}

// ---- CSV ------------------------------------------------------------------

Dataset load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::vector<int> labels;
  std::vector<double> pixels;
  std::size_t n_fields = 0, line_no = 0;
  std::string line;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t fields = 0;
    std::size_t pos = 0;
    bool first = true;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      const std::string cell = line.substr(pos, comma - pos);
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0')
        throw IoError("'" + path + "' line " + std::to_string(line_no) + ": cannot parse '" +
                      cell + "' as a number");
      if (first) {
        const auto lbl = static_cast<int>(v);
        if (static_cast<double>(lbl) != v || lbl < 0)
          throw IoError("'" + path + "' line " + std::to_string(line_no) +
                        ": label must be a non-negative integer, got '" + cell + "'");
        labels.push_back(lbl);
        first = false;
      } else {
        pixels.push_back(v);
      }
      ++fields;
      pos = comma + 1;
      if (comma == line.size()) break;
    }
    if (n_fields == 0)
      n_fields = fields;
    else if (fields != n_fields)
      throw IoError("'" + path + "' line " + std::to_string(line_no) + ": expected " +
                    std::to_string(n_fields) + " fields, got " + std::to_string(fields));
  }
  if (labels.empty()) throw IoError("'" + path + "': no data rows");
  const std::size_t per_image = n_fields - 1;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(per_image))));
  if (side * side != per_image)
    throw IoError("'" + path + "': " + std::to_string(per_image) +
                  " pixels per row is not a square image");
  Dataset ds;
  ds.name = std::filesystem::path(path).stem().string();
  ds.images = Tensor::zeros({labels.size(), 1, side, side});
  ds.images.data = std::move(pixels);
  check_finite(ds.images, "CSV image data in '" + path + "'");
  ds.labels = std::move(labels);
  ds.n_classes = static_cast<std::size_t>(*std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
  if (ds.labels.size() != ds.size())
    throw DimensionError("CSV writer needs one label per image");
  if (ds.images.shape[1] != 1 || ds.images.shape[2] != ds.images.shape[3])
    throw DimensionError("CSV writer handles single-channel square images only");
  std::ostringstream out;
  const std::size_t per_image = ds.images.shape[2] * ds.images.shape[3];
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    const double* p = ds.images.data.data() + i * per_image;
    for (std::size_t k = 0; k < per_image; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", p[k]);
      out << ',' << buf;
    }
    out << '\n';
  }
  write_atomic(path, out.str());
}

Dataset load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("'" + path + "': " + e.what());
  }
  static const std::vector<std::string> allowed = {
      "name", "format", "images", "labels", "csv", "n_classes", "split_seed", "train_fraction"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("manifest '" + path + "': unknown key '" + it.key() + "'");
  const auto dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return (dir / p).string(); };

  const std::string format = j.value("format", std::string("idx"));
  Dataset ds;
  if (format == "idx") {
    if (!j.contains("images") || !j.contains("labels"))
      throw ConfigError("manifest '" + path + "': idx format needs 'images' and 'labels'");
    ds.images = load_idx_images(resolve(j["images"].get<std::string>()));
    ds.labels = load_idx_labels(resolve(j["labels"].get<std::string>()));
    if (!ds.labels.empty())
      ds.n_classes = static_cast<std::size_t>(
                         *std::max_element(ds.labels.begin(), ds.labels.end())) + 1;
  } else if (format == "csv") {
    if (!j.contains("csv")) throw ConfigError("manifest '" + path + "': csv format needs 'csv'");
    ds = load_csv(resolve(j["csv"].get<std::string>()));
  } else {
    throw ConfigError("manifest '" + path + "': unknown format '" + format + "'");
  }
  ds.name = j.value("name", ds.name.empty() ? std::string("dataset") : ds.name);
  if (j.contains("n_classes")) ds.n_classes = j["n_classes"].get<std::size_t>();

  const auto split_seed = j.value("split_seed", std::uint64_t{0});
  const double train_fraction = j.value("train_fraction", 0.8);
  if (train_fraction <= 0.0 || train_fraction > 1.0)
    throw ConfigError("manifest '" + path + "': train_fraction must be in (0, 1]");
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(split_seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_below(i)]);
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  ds.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  ds.validate();
  return ds;
}

// ---- losses ----------------------------------------------------------------

LossGrad supervised_loss(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape.size() != 2)
    throw DimensionError("logits must be [batch, classes], got " + logits.shape_str());
  const std::size_t B = logits.shape[0], K = logits.shape[1];
  if (labels.size() != B)
    throw DimensionError("batch has " + std::to_string(B) + " logits rows but " +
                         std::to_string(labels.size()) + " labels");
  check_finite(logits, "logits");
  LossGrad out;
  out.grad = Tensor::zeros(logits.shape);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw DimensionError("label " + std::to_string(y) + " outside [0, " + std::to_string(K) +
                           ")");
    const double* row = logits.data.data() + b * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - mx);
    const double lse = mx + std::log(denom);
    total += lse - row[static_cast<std::size_t>(y)];
    double* g = out.grad.data.data() + b * K;
    for (std::size_t k = 0; k < K; ++k)
      g[k] = (std::exp(row[k] - lse) - (static_cast<int>(k) == y ? 1.0 : 0.0)) /
             static_cast<double>(B);
  }
  out.loss = total / static_cast<double>(B);
  return out;
}

namespace {

// Row norms + normalized copy; zero rows are a numeric error.
void normalize_rows(const Tensor& raw, Tensor& unit, std::vector<double>& norms,
                    const char* what) {
  const std::size_t n = raw.shape[0], d = raw.shape[1];
  unit = Tensor::zeros(raw.shape);
  norms.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = raw.data.data() + i * d;
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += p[k] * p[k];
    const double norm = std::sqrt(s);
    if (norm == 0.0)
      throw NumericError(std::string(what) + ": zero-norm embedding at row " + std::to_string(i));
    norms[i] = norm;
    double* q = unit.data.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) q[k] = p[k] / norm;
  }
}

// du = (I - uu^T)/|raw| applied to d(unit).
void chain_through_normalization(const Tensor& unit, const std::vector<double>& norms,
                                 Tensor& dunit_to_draw) {
  const std::size_t n = unit.shape[0], d = unit.shape[1];
  for (std::size_t i = 0; i < n; ++i) {
    double* g = dunit_to_draw.data.data() + i * d;
    const double* u = unit.data.data() + i * d;
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += g[k] * u[k];
    for (std::size_t k = 0; k < d; ++k) g[k] = (g[k] - dot * u[k]) / norms[i];
  }
}

}  // namespace

PairLossGrad ntxent_loss(const Tensor& z, const Tensor& zp, double tau) {
  if (z.shape.size() != 2 || zp.shape.size() != 2 || z.shape != zp.shape)
    throw DimensionError("paired embeddings must be two equal [n, dim] tensors, got " +
                         z.shape_str() + " and " + zp.shape_str());
  const std::size_t n = z.shape[0], d = z.shape[1];
  if (n < 2) throw DimensionError("contrastive batch needs n >= 2 pairs (no negatives otherwise)");
  if (tau <= 0.0) throw ConfigError("temperature must be > 0");
  check_finite(z, "embeddings");
  check_finite(zp, "paired embeddings");

  const std::size_t m = 2 * n;
  Tensor raw = Tensor::zeros({m, d});
  std::copy(z.data.begin(), z.data.end(), raw.data.begin());
  std::copy(zp.data.begin(), zp.data.end(), raw.data.begin() + static_cast<std::ptrdiff_t>(n * d));
  Tensor unit;
  std::vector<double> norms;
  normalize_rows(raw, unit, norms, "ntxent");

  // Cosine similarity matrix over all 2n embeddings.
  Tensor sim = Tensor::zeros({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      const double* a = unit.data.data() + i * d;
      const double* b = unit.data.data() + j * d;
      for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
      sim.data[i * m + j] = s;
    }

  auto pos = [n, m](std::size_t i) { return (i + n) % m; };

  double total = 0.0;
  Tensor coef = Tensor::zeros({m, m});  // d(loss)/d(sim[i][j]), anchor-major
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) mx = std::max(mx, sim.data[i * m + j] / tau);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) denom += std::exp(sim.data[i * m + j] / tau - mx);
    const double lse = mx + std::log(denom);
    total += lse - sim.data[i * m + pos(i)] / tau;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double p = std::exp(sim.data[i * m + j] / tau - lse);
      coef.data[i * m + j] =
          (p - (j == pos(i) ? 1.0 : 0.0)) / (static_cast<double>(m) * tau);
    }
  }

  // d(loss)/d(unit_a) collects the anchor-row and candidate-column terms.
  Tensor dunit = Tensor::zeros({m, d});
  for (std::size_t a = 0; a < m; ++a) {
    double* g = dunit.data.data() + a * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double c_aj = coef.data[a * m + j];
      const double c_ja = coef.data[j * m + a];
      if (c_aj == 0.0 && c_ja == 0.0) continue;
      const double* uj = unit.data.data() + j * d;
      const double w = c_aj + c_ja;
      for (std::size_t k = 0; k < d; ++k) g[k] += w * uj[k];
    }
  }
  chain_through_normalization(unit, norms, dunit);

  PairLossGrad out;
  out.loss = total / static_cast<double>(m);
  out.dz = Tensor::zeros({n, d});
  out.dzp = Tensor::zeros({n, d});
  std::copy(dunit.data.begin(), dunit.data.begin() + static_cast<std::ptrdiff_t>(n * d),
            out.dz.data.begin());
  std::copy(dunit.data.begin() + static_cast<std::ptrdiff_t>(n * d), dunit.data.end(),
            out.dzp.data.begin());
  return out;
}

double top1_retrieval_accuracy(const Tensor& z, const Tensor& zp) {
  if (z.shape.size() != 2 || zp.shape.size() != 2 || z.shape != zp.shape)
    throw DimensionError("paired embeddings must be two equal [n, dim] tensors, got " +
                         z.shape_str() + " and " + zp.shape_str());
  const std::size_t n = z.shape[0], d = z.shape[1];
  if (n < 2) throw DimensionError("retrieval needs n >= 2 pairs");
  const std::size_t m = 2 * n;
  Tensor raw = Tensor::zeros({m, d});
  std::copy(z.data.begin(), z.data.end(), raw.data.begin());
  std::copy(zp.data.begin(), zp.data.end(), raw.data.begin() + static_cast<std::ptrdiff_t>(n * d));
  Tensor unit;
  std::vector<double> norms;
  normalize_rows(raw, unit, norms, "retrieval");

  std::size_t hits = 0;
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t partner = (a + n) % m;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_j = m;  // first maximum in canonical order wins ties
    const double* ua = unit.data.data() + a * d;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == a) continue;
      const double* uj = unit.data.data() + j * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += ua[k] * uj[k];
      if (s > best) {
        best = s;
        best_j = j;
      }
    }
    if (best_j == partner) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(m);
}

QueueStepResult momentum_queue_step(Model& encoder, Model& key_encoder, EmbeddingQueue& queue,
                                    const Mask& mask, const Tensor& query_view,
                                    const Tensor& key_view, double tau, double momentum_coef) {
  if (tau <= 0.0) throw ConfigError("temperature must be > 0");
  if (momentum_coef < 0.0 || momentum_coef > 1.0)
    throw ConfigError("momentum coefficient outside [0, 1]");
  if (queue.capacity == 0) throw ConfigError("queue capacity must be >= 1");
  if (query_view.shape != key_view.shape)
    throw DimensionError("query and key views must share a shape");
  auto& qp = encoder.params;
  auto& kp = key_encoder.params;
  if (qp.entries.size() != kp.entries.size())
    throw DimensionError("query and key encoders have different parameter sets");

  // Momentum update first (MoCo ordering), no gradient through keys.
  for (std::size_t i = 0; i < kp.entries.size(); ++i) {
    auto& ke = kp.entries[i];
    const auto& qe = qp.entries[i];
    if (ke.name != qe.name || ke.value.shape != qe.value.shape)
      throw DimensionError("key encoder parameter '" + ke.name +
                           "' does not match the query encoder");
    for (std::size_t k = 0; k < ke.value.size(); ++k)
      ke.value.data[k] = momentum_coef * ke.value.data[k] + (1.0 - momentum_coef) * qe.value.data[k];
  }
  kp.bump_revision();

  Tensor k_raw = forward(key_encoder, mask, key_view, RunMode::Eval, nullptr);
  Tensor k_unit;
  std::vector<double> k_norms;
  normalize_rows(k_raw, k_unit, k_norms, "momentum keys");

  ActivationTape tape;
  Tensor q_raw = forward(encoder, mask, query_view, RunMode::Train, &tape);
  Tensor q_unit;
  std::vector<double> q_norms;
  normalize_rows(q_raw, q_unit, q_norms, "momentum queries");

  const std::size_t n = q_unit.shape[0], d = q_unit.shape[1];
  for (const auto& row : queue.rows)
    if (row.size() != d)
      throw DimensionError("queue embedding width " + std::to_string(row.size()) +
                           " does not match encoder output " + std::to_string(d));
  const std::size_t K = queue.rows.size();

  // Cross entropy with the own key as class 0 and queue entries as negatives.
  double total = 0.0;
  Tensor dq = Tensor::zeros({n, d});
  std::vector<double> logits(1 + K);
  for (std::size_t i = 0; i < n; ++i) {
    const double* qi = q_unit.data.data() + i * d;
    const double* ki = k_unit.data.data() + i * d;
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += qi[k] * ki[k];
    logits[0] = s / tau;
    for (std::size_t j = 0; j < K; ++j) {
      double sj = 0.0;
      const double* rj = queue.rows[j].data();
      for (std::size_t k = 0; k < d; ++k) sj += qi[k] * rj[k];
      logits[1 + j] = sj / tau;
    }
    double mx = logits[0];
    for (std::size_t j = 1; j <= K; ++j) mx = std::max(mx, logits[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j <= K; ++j) denom += std::exp(logits[j] - mx);
    const double lse = mx + std::log(denom);
    total += lse - logits[0];
    double* g = dq.data.data() + i * d;
    const double scale = 1.0 / (static_cast<double>(n) * tau);
    const double p0 = std::exp(logits[0] - lse);
    for (std::size_t k = 0; k < d; ++k) g[k] += scale * (p0 - 1.0) * ki[k];
    for (std::size_t j = 0; j < K; ++j) {
      const double pj = std::exp(logits[1 + j] - lse);
      const double* rj = queue.rows[j].data();
      for (std::size_t k = 0; k < d; ++k) g[k] += scale * pj * rj[k];
    }
  }
  chain_through_normalization(q_unit, q_norms, dq);

  QueueStepResult out;
  out.loss = total / static_cast<double>(n);
  out.grads = backward(encoder, mask, tape, dq);

  // FIFO enqueue of the fresh keys, oldest entries retired.
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(d);
    std::copy(k_unit.data.begin() + static_cast<std::ptrdiff_t>(i * d),
              k_unit.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d), row.begin());
    queue.rows.push_back(std::move(row));
  }
  while (queue.rows.size() > queue.capacity) queue.rows.erase(queue.rows.begin());
  return out;
}

}  // namespace implab
