#include "implab/network.hpp"

#include <cmath>
#include <cstring>

#include "implab/errors.hpp"

namespace implab {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnBlend = 0.1;

std::uint64_t fnv_u64(std::uint64_t h, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  return fnv1a64(bytes, 8, h);
}

}  // namespace

void ModelConfig::validate() const {
  if (width < 4) throw ConfigError("model width must be >= 4, got " + std::to_string(width));
  if (depth < 2 || depth > 6)
    throw ConfigError("model depth must be in [2, 6], got " + std::to_string(depth));
  if (in_channels == 0) throw ConfigError("model in_channels must be >= 1");
  if (head_arg == 0) throw ConfigError("model head size must be >= 1");
}

std::size_t ParamStore::d1() const {
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.prunable) n += e.value.size();
  return n;
}

std::size_t ParamStore::d2() const {
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.is_head) n += e.value.size();
  return n;
}

std::uint64_t ParamStore::layout_hash() const {
  std::uint64_t h = fnv1a64("implab.mask.layout");
  for (const auto& e : entries) {
    if (!e.prunable) continue;
    h = fnv1a64(e.name.data(), e.name.size(), h);
    h = fnv_u64(h, e.value.shape.size());
    for (std::size_t d : e.value.shape) h = fnv_u64(h, d);
    h = fnv_u64(h, e.mask_offset);
  }
  return fnv_u64(h, d1());
}

ParamEntry& ParamStore::find(const std::string& name) {
  for (auto& e : entries)
    if (e.name == name) return e;
  throw DimensionError("no parameter named '" + name + "'");
}

const ParamEntry& ParamStore::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw DimensionError("no parameter named '" + name + "'");
}

std::size_t ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].name == name) return i;
  throw DimensionError("no parameter named '" + name + "'");
}

namespace {

ParamEntry make_weight(std::string name, std::vector<std::size_t> shape, Rng& rng,
                       bool prunable, bool is_head) {
  ParamEntry e;
  e.name = std::move(name);
  e.value = kaiming_init(std::move(shape), rng);
  e.prunable = prunable;
  e.trainable = true;
  e.decay = true;
  e.is_head = is_head;
  return e;
}

ParamEntry make_vector(std::string name, std::size_t n, double fill, bool trainable,
                       bool is_head = false) {
  ParamEntry e;
  e.name = std::move(name);
  e.value = Tensor::full({n}, fill);
  e.prunable = false;
  e.trainable = trainable;
  e.decay = false;
  e.is_head = is_head;
  return e;
}

void append_bn(std::vector<ParamEntry>& out, const std::string& prefix, std::size_t c) {
  out.push_back(make_vector(prefix + ".gamma", c, 1.0, true));
  out.push_back(make_vector(prefix + ".beta", c, 0.0, true));
  out.push_back(make_vector(prefix + ".running_mean", c, 0.0, false));
  out.push_back(make_vector(prefix + ".running_var", c, 1.0, false));
}

void append_head(std::vector<ParamEntry>& out, const ModelConfig& cfg, Rng& rng) {
  if (cfg.head_kind == HeadKind::Classifier) {
    out.push_back(make_weight("head.fc.weight", {cfg.head_arg, cfg.width}, rng, false, true));
    out.push_back(make_vector("head.fc.bias", cfg.head_arg, 0.0, true, true));
  } else {
    out.push_back(make_weight("head.fc1.weight", {cfg.width, cfg.width}, rng, false, true));
    out.push_back(make_vector("head.fc1.bias", cfg.width, 0.0, true, true));
    out.push_back(make_weight("head.fc2.weight", {cfg.head_arg, cfg.width}, rng, false, true));
    out.push_back(make_vector("head.fc2.bias", cfg.head_arg, 0.0, true, true));
  }
}

void assign_mask_offsets(ParamStore& params) {
  std::size_t off = 0;
  for (auto& e : params.entries) {
    if (!e.prunable) continue;
    e.mask_offset = off;
    off += e.value.size();
  }
}

}  // namespace

Model build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  Model m;
  m.config = config;
  auto& es = m.params.entries;

  m.layers.push_back({LayerKind::Conv, "stem.conv",
                      {config.width, config.in_channels, 3, 3}, false});
  es.push_back(make_weight("stem.conv.weight", {config.width, config.in_channels, 3, 3},
                           rng, false, false));
  if (config.use_batchnorm) {
    m.layers.push_back({LayerKind::BatchNorm, "stem.bn", {config.width}, false});
    append_bn(es, "stem.bn", config.width);
  } else {
    es.push_back(make_vector("stem.conv.bias", config.width, 0.0, true));
  }
  m.layers.push_back({LayerKind::Relu, "stem.relu", {}, false});

  for (std::size_t b = 0; b < config.depth; ++b) {
    const std::string p = "block" + std::to_string(b);
    for (int half = 1; half <= 2; ++half) {
      const std::string conv = p + ".conv" + std::to_string(half);
      m.layers.push_back({LayerKind::Conv, conv, {config.width, config.width, 3, 3}, true});
      es.push_back(make_weight(conv + ".weight", {config.width, config.width, 3, 3},
                               rng, true, false));
      if (config.use_batchnorm) {
        const std::string bn = p + ".bn" + std::to_string(half);
        m.layers.push_back({LayerKind::BatchNorm, bn, {config.width}, false});
        append_bn(es, bn, config.width);
      } else {
        es.push_back(make_vector(conv + ".bias", config.width, 0.0, true));
      }
      if (half == 1) m.layers.push_back({LayerKind::Relu, p + ".relu1", {}, false});
    }
    m.layers.push_back({LayerKind::Relu, p + ".relu2", {}, false});
  }

  m.layers.push_back({LayerKind::GlobalAvgPool, "gap", {}, false});
  if (config.head_kind == HeadKind::Classifier) {
    m.layers.push_back({LayerKind::Linear, "head.fc", {config.head_arg, config.width}, false});
  } else {
    m.layers.push_back({LayerKind::Linear, "head.fc1", {config.width, config.width}, false});
    m.layers.push_back({LayerKind::Relu, "head.relu", {}, false});
    m.layers.push_back({LayerKind::Linear, "head.fc2", {config.head_arg, config.width}, false});
  }
  append_head(es, config, rng);

  assign_mask_offsets(m.params);
  return m;
}

Model model_with_params(const ModelConfig& config, ParamStore params) {
  Rng scratch(0);
  Model m = build_model(config, scratch);
  if (m.params.entries.size() != params.entries.size())
    throw DimensionError("parameter store has " + std::to_string(params.entries.size()) +
                         " entries, config expects " + std::to_string(m.params.entries.size()));
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    const auto& got = params.entries[i];
    const auto& want = m.params.entries[i];
    if (got.name != want.name || got.value.shape != want.value.shape)
      throw DimensionError("parameter entry " + std::to_string(i) + " is '" + got.name + "' " +
                           got.value.shape_str() + ", config expects '" + want.name + "' " +
                           want.value.shape_str());
  }
  m.params = std::move(params);
  return m;
}

void swap_head(Model& model, HeadKind kind, std::size_t head_arg, Rng& rng) {
  if (head_arg == 0) throw ConfigError("model head size must be >= 1");
  auto& es = model.params.entries;
  std::erase_if(es, [](const ParamEntry& e) { return e.is_head; });
  std::erase_if(model.layers, [](const LayerSpec& l) {
    return l.name.rfind("head.", 0) == 0;
  });
  model.config.head_kind = kind;
  model.config.head_arg = head_arg;
  const auto& cfg = model.config;
  if (kind == HeadKind::Classifier) {
    model.layers.push_back({LayerKind::Linear, "head.fc", {cfg.head_arg, cfg.width}, false});
  } else {
    model.layers.push_back({LayerKind::Linear, "head.fc1", {cfg.width, cfg.width}, false});
    model.layers.push_back({LayerKind::Relu, "head.relu", {}, false});
    model.layers.push_back({LayerKind::Linear, "head.fc2", {cfg.head_arg, cfg.width}, false});
  }
  append_head(es, cfg, rng);
  assign_mask_offsets(model.params);
  model.params.bump_revision();
}

void reinit_head(Model& model, Rng& rng) {
  swap_head(model, model.config.head_kind, model.config.head_arg, rng);
}

void require_mask_matches(const ParamStore& params, const Mask& mask) {
  if (mask.size() != params.d1())
    throw DimensionError("mask has " + std::to_string(mask.size()) + " bits but model has " +
                         std::to_string(params.d1()) + " prunable weights");
  if (mask.layout_id() != params.layout_hash())
    throw DimensionError("mask layout id does not match the model's prunable layout");
}

ParamStore apply_mask(const ParamStore& params, const Mask& mask) {
  require_mask_matches(params, mask);
  ParamStore out = params;
  for (auto& e : out.entries) {
    if (!e.prunable) continue;
    for (std::size_t i = 0; i < e.value.size(); ++i)
      if (!mask.get(e.mask_offset + i)) e.value.data[i] = 0.0;
  }
  return out;
}

namespace {

// ---- layer kernels -------------------------------------------------------
// All loops run serially in a fixed order so repeated runs are bit-identical.

void add_channel_bias(Tensor& t, const Tensor& bias) {
  const std::size_t b = t.shape[0], c = t.shape[1], hw = t.shape[2] * t.shape[3];
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double* p = t.data.data() + (i * c + j) * hw;
      const double v = bias.data[j];
      for (std::size_t k = 0; k < hw; ++k) p[k] += v;
    }
}

// dinput/dkernel accumulation for a stride-1 style conv (generic stride kept
// for completeness). Same padding convention as the forward kernel.
void conv2d_grads(const Tensor& input, const Tensor& kernel, const Tensor& dout,
                  std::size_t stride, std::size_t pad, Tensor* dinput, Tensor* dkernel) {
  const std::size_t B = input.shape[0], C = input.shape[1], H = input.shape[2],
                    W = input.shape[3];
  const std::size_t O = kernel.shape[0], KH = kernel.shape[2], KW = kernel.shape[3];
  const std::size_t OH = dout.shape[2], OW = dout.shape[3];
  if (dinput) *dinput = Tensor::zeros({B, C, H, W});
  if (dkernel) *dkernel = Tensor::zeros({O, C, KH, KW});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          const double g = dout.data[((b * O + o) * OH + oy) * OW + ox];
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xi = ((b * C + c) * H + iy) * W + ix;
                const std::size_t wi = ((o * C + c) * KH + ky) * KW + kx;
                if (dkernel) dkernel->data[wi] += g * input.data[xi];
                if (dinput) dinput->data[xi] += g * kernel.data[wi];
              }
            }
        }
}

Tensor bn_forward(const Tensor& x, ParamEntry& gamma, ParamEntry& beta, ParamEntry& rmean,
                  ParamEntry& rvar, RunMode mode, BnStash* stash) {
  const std::size_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  const std::size_t m = B * HW;
  Tensor y = Tensor::zeros(x.shape);
  if (stash) {
    stash->xhat = Tensor::zeros(x.shape);
    stash->istd.assign(C, 0.0);
    stash->gamma.assign(gamma.value.data.begin(), gamma.value.data.end());
  }
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == RunMode::Train) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data.data() + (b * C + c) * HW;
        for (std::size_t k = 0; k < HW; ++k) s += p[k];
      }
      mean = s / static_cast<double>(m);
      double s2 = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = x.data.data() + (b * C + c) * HW;
        for (std::size_t k = 0; k < HW; ++k) {
          const double d = p[k] - mean;
          s2 += d * d;
        }
      }
      var = s2 / static_cast<double>(m);  // biased estimator
      rmean.value.data[c] = (1.0 - kBnBlend) * rmean.value.data[c] + kBnBlend * mean;
      rvar.value.data[c] = (1.0 - kBnBlend) * rvar.value.data[c] + kBnBlend * var;
    } else {
      mean = rmean.value.data[c];
      var = rvar.value.data[c];
    }
    const double istd = 1.0 / std::sqrt(var + kBnEps);
    if (stash) stash->istd[c] = istd;
    const double g = gamma.value.data[c], bt = beta.value.data[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* p = x.data.data() + (b * C + c) * HW;
      double* q = y.data.data() + (b * C + c) * HW;
      double* xh = stash ? stash->xhat.data.data() + (b * C + c) * HW : nullptr;
      for (std::size_t k = 0; k < HW; ++k) {
        const double xn = (p[k] - mean) * istd;
        if (xh) xh[k] = xn;
        q[k] = g * xn + bt;
      }
    }
  }
  return y;
}

// Train-mode batchnorm backward:
// dx = gamma*istd*(dy - mean(dy) - xhat*mean(dy*xhat)), per channel.
void bn_backward(const BnStash& stash, const Tensor& dy, Tensor& dx, Tensor& dgamma,
                 Tensor& dbeta) {
  const Tensor& xh = stash.xhat;
  const std::size_t B = xh.shape[0], C = xh.shape[1], HW = xh.shape[2] * xh.shape[3];
  const double m = static_cast<double>(B * HW);
  dx = Tensor::zeros(xh.shape);
  dgamma = Tensor::zeros({C});
  dbeta = Tensor::zeros({C});
  for (std::size_t c = 0; c < C; ++c) {
    double sg = 0.0, sb = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* pd = dy.data.data() + (b * C + c) * HW;
      const double* px = xh.data.data() + (b * C + c) * HW;
      for (std::size_t k = 0; k < HW; ++k) {
        sg += pd[k] * px[k];
        sb += pd[k];
      }
    }
    dgamma.data[c] = sg;
    dbeta.data[c] = sb;
    const double coef = stash.gamma[c] * stash.istd[c];
    const double mg = sg / m, mb = sb / m;
    for (std::size_t b = 0; b < B; ++b) {
      const double* pd = dy.data.data() + (b * C + c) * HW;
      const double* px = xh.data.data() + (b * C + c) * HW;
      double* pq = dx.data.data() + (b * C + c) * HW;
      for (std::size_t k = 0; k < HW; ++k) pq[k] = coef * (pd[k] - mb - px[k] * mg);
    }
  }
}

Tensor global_avg_pool(const Tensor& x) {
  const std::size_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  Tensor out = Tensor::zeros({B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data.data() + (b * C + c) * HW;
      double s = 0.0;
      for (std::size_t k = 0; k < HW; ++k) s += p[k];
      out.data[b * C + c] = s / static_cast<double>(HW);
    }
  return out;
}

// out[b,o] = sum_i x[b,i] * w[o,i] + bias[o]
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::size_t B = x.shape[0], I = x.shape[1], O = w.shape[0];
  if (w.shape[1] != I)
    throw DimensionError("linear input width " + std::to_string(I) + " != weight width " +
                         std::to_string(w.shape[1]));
  Tensor out = Tensor::zeros({B, O});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      double s = bias.data[o];
      const double* px = x.data.data() + b * I;
      const double* pw = w.data.data() + o * I;
      for (std::size_t i = 0; i < I; ++i) s += px[i] * pw[i];
      out.data[b * O + o] = s;
    }
  return out;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dout, Tensor& dx,
                     Tensor& dw, Tensor& dbias) {
  const std::size_t B = x.shape[0], I = x.shape[1], O = w.shape[0];
  dx = Tensor::zeros({B, I});
  dw = Tensor::zeros({O, I});
  dbias = Tensor::zeros({O});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const double g = dout.data[b * O + o];
      if (g == 0.0) continue;
      dbias.data[o] += g;
      const double* px = x.data.data() + b * I;
      const double* pw = w.data.data() + o * I;
      double* pdx = dx.data.data() + b * I;
      double* pdw = dw.data.data() + o * I;
      for (std::size_t i = 0; i < I; ++i) {
        pdw[i] += g * px[i];
        pdx[i] += g * pw[i];
      }
    }
}

Tensor relu_backward(const Tensor& post, const Tensor& dy) {
  Tensor dx = Tensor::zeros(post.shape);
  for (std::size_t i = 0; i < post.size(); ++i)
    dx.data[i] = post.data[i] > 0.0 ? dy.data[i] : 0.0;
  return dx;
}

Tensor masked_weight(const ParamEntry& e, const Mask& mask) {
  Tensor w = e.value;
  if (e.prunable)
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!mask.get(e.mask_offset + i)) w.data[i] = 0.0;
  return w;
}

}  // namespace

Tensor forward(Model& model, const Mask& mask, const Tensor& x, RunMode mode,
               ActivationTape* tape) {
  auto& P = model.params;
  require_mask_matches(P, mask);
  if (x.shape.size() != 4)
    throw DimensionError("model input must be [batch, channels, h, w], got " + x.shape_str());
  if (x.shape[1] != model.config.in_channels)
    throw DimensionError("model expects " + std::to_string(model.config.in_channels) +
                         " input channels, got " + std::to_string(x.shape[1]));
  const bool bn = model.config.use_batchnorm;
  if (tape) {
    *tape = ActivationTape{};
    tape->owner = &P;
    tape->mode = mode;
    tape->input = x;
    tape->blocks.resize(model.config.depth);
  }

  const Tensor& stem_w = P.find("stem.conv.weight").value;
  Tensor h = conv2d(x, stem_w, 1, 1);
  if (tape) {
    tape->stem_w = stem_w;
    tape->stem_conv_out = h;
  }
  if (bn) {
    h = bn_forward(h, P.find("stem.bn.gamma"), P.find("stem.bn.beta"),
                   P.find("stem.bn.running_mean"), P.find("stem.bn.running_var"), mode,
                   tape ? &tape->stem_bn : nullptr);
  } else {
    add_channel_bias(h, P.find("stem.conv.bias").value);
  }
  h = relu(h);
  if (tape) tape->stem_act = h;

  for (std::size_t b = 0; b < model.config.depth; ++b) {
    const std::string p = "block" + std::to_string(b);
    BlockStash* bs = tape ? &tape->blocks[b] : nullptr;
    if (bs) bs->in = h;

    Tensor w1 = masked_weight(P.find(p + ".conv1.weight"), mask);
    Tensor c1 = conv2d(h, w1, 1, 1);
    if (bs) {
      bs->w1 = w1;
      bs->c1_out = c1;
    }
    if (bn) {
      c1 = bn_forward(c1, P.find(p + ".bn1.gamma"), P.find(p + ".bn1.beta"),
                      P.find(p + ".bn1.running_mean"), P.find(p + ".bn1.running_var"), mode,
                      bs ? &bs->bn1 : nullptr);
    } else {
      add_channel_bias(c1, P.find(p + ".conv1.bias").value);
    }
    Tensor r1 = relu(c1);
    if (bs) bs->r1 = r1;

    Tensor w2 = masked_weight(P.find(p + ".conv2.weight"), mask);
    Tensor c2 = conv2d(r1, w2, 1, 1);
    if (bs) {
      bs->w2 = w2;
      bs->c2_out = c2;
    }
    if (bn) {
      c2 = bn_forward(c2, P.find(p + ".bn2.gamma"), P.find(p + ".bn2.beta"),
                      P.find(p + ".bn2.running_mean"), P.find(p + ".bn2.running_var"), mode,
                      bs ? &bs->bn2 : nullptr);
    } else {
      add_channel_bias(c2, P.find(p + ".conv2.bias").value);
    }
    // identity skip: out = relu(in + residual branch)
    Tensor sum = add(h, c2);
    h = relu(sum);
    if (bs) bs->out = h;
  }

  Tensor feat = global_avg_pool(h);
  if (tape) tape->feat = feat;

  Tensor out;
  if (model.config.head_kind == HeadKind::Classifier) {
    out = linear_forward(feat, P.find("head.fc.weight").value, P.find("head.fc.bias").value);
  } else {
    Tensor hid = linear_forward(feat, P.find("head.fc1.weight").value,
                                P.find("head.fc1.bias").value);
    hid = relu(hid);
    if (tape) tape->proj_hidden = hid;
    out = linear_forward(hid, P.find("head.fc2.weight").value, P.find("head.fc2.bias").value);
  }
  if (tape) tape->revision = P.revision;
  return out;
}

Grads backward(const Model& model, const Mask& mask, const ActivationTape& tape,
               const Tensor& output_grad) {
  const auto& P = model.params;
  if (tape.owner != &P || tape.revision != P.revision)
    throw Error("stale activation tape: parameters changed since the recorded forward pass");
  if (tape.mode != RunMode::Train)
    throw Error("backward requires a tape recorded in train mode");
  require_mask_matches(P, mask);
  if (output_grad.shape.size() != 2 || output_grad.shape[0] != tape.input.shape[0] ||
      output_grad.shape[1] != model.config.head_arg)
    throw DimensionError("output gradient must be [batch, " +
                         std::to_string(model.config.head_arg) + "], got " +
                         output_grad.shape_str());
  const bool bn = model.config.use_batchnorm;

  Grads grads;
  grads.by_entry.assign(P.entries.size(), Tensor{});
  auto slot = [&](const std::string& name) -> Tensor& {
    return grads.by_entry[P.index_of(name)];
  };

  // Head.
  Tensor dfeat;
  if (model.config.head_kind == HeadKind::Classifier) {
    linear_backward(tape.feat, P.find("head.fc.weight").value, output_grad, dfeat,
                    slot("head.fc.weight"), slot("head.fc.bias"));
  } else {
    Tensor dhid;
    linear_backward(tape.proj_hidden, P.find("head.fc2.weight").value, output_grad, dhid,
                    slot("head.fc2.weight"), slot("head.fc2.bias"));
    dhid = relu_backward(tape.proj_hidden, dhid);
    linear_backward(tape.feat, P.find("head.fc1.weight").value, dhid, dfeat,
                    slot("head.fc1.weight"), slot("head.fc1.bias"));
  }

  // Global average pool: spread each feature gradient over its plane.
  const Tensor& last = tape.blocks.back().out;
  const std::size_t B = last.shape[0], C = last.shape[1], H = last.shape[2], W = last.shape[3];
  Tensor dh = Tensor::zeros(last.shape);
  const double inv_hw = 1.0 / static_cast<double>(H * W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dfeat.data[b * C + c] * inv_hw;
      double* p = dh.data.data() + (b * C + c) * H * W;
      for (std::size_t k = 0; k < H * W; ++k) p[k] = g;
    }

  for (std::size_t bi = model.config.depth; bi-- > 0;) {
    const std::string p = "block" + std::to_string(bi);
    const BlockStash& bs = tape.blocks[bi];
    // through the output relu; the same gradient feeds both the skip and
    // the residual branch
    Tensor dsum = relu_backward(bs.out, dh);
    Tensor dc2 = dsum;
    if (bn) {
      Tensor tmp;
      bn_backward(bs.bn2, dsum, tmp, slot(p + ".bn2.gamma"), slot(p + ".bn2.beta"));
      dc2 = tmp;
    } else {
      Tensor& dbias = slot(p + ".conv2.bias");
      dbias = Tensor::zeros({C});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double* q = dc2.data.data() + (b * C + c) * H * W;
          for (std::size_t k = 0; k < H * W; ++k) dbias.data[c] += q[k];
        }
    }
    Tensor dr1;
    conv2d_grads(bs.r1, bs.w2, dc2, 1, 1, &dr1, &slot(p + ".conv2.weight"));
    Tensor dc1 = relu_backward(bs.r1, dr1);
    if (bn) {
      Tensor tmp;
      bn_backward(bs.bn1, dc1, tmp, slot(p + ".bn1.gamma"), slot(p + ".bn1.beta"));
      dc1 = tmp;
    } else {
      Tensor& dbias = slot(p + ".conv1.bias");
      dbias = Tensor::zeros({C});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double* q = dc1.data.data() + (b * C + c) * H * W;
          for (std::size_t k = 0; k < H * W; ++k) dbias.data[c] += q[k];
        }
    }
    Tensor din;
    conv2d_grads(bs.in, bs.w1, dc1, 1, 1, &din, &slot(p + ".conv1.weight"));
    dh = add(din, dsum);  // conv path + identity skip
  }

  // Stem.
  Tensor dstem = relu_backward(tape.stem_act, dh);
  if (bn) {
    Tensor tmp;
    bn_backward(tape.stem_bn, dstem, tmp, slot("stem.bn.gamma"), slot("stem.bn.beta"));
    dstem = tmp;
  } else {
    Tensor& dbias = slot("stem.conv.bias");
    dbias = Tensor::zeros({model.config.width});
    const std::size_t hw = dstem.shape[2] * dstem.shape[3];
    for (std::size_t b = 0; b < dstem.shape[0]; ++b)
      for (std::size_t c = 0; c < dstem.shape[1]; ++c) {
        const double* q = dstem.data.data() + (b * dstem.shape[1] + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) dbias.data[c] += q[k];
      }
  }
  conv2d_grads(tape.input, tape.stem_w, dstem, 1, 1, nullptr, &slot("stem.conv.weight"));

  // Chain rule through the mask: gradients at masked-off coordinates are
  // exactly zero.
  for (std::size_t i = 0; i < P.entries.size(); ++i) {
    const auto& e = P.entries[i];
    if (!e.prunable || grads.by_entry[i].size() == 0) continue;
    for (std::size_t k = 0; k < e.value.size(); ++k)
      if (!mask.get(e.mask_offset + k)) grads.by_entry[i].data[k] = 0.0;
  }
  return grads;
}

}  // namespace implab
