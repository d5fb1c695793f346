#include "implab/tensor.hpp"

#include <cmath>
#include <sstream>

#include "implab/errors.hpp"

namespace implab {

Tensor::Tensor(std::vector<std::size_t> shp, std::vector<double> values)
    : shape(std::move(shp)), data(std::move(values)) {
  if (shape_product(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str() + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shp) {
  std::size_t n = shape_product(shp);
  return Tensor(std::move(shp), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shp, double value) {
  std::size_t n = shape_product(shp);
  return Tensor(std::move(shp), std::vector<double>(n, value));
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data[r * shape[1] + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data[r * shape[1] + c];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_product(const std::vector<std::size_t>& shp) {
  std::size_t n = 1;
  for (std::size_t d : shp) n *= d;
  return n;
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value in " + what);
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw DimensionError("matmul: expected 2D tensors, got " + a.shape_str() +
                         " and " + b.shape_str());
  }
  if (a.shape[1] != b.shape[0]) {
    throw DimensionError("matmul: inner dims disagree, " + a.shape_str() +
                         " x " + b.shape_str());
  }
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  // ikj order: per output element the k-sum runs ascending; the j loop
  // vectorizes.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  if (input.ndim() != 4 || kernel.ndim() != 4) {
    throw DimensionError("conv2d: expected 4D input and kernel");
  }
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (pad < 0) throw DimensionError("conv2d: pad must be >= 0");
  const std::size_t B = input.shape[0], C = input.shape[1];
  const std::size_t H = input.shape[2], W = input.shape[3];
  const std::size_t O = kernel.shape[0], KC = kernel.shape[1];
  const std::size_t kh = kernel.shape[2], kw = kernel.shape[3];
  if (KC != C) {
    throw DimensionError("conv2d: channel mismatch, input has " +
                         std::to_string(C) + ", kernel expects " +
                         std::to_string(KC));
  }
  if (kh > H + 2 * static_cast<std::size_t>(pad) ||
      kw > W + 2 * static_cast<std::size_t>(pad)) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;

  Tensor out = Tensor::zeros({B, O, Ho, Wo});
  const std::size_t cols = C * kh * kw;
  // im2col buffer reused across batch items: [cols x Ho*Wo].
  std::vector<double> col(cols * Ho * Wo);
  const double* pin = input.data.data();
  const double* pk = kernel.data.data();
  double* pout = out.data.data();

  for (std::size_t b = 0; b < B; ++b) {
    const double* img = pin + b * C * H * W;
    double* pcol = col.data();
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - pad;
            const bool row_ok = iy >= 0 && iy < static_cast<long>(H);
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - pad;
              *pcol++ = (row_ok && ix >= 0 && ix < static_cast<long>(W))
                            ? img[(c * H + iy) * W + ix]
                            : 0.0;
            }
          }
        }
      }
    }
    // out[b] = kernel[O x cols] * col[cols x Ho*Wo]
    double* ob = pout + b * O * Ho * Wo;
    const std::size_t hw = Ho * Wo;
    for (std::size_t o = 0; o < O; ++o) {
      double* orow = ob + o * hw;
      const double* krow = pk + o * cols;
      for (std::size_t cc = 0; cc < cols; ++cc) {
        const double kv = krow[cc];
        if (kv == 0.0) continue;
        const double* crow = col.data() + cc * hw;
        for (std::size_t j = 0; j < hw; ++j) orow[j] += kv * crow[j];
      }
    }
  }
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r.data[i] += b.data[i];
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= b.data[i];
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r.data[i] *= b.data[i];
  return r;
}

Tensor scale(const Tensor& a, double c) {
  Tensor r = a;
  for (double& v : r.data) v *= c;
  return r;
}

Tensor relu(const Tensor& a) {
  Tensor r = a;
  for (double& v : r.data) v = v > 0.0 ? v : 0.0;
  return r;
}

Tensor exp(const Tensor& a) {
  Tensor r = a;
  for (double& v : r.data) v = std::exp(v);
  return r;
}

Tensor log(const Tensor& a) {
  Tensor r = a;
  for (double& v : r.data) v = std::log(v);
  return r;
}

Tensor softmax_rows(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("softmax_rows: expected 2D tensor");
  const std::size_t n = a.shape[0], c = a.shape[1];
  Tensor r = Tensor::zeros({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.data.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = row[j] > mx ? row[j] : mx;
    double sum = 0.0;
    double* out = r.data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp(row[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }
  return r;
}

double mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  double s = 0.0;
  for (double v : a.data) s += v;
  return s / static_cast<double>(a.size());
}

double l2norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

Tensor l2_normalize_rows(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("l2_normalize_rows: expected 2D");
  Tensor r = a;
  const std::size_t n = a.shape[0], d = a.shape[1];
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = a.data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
    if (s == 0.0) {
      throw NumericError("l2_normalize_rows: zero-norm row " +
                         std::to_string(i));
    }
    const double inv = 1.0 / std::sqrt(s);
    double* out = r.data.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
  }
  return r;
}

Tensor kaiming_init(std::vector<std::size_t> shp, Rng& rng) {
  if (shp.empty()) throw DimensionError("kaiming_init: empty shape");
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shp.size(); ++i) fan_in *= shp[i];
  if (fan_in == 0) throw DimensionError("kaiming_init: zero fan_in");
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shp));
  for (double& v : t.data) v = sigma * rng.normal();
  return t;
}

}  // namespace implab
