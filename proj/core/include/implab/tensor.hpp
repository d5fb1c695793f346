#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "implab/rng.hpp"

namespace implab {

// Dense row-major tensor of 64-bit floats. All kernels in this module are
// pure, serial, and use a fixed reduction order, so results are
// bit-reproducible run to run. Parallelism in this codebase happens at the
// level of independent experiment cells, never inside a kernel.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shp, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shp);
  static Tensor full(std::vector<std::size_t> shp, double value);

  std::size_t size() const { return data.size(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape[i]; }

  // 2D accessors (rows x cols).
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;

  // Bit-exact equality (shape and every element); NaN-free by construction
  // since check_finite guards the numeric boundaries.
  bool operator==(const Tensor&) const = default;
};

std::size_t shape_product(const std::vector<std::size_t>& shp);

// Throws NumericError if any element is NaN or Inf. `what` names the
// boundary for diagnostics.
void check_finite(const Tensor& t, const std::string& what);

// C[MxN] = A[MxK] * B[KxN]. Fixed k-ascending accumulation per element.
Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (no kernel flip): input [BxCxHxW], kernel [OxCxkxk].
// H' = (H + 2*pad - k) / stride + 1, floored.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// Row-wise softmax of a [NxC] tensor, max-subtracted.
Tensor softmax_rows(const Tensor& a);
double mean(const Tensor& a);
double l2norm(const Tensor& a);
// Rows scaled to unit L2 norm; throws NumericError on a zero row.
Tensor l2_normalize_rows(const Tensor& a);

// Kaiming-normal init: N(0, 2/fan_in); fan_in = product of all dims but the
// first. Deterministic in the rng stream.
Tensor kaiming_init(std::vector<std::size_t> shp, Rng& rng);

}  // namespace implab
