#ifndef FMTS_OPS_HPP
#define FMTS_OPS_HPP

#include <cstddef>
#include <vector>

#include "fmts/tensor.hpp"

namespace fmts {

// Differentiable primitives. Each op is a pure forward function paired with
// an explicit backward that maps the upstream gradient to input gradients.
// Conventions fixed for determinism:
//   - relu uses subgradient 0 at x == 0
//   - max pooling breaks ties by the first index in row-major scan order
//   - conv2d zero-pads by (k-1)/2 (odd k only), so stride 1 preserves size

/**
 * 2-D convolution, input [C,H,W], weights [F,C,k,k], bias per filter.
 * Output [F,H',W'] with H' = floor((H + 2*pad - k)/stride) + 1.
 */
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Vec& bias,
                      int stride);

struct Conv2dGrads {
  Tensor d_input;
  Tensor d_weights;
  Vec d_bias;
};

Conv2dGrads conv2d_backward(const Tensor& upstream, const Tensor& input,
                            const Tensor& weights, int stride);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& upstream, const Tensor& input);

struct MaxPoolResult {
  Tensor output;
  // Flat index into the input for every output element (the argmax).
  std::vector<std::size_t> argmax;
};

MaxPoolResult maxpool2d_forward(const Tensor& input, int window, int stride);
Tensor maxpool2d_backward(const Tensor& upstream, const Tensor& input,
                          const MaxPoolResult& fwd);

/// y = W x + b with W [D_out, D_in].
Vec linear_forward(const Vec& input, const Tensor& weights, const Vec& bias);

struct LinearGrads {
  Vec d_input;
  Tensor d_weights;
  Vec d_bias;
};

LinearGrads linear_backward(const Vec& upstream, const Vec& input, const Tensor& weights);

constexpr double kNormEps = 1e-12;

/// v / ||v||. Throws DegenerateVectorError when ||v|| <= eps.
Vec l2_normalize(const Vec& v, double eps = kNormEps);

/// Projection Jacobian (I - y y^T)/||v|| applied to the upstream gradient.
Vec l2_normalize_backward(const Vec& upstream, const Vec& v, double eps = kNormEps);

double dot(const Vec& a, const Vec& b);
double norm2(const Vec& v);

}  // namespace fmts

#endif
