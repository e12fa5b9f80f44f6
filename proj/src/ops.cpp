#include "fmts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fmts/errors.hpp"

namespace fmts {

namespace {

void require_rank3(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(what) + " must be rank 3, got " + t.shape_str());
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Vec& bias,
                      int stride) {
  require_rank3(input, "conv input");
  if (weights.rank() != 4) {
    throw ShapeError("conv weights must be rank 4, got " + weights.shape_str());
  }
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = weights.dim(0), k = weights.dim(2);
  if (weights.dim(1) != C) {
    throw ShapeError("conv channel mismatch: input has " + std::to_string(C) +
                     ", weights expect " + std::to_string(weights.dim(1)));
  }
  if (weights.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv kernel must be square with odd side, got " + weights.shape_str());
  }
  if (static_cast<int>(bias.size()) != F) {
    throw ShapeError("conv bias size " + std::to_string(bias.size()) +
                     " != filter count " + std::to_string(F));
  }
  if (stride < 1) throw ShapeError("conv stride must be >= 1");

  const int pad = (k - 1) / 2;
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({F, Ho, Wo});
  for (int f = 0; f < F; ++f) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias[static_cast<std::size_t>(f)];
        const int y0 = oy * stride - pad;
        const int x0 = ox * stride - pad;
        for (int c = 0; c < C; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y0 + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = x0 + kx;
              if (ix < 0 || ix >= W) continue;
              acc += input.at3(c, iy, ix) * weights.at4(f, c, ky, kx);
            }
          }
        }
        out.at3(f, oy, ox) = acc;
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& upstream, const Tensor& input,
                            const Tensor& weights, int stride) {
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int F = weights.dim(0), k = weights.dim(2);
  const int pad = (k - 1) / 2;
  const int Ho = upstream.dim(1), Wo = upstream.dim(2);
  if (upstream.dim(0) != F) {
    throw ShapeError("conv upstream channels " + std::to_string(upstream.dim(0)) +
                     " != filter count " + std::to_string(F));
  }

  Conv2dGrads g{Tensor({C, H, W}), Tensor({F, C, k, k}), Vec(static_cast<std::size_t>(F), 0.0)};
  for (int f = 0; f < F; ++f) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        const double up = upstream.at3(f, oy, ox);
        if (up == 0.0) continue;
        g.d_bias[static_cast<std::size_t>(f)] += up;
        const int y0 = oy * stride - pad;
        const int x0 = ox * stride - pad;
        for (int c = 0; c < C; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y0 + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = x0 + kx;
              if (ix < 0 || ix >= W) continue;
              g.d_input.at3(c, iy, ix) += up * weights.at4(f, c, ky, kx);
              g.d_weights.at4(f, c, ky, kx) += up * input.at3(c, iy, ix);
            }
          }
        }
      }
    }
  }
  return g;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.dims());
  const Vec& x = input.data();
  Vec& y = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& upstream, const Tensor& input) {
  if (!upstream.same_shape(input)) {
    throw ShapeError("relu backward shape mismatch: " + upstream.shape_str() + " vs " +
                     input.shape_str());
  }
  Tensor out(input.dims());
  const Vec& x = input.data();
  const Vec& up = upstream.data();
  Vec& g = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? up[i] : 0.0;
  return out;
}

MaxPoolResult maxpool2d_forward(const Tensor& input, int window, int stride) {
  require_rank3(input, "maxpool input");
  if (window < 1 || stride < 1) throw ShapeError("maxpool window/stride must be >= 1");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H < window || W < window) {
    throw ShapeError("maxpool window " + std::to_string(window) + " larger than input " +
                     input.shape_str());
  }
  const int Ho = (H - window) / stride + 1;
  const int Wo = (W - window) / stride + 1;
  MaxPoolResult res{Tensor({C, Ho, Wo}), {}};
  res.argmax.resize(static_cast<std::size_t>(C) * Ho * Wo);
  std::size_t o = 0;
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox, ++o) {
        double best = -1.0;
        std::size_t best_idx = 0;
        bool first = true;
        for (int ky = 0; ky < window; ++ky) {
          for (int kx = 0; kx < window; ++kx) {
            const int iy = oy * stride + ky;
            const int ix = ox * stride + kx;
            const double v = input.at3(c, iy, ix);
            if (first || v > best) {
              best = v;
              best_idx = input.idx3(c, iy, ix);
              first = false;
            }
          }
        }
        res.output.at3(c, oy, ox) = best;
        res.argmax[o] = best_idx;
      }
    }
  }
  return res;
}

Tensor maxpool2d_backward(const Tensor& upstream, const Tensor& input,
                          const MaxPoolResult& fwd) {
  if (!upstream.same_shape(fwd.output)) {
    throw ShapeError("maxpool backward shape mismatch: " + upstream.shape_str() + " vs " +
                     fwd.output.shape_str());
  }
  Tensor g(input.dims());
  const Vec& up = upstream.data();
  for (std::size_t o = 0; o < up.size(); ++o) g.raw()[fwd.argmax[o]] += up[o];
  return g;
}

Vec linear_forward(const Vec& input, const Tensor& weights, const Vec& bias) {
  if (weights.rank() != 2) {
    throw ShapeError("linear weights must be rank 2, got " + weights.shape_str());
  }
  const int Do = weights.dim(0), Di = weights.dim(1);
  if (static_cast<int>(input.size()) != Di) {
    throw ShapeError("linear input size " + std::to_string(input.size()) + " != " +
                     std::to_string(Di));
  }
  if (static_cast<int>(bias.size()) != Do) {
    throw ShapeError("linear bias size " + std::to_string(bias.size()) + " != " +
                     std::to_string(Do));
  }
  Vec y(static_cast<std::size_t>(Do));
  for (int o = 0; o < Do; ++o) {
    double acc = bias[static_cast<std::size_t>(o)];
    for (int i = 0; i < Di; ++i) acc += weights.at2(o, i) * input[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

LinearGrads linear_backward(const Vec& upstream, const Vec& input, const Tensor& weights) {
  const int Do = weights.dim(0), Di = weights.dim(1);
  if (static_cast<int>(upstream.size()) != Do) {
    throw ShapeError("linear upstream size " + std::to_string(upstream.size()) + " != " +
                     std::to_string(Do));
  }
  LinearGrads g{Vec(input.size(), 0.0), Tensor({Do, Di}), Vec(upstream.size(), 0.0)};
  for (int o = 0; o < Do; ++o) {
    const double up = upstream[static_cast<std::size_t>(o)];
    g.d_bias[static_cast<std::size_t>(o)] = up;
    if (up == 0.0) continue;
    for (int i = 0; i < Di; ++i) {
      g.d_input[static_cast<std::size_t>(i)] += up * weights.at2(o, i);
      g.d_weights.at2(o, i) = up * input[static_cast<std::size_t>(i)];
    }
  }
  return g;
}

double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot size mismatch: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vec& v) { return std::sqrt(dot(v, v)); }

Vec l2_normalize(const Vec& v, double eps) {
  const double n = norm2(v);
  if (!(n > eps)) {
    throw DegenerateVectorError("cannot normalize vector with norm " + std::to_string(n));
  }
  Vec y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] / n;
  return y;
}

Vec l2_normalize_backward(const Vec& upstream, const Vec& v, double eps) {
  const double n = norm2(v);
  if (!(n > eps)) {
    throw DegenerateVectorError("cannot normalize vector with norm " + std::to_string(n));
  }
  if (upstream.size() != v.size()) {
    throw ShapeError("l2 backward size mismatch");
  }
  // d/dv (v/||v||) = (I - y y^T) / ||v|| with y = v/||v||.
  const double inv = 1.0 / n;
  double proj = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) proj += upstream[i] * v[i] * inv;
  Vec g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) g[i] = (upstream[i] - proj * v[i] * inv) * inv;
  return g;
}

}  // namespace fmts
