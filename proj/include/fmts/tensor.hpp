#ifndef FMTS_TENSOR_HPP
#define FMTS_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fmts/errors.hpp"

namespace fmts {

using Vec = std::vector<double>;

/**
 * Dense row-major tensor of doubles. All model math runs in double
 * precision so that finite-difference checks stay sharp.
 */
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims);
  Tensor(std::vector<int> dims, Vec data);

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  const Vec& data() const { return data_; }
  Vec& raw() { return data_; }
  const Vec& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major index helpers for the common ranks.
  double& at2(int i, int j) { return data_[idx2(i, j)]; }
  double at2(int i, int j) const { return data_[idx2(i, j)]; }
  double& at3(int c, int y, int x) { return data_[idx3(c, y, x)]; }
  double at3(int c, int y, int x) const { return data_[idx3(c, y, x)]; }
  double& at4(int f, int c, int y, int x) { return data_[idx4(f, c, y, x)]; }
  double at4(int f, int c, int y, int x) const { return data_[idx4(f, c, y, x)]; }

  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * dims_[1] + j;
  }
  std::size_t idx3(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * dims_[1] + y) * dims_[2] + x;
  }
  std::size_t idx4(int f, int c, int y, int x) const {
    return ((static_cast<std::size_t>(f) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x;
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }
  void fill(double v);
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<int> dims_;
  Vec data_;
};

/// Shortest decimal string that parses back to exactly the same double.
std::string shortest_double(double v);

/**
 * Deterministic RNG, identical sequence on every platform.
 *
 * splitmix64: the state advances by the 64-bit golden-ratio increment and
 * each output is an avalanche mix of the new state:
 *   s += 0x9E3779B97F4A7C15
 *   z = s
 *   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
 *   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
 *   return z ^ (z >> 31)
 *
 * Uniform doubles take the top 53 bits, so every value is an exact dyadic
 * rational and bit-identical across compilers.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // [0, n). Fixed-point multiply, no rejection loop.
  std::uint64_t below(std::uint64_t n);

  // [lo, hi] inclusive.
  int uniform_int(int lo, int hi);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent substream seed from (seed, key).
  static std::uint64_t substream(std::uint64_t seed, std::uint64_t key);

 private:
  std::uint64_t state_;
};

}  // namespace fmts

#endif
