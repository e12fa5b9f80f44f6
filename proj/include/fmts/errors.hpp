#ifndef FMTS_ERRORS_HPP
#define FMTS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fmts {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A vector whose norm is too small to normalize (collapsed embedding).
struct DegenerateVectorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An input that was required to be unit-norm is not.
struct NormalizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf encountered where finiteness is required; message names the term.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ROI that does not intersect the feature map at all.
struct OutOfBoundsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fmts

#endif
