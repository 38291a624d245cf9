#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace gestura {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matf = Mat<float>;
using Matd = Mat<double>;
using Vecf = Vec<float>;
using Vecd = Vec<double>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid values or shapes passed to an operation.
struct ArgumentError : Error {
  using Error::Error;
};

// Unreadable or unparseable input files.
struct LoadError : Error {
  using Error::Error;
};

// Input parsed but violates the declared schema (e.g. keypoint count).
struct SchemaError : Error {
  using Error::Error;
};

// Bad configuration: unknown keys, out-of-range values.
struct ConfigError : Error {
  using Error::Error;
};

// Failed writes.
struct IoError : Error {
  using Error::Error;
};

// Corrupt or incompatible checkpoint containers.
struct CheckpointError : Error {
  using Error::Error;
};

// Numeric divergence during optimization.
struct TrainError : Error {
  using Error::Error;
};

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

template <typename S>
void require_finite(const Mat<S>& m, const std::string& what) {
  if (!m.allFinite()) throw ArgumentError(what + ": non-finite values");
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

}  // namespace gestura
