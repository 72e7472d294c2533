#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace reclab {

// Row-major so that row = one token / one item embedding is contiguous.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

using Index = Eigen::Index;

// Error taxonomy shared by all modules. Config errors are caller mistakes
// caught before any work; contract errors are violated preconditions;
// data errors cover malformed or inconsistent inputs.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : DataError {
  using DataError::DataError;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}
inline void require_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}
inline void require_data(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

template <typename Scalar>
bool all_finite(const Mat<Scalar>& m) {
  return m.allFinite();
}

// FNV-1a, used for artifact manifests and seed sub-stream derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}
inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

}  // namespace reclab
