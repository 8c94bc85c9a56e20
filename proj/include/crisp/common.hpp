#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace crisp {

// Default scalar for pipeline runs. Gradient-check tests instantiate the
// templated core with double instead.
using real = float;

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecT = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Mat = MatT<real>;
using Vec = VecT<real>;

using TokenId = int32_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kBosToken = 0;
inline constexpr const char* kToolVersion = "0.1.0";

inline bool is_special_token(TokenId t) { return t == kBosToken; }

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg, long step = -1)
      : std::runtime_error(msg), step(step) {}
  long step;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace crisp
