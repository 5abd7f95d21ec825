#ifndef STEER_CONFIG_HPP
#define STEER_CONFIG_HPP

#include "steer/brt.hpp"
#include "steer/kb.hpp"

#include "json.hpp"

#include <optional>

namespace steer {

/// Knobs shared by the CLI and the steering service.
struct RunConfig {
  Scalar lambda = 1e-6;
  Scalar q = 0.10;
  std::size_t K = 50;
  Scalar rho = 0.9;
  std::optional<Scalar> gamma;  // auto when empty
  std::size_t beam = 20;
  std::size_t iters = 30;
  std::uint64_t seed = 0;
  Scalar pi0 = 0.5;
  Scalar alpha = 0.01;
  Scalar kappa = 100;
  std::size_t cap = kDefaultTripletCap;
  unsigned threads = 1;
  bool approx = false;

  void validate() const;
  /// Applies the keys present in `patch`; unknown keys and bad values are
  /// InvalidArgument with a pointer path. Leaves *this untouched on error.
  void apply(const nlohmann::json& patch);
  nlohmann::json to_json() const;

  BrtParams brt(std::size_t vocab_size) const;
  ExtractParams extract() const;
};

}  // namespace steer

#endif  // STEER_CONFIG_HPP
