#include "steer/config.hpp"

#include <cmath>

namespace steer {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::InvalidArgument, "'" + key + "' " + what, "/" + key);
}

Scalar number(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) bad(key, "must be a number");
  const Scalar v = j.get<Scalar>();
  if (!std::isfinite(v)) bad(key, "must be finite");
  return v;
}

std::uint64_t count(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_unsigned()) bad(key, "must be a non-negative integer");
  return j.get<std::uint64_t>();
}

}  // namespace

void RunConfig::validate() const {
  if (!(lambda >= 0)) bad("lambda", "must be non-negative");
  if (!(q > 0 && q <= 1)) bad("q", "must lie in (0, 1]");
  if (K == 0) bad("K", "must be positive");
  if (!(rho >= 0 && rho <= 1)) bad("rho", "must lie in [0, 1]");
  if (gamma && !(*gamma >= 0)) bad("gamma", "must be non-negative or \"auto\"");
  if (beam == 0) bad("beam", "must be positive");
  if (iters == 0) bad("iters", "must be positive");
  if (!(pi0 > 0 && pi0 < 1)) bad("pi0", "must lie in (0, 1)");
  if (!(alpha > 0)) bad("alpha", "must be positive");
  if (!(kappa >= 0)) bad("kappa", "must be non-negative");
  if (cap == 0) bad("cap", "must be positive");
  if (threads == 0) bad("threads", "must be positive");
}

void RunConfig::apply(const nlohmann::json& patch) {
  if (!patch.is_object()) throw Error(ErrorCode::InvalidArgument, "config patch must be an object", "");
  RunConfig next = *this;
  for (const auto& [key, v] : patch.items()) {
    if (key == "lambda") next.lambda = number(v, key);
    else if (key == "q") next.q = number(v, key);
    else if (key == "K") next.K = count(v, key);
    else if (key == "rho") next.rho = number(v, key);
    else if (key == "gamma") {
      if (v.is_string() && v.get<std::string>() == "auto") next.gamma.reset();
      else next.gamma = number(v, key);
    } else if (key == "beam") next.beam = count(v, key);
    else if (key == "iters") next.iters = count(v, key);
    else if (key == "seed") next.seed = count(v, key);
    else if (key == "pi0") next.pi0 = number(v, key);
    else if (key == "alpha") next.alpha = number(v, key);
    else if (key == "kappa") next.kappa = number(v, key);
    else if (key == "cap") next.cap = count(v, key);
    else if (key == "threads") next.threads = static_cast<unsigned>(count(v, key));
    else if (key == "approx") {
      if (!v.is_boolean()) bad(key, "must be a boolean");
      next.approx = v.get<bool>();
    } else {
      bad(key, "is not a config key");
    }
  }
  next.validate();
  *this = next;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = {{"lambda", lambda}, {"q", q},         {"K", K},         {"rho", rho},     {"beam", beam},
                      {"iters", iters},   {"seed", seed},   {"pi0", pi0},     {"alpha", alpha}, {"kappa", kappa},
                      {"cap", cap},       {"threads", threads}, {"approx", approx}};
  j["gamma"] = gamma ? nlohmann::json(*gamma) : nlohmann::json("auto");
  return j;
}

BrtParams RunConfig::brt(std::size_t vocab_size) const {
  BrtParams p;
  p.dcm.alpha = alpha;
  p.dcm.kappa = kappa;
  p.dcm.vocab_size = std::max<std::size_t>(1, vocab_size);
  p.pi0 = pi0;
  p.lambda = lambda;
  p.approx = approx;
  p.threads = threads;
  return p;
}

ExtractParams RunConfig::extract() const {
  ExtractParams p;
  p.projection.K = K;
  p.projection.q = q;
  p.rho = rho;
  p.gamma = gamma;
  p.k_beam = beam;
  p.iters = iters;
  p.seed = seed;
  p.dcm.alpha = alpha;
  p.dcm.kappa = kappa;
  return p;
}

}  // namespace steer
