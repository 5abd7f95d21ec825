#ifndef STEER_COMMON_HPP
#define STEER_COMMON_HPP

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace steer {

using Scalar = double;

template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vec = VecX<Scalar>;
using Mat = MatX<Scalar>;

using TermId = std::uint32_t;
using DocIndex = std::uint32_t;
using NodeId = std::uint32_t;

inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

// Sparse term counts, sorted by term id, no zero entries.
using SparseCounts = std::vector<std::pair<TermId, std::int64_t>>;

enum class ErrorCode {
  EmptyDocument,
  ZeroVector,
  DimensionMismatch,
  DocNotInTree,
  NodeNotFound,
  TooFewDocuments,
  SchemaViolation,
  EmptyKb,
  NoProjectedDocuments,
  DegenerateWalk,
  MissingProvenance,
  FocusNotFound,
  TooFewSharedDocs,
  EmptyCorpus,
  IllegalMerge,
  IllegalMove,
  JobAlreadyRunning,
  Cancelled,
  Io,
  InvalidArgument,
  NotFound,
  NothingToUndo,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string path = {})
      : std::runtime_error(message), code_(code), path_(std::move(path)) {}

  ErrorCode code() const { return code_; }
  const std::string& path() const { return path_; }

 private:
  ErrorCode code_;
  std::string path_;
};

}  // namespace steer

#endif  // STEER_COMMON_HPP
