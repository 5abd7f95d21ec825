#include "steer/common.hpp"

namespace steer {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyDocument: return "EmptyDocument";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DocNotInTree: return "DocNotInTree";
    case ErrorCode::NodeNotFound: return "NodeNotFound";
    case ErrorCode::TooFewDocuments: return "TooFewDocuments";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::EmptyKb: return "EmptyKb";
    case ErrorCode::NoProjectedDocuments: return "NoProjectedDocuments";
    case ErrorCode::DegenerateWalk: return "DegenerateWalk";
    case ErrorCode::MissingProvenance: return "MissingProvenance";
    case ErrorCode::FocusNotFound: return "FocusNotFound";
    case ErrorCode::TooFewSharedDocs: return "TooFewSharedDocs";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::IllegalMerge: return "IllegalMerge";
    case ErrorCode::IllegalMove: return "IllegalMove";
    case ErrorCode::JobAlreadyRunning: return "JobAlreadyRunning";
    case ErrorCode::Cancelled: return "Cancelled";
    case ErrorCode::Io: return "Io";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::NothingToUndo: return "NothingToUndo";
  }
  return "Unknown";
}

}  // namespace steer
