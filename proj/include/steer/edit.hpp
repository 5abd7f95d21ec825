#ifndef STEER_EDIT_HPP
#define STEER_EDIT_HPP

#include "steer/common.hpp"
#include "steer/corpus.hpp"
#include "steer/dcm.hpp"
#include "steer/tree.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace steer {

// User edits. Each returns a new tree; the input is left untouched, so a
// failed edit never changes the visible version. Touched nodes are flagged
// `edited` and may end up unary.

enum class EditMode { Absorb, Join, Collapse };

EditMode edit_mode_from_string(std::string_view s);
const char* to_string(EditMode mode);

/// absorb: src becomes a child of dst (dst must not lie under src).
/// join: a new node with children {src, dst} takes dst's place.
/// collapse: src's children move under dst and src disappears (both internal).
/// join and collapse need src and dst unrelated.
RoseTree merge_nodes(const RoseTree& tree, NodeId src, NodeId dst, EditMode mode);

/// Detaches the subtree under `node`; its documents are appended to `released`.
RoseTree remove_node(const RoseTree& tree, NodeId node, std::vector<DocIndex>& released);

/// Re-homes documents already in the tree. A leaf target takes them in; an
/// internal target gets a new leaf child, unless it is an ancestor of a
/// document's current leaf (IllegalMove). Documents already in the target stay put.
RoseTree move_documents(const RoseTree& tree, std::span<const DocIndex> docs, NodeId to);

/// Places documents that are not in the tree under `to`, as in move_documents.
/// An empty tree gets a single leaf root.
RoseTree insert_documents(const RoseTree& tree, std::span<const DocIndex> docs, NodeId to);

/// Takes documents out of their leaves (documents not in the tree are ignored).
RoseTree remove_documents(const RoseTree& tree, std::span<const DocIndex> docs);

RoseTree rename_node(const RoseTree& tree, NodeId node, std::string label);

/// Internal node whose pooled counts give `doc` the highest log DCM likelihood.
NodeId best_attachment(const RoseTree& tree, const Corpus& corpus, const Document& doc, const DcmParams& dcm);

/// Most frequent terms pooled over the node's documents, ties by term.
std::vector<std::pair<std::string, std::int64_t>> top_terms(const RoseTree& tree, NodeId node, const Corpus& corpus,
                                                            std::size_t k);

}  // namespace steer

#endif  // STEER_EDIT_HPP
