#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "cichlid/result.hpp"
#include "cichlid/types.hpp"

namespace cichlid {

enum class CapType : std::uint8_t {
  Untyped,
  Ram,
  CNode,
  Frame,
  Pml4,
  Pdpt,
  Pd,
  Pt,
};

const char* to_string(CapType t);

constexpr bool is_table_type(CapType t) {
  return t == CapType::Pml4 || t == CapType::Pdpt || t == CapType::Pd ||
         t == CapType::Pt;
}

// Walk level owning entries of this table type (4 = PML4 .. 1 = PT).
constexpr unsigned table_level(CapType t) {
  switch (t) {
    case CapType::Pml4: return 4;
    case CapType::Pdpt: return 3;
    case CapType::Pd: return 2;
    case CapType::Pt: return 1;
    default: return 0;
  }
}

constexpr bool retype_allowed(CapType from, CapType to) {
  if (from == CapType::Untyped) {
    return to == CapType::Ram || to == CapType::Untyped;
  }
  if (from == CapType::Ram) {
    return to == CapType::CNode || to == CapType::Frame || is_table_type(to);
  }
  return false;
}

// Opaque 32-bit handle: byte 3 holds the path depth (1..3), bytes 2..0 hold
// 8-bit CNode slot indices consumed root-first. Unused path bytes must be
// zero, so handle 0 never resolves. See docs/handles.md.
using CapHandle = std::uint32_t;

inline constexpr unsigned kCNodeSlots = 256;
inline constexpr unsigned kMaxHandleDepth = 3;

constexpr CapHandle make_handle(std::initializer_list<std::uint8_t> path) {
  CapHandle h = static_cast<CapHandle>(path.size()) << 24;
  unsigned shift = 16;
  for (auto s : path) {
    h |= static_cast<CapHandle>(s) << shift;
    shift -= 8;
  }
  return h;
}

struct MappingRecord {
  PhysAddr table_base = 0;   // physical page holding the entries
  CapType table_type = CapType::Pt;
  std::uint16_t entry = 0;   // first entry index
  std::uint16_t count = 1;   // consecutive entries covered by this capability
  Rights flags = Rights::rw();
  PageSize leaf_size = PageSize::k4K;
  bool table_mount = false;   // table-into-table (tree edge)
  bool status_mount = false;  // read-only table page mapped as data
};

class CNodeObject;
class CapSpace;

// A capability: typed, sized authority over a physical region, and a node
// of the derivation tree. Copies are siblings sharing (type, base, size).
class CapNode {
 public:
  CapType type = CapType::Untyped;
  PhysAddr base = 0;
  std::uint64_t size = 0;
  Rights rights = Rights::rw();
  std::optional<MappingRecord> mapping;

  CapNode* parent = nullptr;
  std::vector<CapNode*> children;  // ordered by insertion

  // Slot holding this capability (null for unaddressable survivors of a
  // destroyed CNode).
  CNodeObject* holder = nullptr;
  unsigned slot = 0;
  CapSpace* space = nullptr;
  CapHandle handle = 0;

  // Slot storage shared by all copies of a CNode capability.
  std::shared_ptr<CNodeObject> cnode;

  std::uint64_t end() const { return base + size; }
  bool overlaps(PhysAddr lo, PhysAddr hi) const {
    return base < hi && lo < end();
  }
};

class CNodeObject {
 public:
  std::array<CapNode*, kCNodeSlots> slots{};
  unsigned used = 0;

  int find_free() const {
    for (unsigned i = 0; i < kCNodeSlots; ++i) {
      if (slots[i] == nullptr) return static_cast<int>(i);
    }
    return -1;
  }
};

// Kernel-wide tree of all capabilities; supports the descendant/copy
// queries that guard retype and drive revocation.
class DerivationDb {
 public:
  CapNode* make_root(CapType type, PhysAddr base, std::uint64_t size);
  CapNode* add_child(CapNode* parent, CapType type, PhysAddr base,
                     std::uint64_t size, Rights rights);
  CapNode* add_copy(CapNode* src, Rights rights);

  // Unlinks and frees one node. Children are re-attached to the node's
  // parent (or become roots), preserving the partition property.
  void remove(CapNode* node);

  std::vector<CapNode*> copies_of(const CapNode* node) const;
  bool has_copy(const CapNode* node) const;

  // Any live node strictly below `node` (or below any copy of it)
  // overlapping [lo, hi)?
  bool subtree_overlaps(const CapNode* node, PhysAddr lo, PhysAddr hi) const;

  // Subtree of `node` excluding `node` itself, pre-order.
  void collect_descendants(CapNode* node, std::vector<CapNode*>& out) const;

  std::size_t size() const { return arena_.size(); }
  void for_each(const std::function<void(const CapNode&)>& fn) const;
  void for_each_mut(const std::function<void(CapNode&)>& fn);
  const std::vector<CapNode*>& roots() const { return roots_; }

  // Structural self-checks used by tests and the fuzz auditor.
  bool check_partition() const;
  bool check_type_exclusion() const;

 private:
  CapNode* alloc_node();

  std::unordered_map<CapNode*, std::unique_ptr<CapNode>> arena_;
  std::vector<CapNode*> roots_;
};

// Per-process radix tree of CNodes translating handles to capabilities.
class CapSpace {
 public:
  CapSpace();

  Result<CapNode*> resolve(CapHandle h) const;
  // Slots the capability into the lowest free handle (shallowest first).
  Result<CapHandle> insert(CapNode* node);
  // Clears the slot; the node stays in the DB. Detaching a CNode retires
  // every handle beneath its path.
  void detach(CapNode* node);

  CNodeObject& root() { return *root_; }
  const CNodeObject& root() const { return *root_; }

  std::size_t free_slot_count() const { return free_handles_.size(); }

  // All capabilities addressable from this space's root.
  std::vector<CapNode*> reachable() const;

 private:
  void drop_handles_below(CapHandle prefix);

  std::shared_ptr<CNodeObject> root_;
  std::set<CapHandle> free_handles_;
};

}  // namespace cichlid
