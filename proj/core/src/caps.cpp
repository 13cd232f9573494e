#include "cichlid/caps.hpp"

#include <algorithm>
#include <cassert>

namespace cichlid {

const char* to_string(CapType t) {
  switch (t) {
    case CapType::Untyped: return "untyped";
    case CapType::Ram: return "ram";
    case CapType::CNode: return "cnode";
    case CapType::Frame: return "frame";
    case CapType::Pml4: return "pml4";
    case CapType::Pdpt: return "pdpt";
    case CapType::Pd: return "pd";
    case CapType::Pt: return "pt";
  }
  return "?";
}

CapNode* DerivationDb::alloc_node() {
  auto owned = std::make_unique<CapNode>();
  CapNode* n = owned.get();
  arena_.emplace(n, std::move(owned));
  return n;
}

CapNode* DerivationDb::make_root(CapType type, PhysAddr base,
                                 std::uint64_t size) {
  CapNode* n = alloc_node();
  n->type = type;
  n->base = base;
  n->size = size;
  roots_.push_back(n);
  return n;
}

CapNode* DerivationDb::add_child(CapNode* parent, CapType type, PhysAddr base,
                                 std::uint64_t size, Rights rights) {
  CapNode* n = alloc_node();
  n->type = type;
  n->base = base;
  n->size = size;
  n->rights = rights;
  n->parent = parent;
  parent->children.push_back(n);
  return n;
}

CapNode* DerivationDb::add_copy(CapNode* src, Rights rights) {
  CapNode* n = alloc_node();
  n->type = src->type;
  n->base = src->base;
  n->size = src->size;
  n->rights = rights;
  n->parent = src->parent;
  n->cnode = src->cnode;  // copies of a CNode share the slot storage
  if (src->parent != nullptr) {
    src->parent->children.push_back(n);
  } else {
    roots_.push_back(n);
  }
  return n;
}

void DerivationDb::remove(CapNode* node) {
  auto unlink = [](std::vector<CapNode*>& v, CapNode* n) {
    v.erase(std::remove(v.begin(), v.end(), n), v.end());
  };
  // Children survive; splice them up one level.
  for (CapNode* c : node->children) {
    c->parent = node->parent;
    if (node->parent != nullptr) {
      node->parent->children.push_back(c);
    } else {
      roots_.push_back(c);
    }
  }
  node->children.clear();
  if (node->parent != nullptr) {
    unlink(node->parent->children, node);
  } else {
    unlink(roots_, node);
  }
  arena_.erase(node);
}

std::vector<CapNode*> DerivationDb::copies_of(const CapNode* node) const {
  std::vector<CapNode*> out;
  const auto& siblings =
      node->parent != nullptr ? node->parent->children : roots_;
  for (CapNode* s : siblings) {
    if (s != node && s->type == node->type && s->base == node->base &&
        s->size == node->size) {
      out.push_back(s);
    }
  }
  return out;
}

bool DerivationDb::has_copy(const CapNode* node) const {
  return !copies_of(node).empty();
}

namespace {

// Descendants stay inside their ancestor's range, so an overlapping
// descendant implies an overlapping direct child.
bool any_overlap(const CapNode* n, PhysAddr lo, PhysAddr hi) {
  for (const CapNode* c : n->children) {
    if (c->overlaps(lo, hi)) return true;
  }
  return false;
}

}  // namespace

bool DerivationDb::subtree_overlaps(const CapNode* node, PhysAddr lo,
                                    PhysAddr hi) const {
  if (any_overlap(node, lo, hi)) return true;
  for (const CapNode* c : copies_of(node)) {
    if (any_overlap(c, lo, hi)) return true;
  }
  return false;
}

void DerivationDb::collect_descendants(CapNode* node,
                                       std::vector<CapNode*>& out) const {
  for (CapNode* c : node->children) {
    out.push_back(c);
    collect_descendants(c, out);
  }
}

void DerivationDb::for_each(
    const std::function<void(const CapNode&)>& fn) const {
  std::function<void(const CapNode*)> rec = [&](const CapNode* n) {
    fn(*n);
    for (const CapNode* c : n->children) rec(c);
  };
  for (const CapNode* r : roots_) rec(r);
}

void DerivationDb::for_each_mut(const std::function<void(CapNode&)>& fn) {
  std::function<void(CapNode*)> rec = [&](CapNode* n) {
    fn(*n);
    for (CapNode* c : std::vector<CapNode*>(n->children)) rec(c);
  };
  for (CapNode* r : std::vector<CapNode*>(roots_)) rec(r);
}

bool DerivationDb::check_partition() const {
  bool ok = true;
  std::function<void(const CapNode*)> rec = [&](const CapNode* n) {
    for (size_t i = 0; i < n->children.size() && ok; ++i) {
      const CapNode* a = n->children[i];
      if (a->base < n->base || a->end() > n->end()) {
        ok = false;
        return;
      }
      for (size_t j = i + 1; j < n->children.size(); ++j) {
        const CapNode* b = n->children[j];
        const bool copies = a->type == b->type && a->base == b->base &&
                            a->size == b->size;
        if (!copies && a->overlaps(b->base, b->end())) {
          ok = false;
          return;
        }
      }
    }
    for (const CapNode* c : n->children) {
      if (!ok) return;
      rec(c);
    }
  };
  for (const CapNode* r : roots_) rec(r);
  return ok;
}

bool DerivationDb::check_type_exclusion() const {
  // No physical byte may be covered by both a Frame capability and a
  // CNode or page-table capability.
  std::vector<const CapNode*> frames;
  std::vector<const CapNode*> structural;
  for_each([&](const CapNode& n) {
    if (n.type == CapType::Frame) frames.push_back(&n);
    if (n.type == CapType::CNode || is_table_type(n.type)) {
      structural.push_back(&n);
    }
  });
  for (const CapNode* f : frames) {
    for (const CapNode* s : structural) {
      if (f->overlaps(s->base, s->end())) return false;
    }
  }
  return true;
}

namespace {

struct HandlePath {
  unsigned depth = 0;
  std::uint8_t slot[kMaxHandleDepth] = {};
};

bool decode(CapHandle h, HandlePath* out) {
  const unsigned depth = h >> 24;
  if (depth == 0 || depth > kMaxHandleDepth) return false;
  out->depth = depth;
  out->slot[0] = static_cast<std::uint8_t>(h >> 16);
  out->slot[1] = static_cast<std::uint8_t>(h >> 8);
  out->slot[2] = static_cast<std::uint8_t>(h);
  for (unsigned i = depth; i < kMaxHandleDepth; ++i) {
    if (out->slot[i] != 0) return false;
  }
  return true;
}

CapHandle encode(unsigned depth, const std::uint8_t* slot) {
  CapHandle h = depth << 24;
  h |= static_cast<CapHandle>(slot[0]) << 16;
  h |= static_cast<CapHandle>(slot[1]) << 8;
  h |= static_cast<CapHandle>(slot[2]);
  return h;
}

// Handles one level below `h`, i.e. h's path extended by one slot byte.
CapHandle child_handle(CapHandle h, unsigned slot) {
  HandlePath p;
  [[maybe_unused]] const bool ok = decode(h, &p);
  assert(ok && p.depth < kMaxHandleDepth);
  p.slot[p.depth] = static_cast<std::uint8_t>(slot);
  return encode(p.depth + 1, p.slot);
}

bool path_below(CapHandle h, CapHandle prefix) {
  const unsigned hd = h >> 24;
  const unsigned pd = prefix >> 24;
  if (pd == 0 || pd >= kMaxHandleDepth || hd <= pd) return false;
  const unsigned shift = 32 - 8 * pd;  // keep the first pd slot bytes
  return ((h << 8) >> shift) == ((prefix << 8) >> shift);
}

}  // namespace

CapSpace::CapSpace() : root_(std::make_shared<CNodeObject>()) {
  std::uint8_t path[kMaxHandleDepth] = {};
  for (unsigned s = 0; s < kCNodeSlots; ++s) {
    path[0] = static_cast<std::uint8_t>(s);
    free_handles_.insert(encode(1, path));
  }
}

Result<CapNode*> CapSpace::resolve(CapHandle h) const {
  HandlePath p;
  if (!decode(h, &p)) return Errc::LookupFailed;
  const CNodeObject* cur = root_.get();
  for (unsigned i = 0; i + 1 < p.depth; ++i) {
    CapNode* step = cur->slots[p.slot[i]];
    if (step == nullptr || step->type != CapType::CNode ||
        step->cnode == nullptr) {
      return Errc::LookupFailed;
    }
    cur = step->cnode.get();
  }
  CapNode* n = cur->slots[p.slot[p.depth - 1]];
  if (n == nullptr) return Errc::LookupFailed;
  return n;
}

Result<CapHandle> CapSpace::insert(CapNode* node) {
  while (!free_handles_.empty()) {
    const CapHandle h = *free_handles_.begin();
    free_handles_.erase(free_handles_.begin());
    HandlePath p;
    if (!decode(h, &p)) continue;
    // Walk to the holding CNode; stale handles under dead paths are dropped.
    CNodeObject* cur = root_.get();
    bool broken = false;
    for (unsigned i = 0; i + 1 < p.depth; ++i) {
      CapNode* step = cur->slots[p.slot[i]];
      if (step == nullptr || step->type != CapType::CNode ||
          step->cnode == nullptr) {
        broken = true;
        break;
      }
      cur = step->cnode.get();
    }
    if (broken) continue;
    const unsigned slot = p.slot[p.depth - 1];
    if (cur->slots[slot] != nullptr) continue;  // occupied via an alias path
    cur->slots[slot] = node;
    ++cur->used;
    node->holder = cur;
    node->slot = slot;
    node->space = this;
    node->handle = h;
    if (node->type == CapType::CNode && node->cnode != nullptr &&
        p.depth < kMaxHandleDepth) {
      for (unsigned s = 0; s < kCNodeSlots; ++s) {
        if (node->cnode->slots[s] == nullptr) {
          free_handles_.insert(child_handle(h, s));
        }
      }
    }
    return h;
  }
  return Errc::SlotExhausted;
}

void CapSpace::drop_handles_below(CapHandle prefix) {
  for (auto it = free_handles_.begin(); it != free_handles_.end();) {
    if (path_below(*it, prefix)) {
      it = free_handles_.erase(it);
    } else {
      ++it;
    }
  }
}

void CapSpace::detach(CapNode* node) {
  if (node->holder != nullptr) {
    assert(node->holder->slots[node->slot] == node);
    node->holder->slots[node->slot] = nullptr;
    --node->holder->used;
    if (node->handle != 0) {
      if (node->type == CapType::CNode) drop_handles_below(node->handle);
      free_handles_.insert(node->handle);
    }
  }
  node->holder = nullptr;
  node->space = nullptr;
  node->handle = 0;
}

std::vector<CapNode*> CapSpace::reachable() const {
  std::vector<CapNode*> out;
  std::function<void(const CNodeObject*, unsigned)> rec =
      [&](const CNodeObject* obj, unsigned depth) {
        for (unsigned i = 0; i < kCNodeSlots; ++i) {
          CapNode* n = obj->slots[i];
          if (n == nullptr) continue;
          out.push_back(n);
          if (depth < kMaxHandleDepth && n->type == CapType::CNode &&
              n->cnode != nullptr) {
            rec(n->cnode.get(), depth + 1);
          }
        }
      };
  rec(root_.get(), 1);
  return out;
}

}  // namespace cichlid
