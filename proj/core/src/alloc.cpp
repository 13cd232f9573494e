#include "cichlid/alloc.hpp"

#include <algorithm>
#include <cassert>
#include <numeric>

namespace cichlid {

NodeAllocator::NodeAllocator(System& sys, Process& service,
                             CapHandle node_untyped, const MemNode& span)
    : sys_(&sys), service_(&service), span_(span) {
  assert(is_pow2(span.bytes));
  max_order_ = 0;
  while (order_bytes(max_order_) < span.bytes) ++max_order_;
  free_.resize(max_order_ + 1);
  free_[max_order_].insert(span.base);
  free_bytes_ = span.bytes;
  untyped_[{span.base, max_order_}] = node_untyped;
}

unsigned NodeAllocator::order_of(std::uint64_t size) const {
  unsigned o = 0;
  while (order_bytes(o) < size) ++o;
  return o;
}

Result<void> NodeAllocator::grow_service_slots() {
  // The service space stores one handle per live Untyped split node; top
  // it up from this node's own memory before it runs dry. A split needs a
  // few slots, so the refill threshold leaves room for the splits the
  // refill itself performs.
  while (service_->space.free_slot_count() < 48) {
    unsigned ord = 0;
    while (ord <= max_order_ && free_[ord].empty()) ++ord;
    if (ord > max_order_) return Errc::OutOfMemory;
    PhysAddr block = *free_[ord].begin();
    auto c = carve(block, ord, block, 0);
    if (!c) return c.error();
    auto leaf = untyped_for(block, 0);
    if (!leaf) return leaf.error();
    auto ram = sys_->retype(*service_, *leaf, CapType::Ram, kPage4K, 1);
    if (!ram) return ram.error();
    auto cn = sys_->retype(*service_, ram->front(), CapType::CNode, kPage4K, 1);
    if (!cn) return cn.error();
    free_[0].erase(block);
    free_bytes_ -= kPage4K;
    live_[block] = {0, 0};  // slot storage stays allocated for good
  }
  return {};
}

Result<CapHandle> NodeAllocator::untyped_for(PhysAddr base, unsigned order) {
  auto it = untyped_.find({base, order});
  if (it != untyped_.end()) return it->second;
  return Errc::LookupFailed;
}

// Splits `block` down until an Untyped leaf exactly covering
// [want, want + 2^want_order pages) exists.
Result<void> NodeAllocator::carve(PhysAddr block, unsigned block_order,
                                  PhysAddr want, unsigned want_order) {
  PhysAddr cur = block;
  unsigned ord = block_order;
  while (ord > want_order) {
    auto parent = untyped_for(cur, ord);
    if (!parent) return parent.error();
    const std::uint64_t half = order_bytes(ord - 1);
    if (untyped_.find({cur, ord - 1}) == untyped_.end()) {
      auto halves =
          sys_->retype(*service_, *parent, CapType::Untyped, half, 2);
      if (!halves) return halves.error();
      untyped_[{cur, ord - 1}] = (*halves)[0];
      untyped_[{cur + half, ord - 1}] = (*halves)[1];
    }
    // Bookkeeping mirrors the split: the half not on the path stays free.
    free_[ord].erase(cur);
    const PhysAddr other = want < cur + half ? cur + half : cur;
    free_[ord - 1].insert(other);
    cur = want < cur + half ? cur : cur + half;
    free_[ord - 1].insert(cur);
    --ord;
  }
  return {};
}

Result<CapHandle> NodeAllocator::alloc(Process& requester, std::uint64_t size,
                                       std::uint64_t align, CapType as,
                                       const std::vector<bool>* colors,
                                       const ColorGeometry* geom) {
  if (!is_pow2(size) || size < kPage4K) return Errc::InvalidSize;
  if (align == 0) align = size;
  align = std::max<std::uint64_t>(align, size);
  if (!is_pow2(align)) return Errc::InvalidSize;
  if (as != CapType::Ram && as != CapType::Frame) return Errc::InvalidAttr;

  auto grown = grow_service_slots();
  if (!grown) return grown.error();

  const unsigned want_order = order_of(size);
  const std::uint64_t npages = size / kPage4K;
  auto colors_ok = [&](PhysAddr base) {
    if (colors == nullptr) return true;
    const std::uint64_t pfn0 = base / kPage4K;
    const unsigned nc = geom->num_colors();
    for (std::uint64_t i = 0; i < npages; ++i) {
      if (!(*colors)[(pfn0 + i) % nc]) return false;
    }
    return true;
  };

  for (unsigned ord = want_order; ord <= max_order_; ++ord) {
    for (PhysAddr block : free_[ord]) {
      for (PhysAddr pos = align_up(block, align);
           pos + size <= block + order_bytes(ord); pos += align) {
        if (!colors_ok(pos)) continue;
        auto c = carve(block, ord, pos, want_order);
        if (!c) return c.error();
        auto leaf = untyped_for(pos, want_order);
        if (!leaf) return leaf.error();
        auto ram = sys_->retype(*service_, *leaf, CapType::Ram, size, 1,
                                &requester);
        if (!ram) return ram.error();
        CapHandle out = ram->front();
        CapHandle ram_h = 0;
        if (as == CapType::Frame) {
          ram_h = out;
          auto frame =
              sys_->retype(requester, ram_h, CapType::Frame, size, 1);
          if (!frame) return frame.error();
          out = frame->front();
        }
        free_[want_order].erase(pos);
        free_bytes_ -= size;
        live_[pos] = {want_order, ram_h};
        return out;
      }
    }
  }
  return Errc::OutOfMemory;
}

void NodeAllocator::coalesce(PhysAddr base, unsigned order) {
  while (order < max_order_) {
    const PhysAddr buddy = base ^ order_bytes(order);
    if (free_[order].find(buddy) == free_[order].end()) break;
    const PhysAddr parent_base = std::min(base, buddy);
    auto parent = untyped_.find({parent_base, order + 1});
    if (parent == untyped_.end()) break;
    // Both halves free: undo the split by revoking the parent Untyped.
    auto r = sys_->revoke(*service_, parent->second);
    if (!r) break;
    free_[order].erase(base);
    free_[order].erase(buddy);
    untyped_.erase({base, order});
    untyped_.erase({buddy, order});
    free_[order + 1].insert(parent_base);
    base = parent_base;
    ++order;
  }
}

Result<void> NodeAllocator::release(Process& requester, CapHandle h) {
  auto rn = sys_->inspect(requester, h);
  if (!rn) return Errc::LookupFailed;
  const CapNode* n = *rn;
  if (n->type != CapType::Ram && n->type != CapType::Frame) {
    return Errc::InvalidAttr;
  }
  auto it = live_.find(n->base);
  if (it == live_.end() || order_bytes(it->second.order) != n->size) {
    return Errc::InvalidAttr;
  }
  if (n->mapping.has_value()) return Errc::StillMapped;
  if (!n->children.empty()) return Errc::HasDescendants;
  // Shared blocks must lose their copies (revoke) before coming back.
  if (sys_->db().has_copy(n)) return Errc::HasDescendants;

  const CapHandle ram_h = it->second.ram;
  auto d = sys_->delete_cap(requester, h);
  if (!d) return d;
  if (ram_h != 0 && ram_h != h) {
    auto rram = sys_->inspect(requester, ram_h);
    if (rram && (*rram)->children.empty() && !sys_->db().has_copy(*rram) &&
        !(*rram)->mapping.has_value()) {
      auto d2 = sys_->delete_cap(requester, ram_h);
      if (!d2) return d2;
    } else {
      return Errc::HasDescendants;
    }
  }

  const PhysAddr base = it->first;
  const unsigned order = it->second.order;
  live_.erase(it);
  free_[order].insert(base);
  free_bytes_ += order_bytes(order);
  coalesce(base, order);
  return {};
}

Result<std::unique_ptr<AllocService>> AllocService::create(
    System& sys, Process& boot_proc, CapHandle root_untyped) {
  const MachineModel& m = sys.machine();
  if (m.nodes.empty()) return Errc::InvalidAttr;
  const std::uint64_t per = m.nodes.front().bytes;
  for (const auto& n : m.nodes) {
    if (n.bytes != per || !is_pow2(per)) return Errc::InvalidSize;
  }

  auto svc = std::unique_ptr<AllocService>(new AllocService(sys));
  svc->geom_ = ColorGeometry::from(m.l3);

  if (m.nodes.size() == 1) {
    // The whole span is one node; hand the root Untyped over directly.
    Process& service = sys.create_process();
    auto moved = sys.copy_cap(boot_proc, root_untyped, std::nullopt, &service);
    if (!moved) return moved.error();
    svc->nodes_.push_back(
        std::make_unique<NodeAllocator>(sys, service, *moved, m.nodes[0]));
    return svc;
  }
  // One split carves all node regions at once: slices advance from base 0.
  std::vector<Process*> services;
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    services.push_back(&sys.create_process());
  }
  auto split = sys.retype(boot_proc, root_untyped, CapType::Untyped, per,
                          static_cast<std::uint32_t>(m.nodes.size()));
  if (!split) return split.error();
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    auto moved = sys.copy_cap(boot_proc, (*split)[i], std::nullopt,
                              services[i]);
    if (!moved) return moved.error();
    svc->nodes_.push_back(std::make_unique<NodeAllocator>(
        sys, *services[i], *moved, m.nodes[i]));
  }
  return svc;
}

Result<CapHandle> AllocService::alloc(Process& requester, const MemAttr& attrs,
                                      std::uint64_t size, std::uint64_t align,
                                      CapType as) {
  if (attrs.node >= nodes_.size()) return Errc::InvalidAttr;
  if (sys_->machine().nodes[attrs.node].kind != attrs.kind) {
    return Errc::InvalidAttr;
  }
  std::vector<bool> bitmap;
  const std::vector<bool>* colors = nullptr;
  if (attrs.color_set.has_value()) {
    bitmap.assign(geom_.num_colors(), false);
    for (unsigned c : *attrs.color_set) {
      if (c >= geom_.num_colors()) return Errc::InvalidAttr;
      bitmap[c] = true;
    }
    colors = &bitmap;
  }
  return nodes_[attrs.node]->alloc(requester, size, align, as, colors,
                                   colors != nullptr ? &geom_ : nullptr);
}

Result<CapHandle> AllocService::alloc_best_effort(Process& requester,
                                                  unsigned preferred_node,
                                                  std::uint64_t size,
                                                  std::uint64_t align,
                                                  CapType as) {
  if (preferred_node >= nodes_.size()) return Errc::InvalidAttr;
  std::vector<unsigned> order(nodes_.size());
  std::iota(order.begin(), order.end(), 0u);
  const MachineModel& m = sys_->machine();
  std::stable_sort(order.begin(), order.end(), [&](unsigned a, unsigned b) {
    return m.dist(preferred_node, a) < m.dist(preferred_node, b);
  });
  for (unsigned n : order) {
    auto r = nodes_[n]->alloc(requester, size, align, as);
    if (r) return r;
    if (r.error() != Errc::OutOfMemory) return r;
  }
  return Errc::OutOfMemory;
}

Result<void> AllocService::release(Process& requester, CapHandle h) {
  auto v = sys_->lookup(requester, h);
  if (!v) return Errc::LookupFailed;
  for (auto& n : nodes_) {
    if (v->base >= n->span().base &&
        v->base < n->span().base + n->span().bytes) {
      return n->release(requester, h);
    }
  }
  return Errc::InvalidAttr;
}

}  // namespace cichlid
