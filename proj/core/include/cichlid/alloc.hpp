#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "cichlid/kernel.hpp"
#include "cichlid/machine.hpp"

namespace cichlid {

struct MemAttr {
  unsigned node = 0;
  MemKind kind = MemKind::Dram;
  std::optional<std::vector<unsigned>> color_set;  // 4 KiB frame colors
};

// Cache-color arithmetic: color(frame) = (base / page) mod num_colors.
struct ColorGeometry {
  std::uint64_t cache_bytes = 0;
  unsigned assoc = 1;
  std::uint64_t page_bytes = kPage4K;

  unsigned num_colors() const {
    const auto c = cache_bytes / (static_cast<std::uint64_t>(assoc) * page_bytes);
    return c == 0 ? 1 : static_cast<unsigned>(c);
  }
  unsigned color_of(PhysAddr frame_base) const {
    return static_cast<unsigned>((frame_base / page_bytes) % num_colors());
  }
  static ColorGeometry from(const CacheGeometry& g) {
    return {g.total_bytes, g.assoc, kPage4K};
  }
};

// Buddy allocator over one memory node's span, realized as Untyped splits
// in the derivation tree: a free block is an Untyped leaf, allocation
// retypes it, and coalescing revokes the parent Untyped.
class NodeAllocator {
 public:
  NodeAllocator(System& sys, Process& service, CapHandle node_untyped,
                const MemNode& span);

  // Returns a RAM (or Frame) capability in the requester's space. With a
  // color set, every 4 KiB sub-frame's color must be in the set.
  Result<CapHandle> alloc(Process& requester, std::uint64_t size,
                          std::uint64_t align, CapType as = CapType::Frame,
                          const std::vector<bool>* colors = nullptr,
                          const ColorGeometry* geom = nullptr);
  Result<void> release(Process& requester, CapHandle h);

  std::uint64_t free_bytes() const { return free_bytes_; }
  std::uint64_t allocated_bytes() const { return span_.bytes - free_bytes_; }
  const MemNode& span() const { return span_; }

 private:
  unsigned order_of(std::uint64_t size) const;
  std::uint64_t order_bytes(unsigned order) const {
    return kPage4K << order;
  }
  Result<CapHandle> untyped_for(PhysAddr base, unsigned order);
  Result<void> carve(PhysAddr block, unsigned block_order, PhysAddr want,
                     unsigned want_order);
  void coalesce(PhysAddr base, unsigned order);
  Result<void> grow_service_slots();

  System* sys_;
  Process* service_;
  MemNode span_;
  unsigned max_order_ = 0;
  std::uint64_t free_bytes_ = 0;
  std::vector<std::set<PhysAddr>> free_;  // per order, block bases
  std::map<std::pair<PhysAddr, unsigned>, CapHandle> untyped_;
  struct AllocInfo {
    unsigned order;
    CapHandle ram;  // intermediate RAM handle when a Frame was returned
  };
  std::map<PhysAddr, AllocInfo> live_;
};

// Attribute-routed allocation: one strict buddy allocator per node, plus a
// best-effort layer that walks other nodes in distance order.
class AllocService {
 public:
  // Splits the boot Untyped into per-node regions, each owned by its own
  // allocator process.
  static Result<std::unique_ptr<AllocService>> create(System& sys,
                                                      Process& boot_proc,
                                                      CapHandle root_untyped);

  Result<CapHandle> alloc(Process& requester, const MemAttr& attrs,
                          std::uint64_t size, std::uint64_t align = 0,
                          CapType as = CapType::Frame);
  Result<CapHandle> alloc_best_effort(Process& requester,
                                      unsigned preferred_node,
                                      std::uint64_t size,
                                      std::uint64_t align = 0,
                                      CapType as = CapType::Frame);
  Result<void> release(Process& requester, CapHandle h);

  NodeAllocator& node(unsigned i) { return *nodes_[i]; }
  std::size_t num_nodes() const { return nodes_.size(); }
  const ColorGeometry& colors() const { return geom_; }

 private:
  explicit AllocService(System& sys) : sys_(&sys) {}

  System* sys_;
  ColorGeometry geom_;
  std::vector<std::unique_ptr<NodeAllocator>> nodes_;
};

}  // namespace cichlid
