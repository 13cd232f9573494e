#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "cichlid/alloc.hpp"
#include "cichlid/kernel.hpp"

namespace cichlid {

// An ordered collection of frame capabilities backing one or more virtual
// regions. Pieces may be heterogeneous power-of-two sizes.
struct MemObj {
  struct Piece {
    CapHandle frame = 0;
    std::uint64_t size = 0;
  };
  std::vector<Piece> pieces;
  std::uint64_t total = 0;

  void add(CapHandle frame, std::uint64_t size) {
    pieces.push_back({frame, size});
    total += size;
  }
};

// Allocates `bytes` of node-local frames of uniform `frame_size`.
Result<MemObj> make_memobj(System& sys, AllocService& alloc, Process& proc,
                           unsigned node, std::uint64_t bytes,
                           std::uint64_t frame_size);

class Pager;

struct VRegion {
  VirtAddr base = 0;
  std::uint64_t length = 0;
  PageSize page_size = PageSize::k4K;  // requested granularity
  PageSize leaf_size = PageSize::k4K;  // granularity actually installed
  Rights flags = Rights::rw();
  MemObj obj;  // the backing object (frame handles still owned by caller)
  // This region's own mapping copies, one per mapped piece, map order.
  std::vector<CapHandle> use_copies;
  Pager* pager = nullptr;

  std::uint64_t pages() const { return length / bytes_of(leaf_size); }
};

struct PageStatus {
  std::vector<bool> accessed;
  std::vector<bool> dirty;
};

// User-level view of one process' virtual address space: the vroot, a
// shadow tree of the table capabilities created through this library, a
// free-VA list, and the lazily built read-only self-mapping of page tables
// used for status-bit reads.
class VSpace {
 public:
  static Result<std::unique_ptr<VSpace>> create(System& sys,
                                                AllocService& alloc,
                                                Process& proc,
                                                unsigned table_node = 0);

  Result<void> install(int core = 0);
  CapHandle vroot() const { return vroot_; }
  Process& proc() { return *proc_; }
  System& sys() { return *sys_; }

  Result<VRegion*> map(const MemObj& obj, std::optional<VirtAddr> va,
                       PageSize page_size, Rights flags);
  Result<void> protect(VRegion& r, Rights flags);
  Result<void> unmap(VRegion& r);
  VRegion* region_at(VirtAddr va);

  // Gathers accessed/dirty bits for every page of r through the read-only
  // table self-mapping; plain loads, no kernel invocations after the first
  // call has set the mapping up.
  Result<PageStatus> read_status_bits(VRegion& r);
  Result<std::pair<bool, bool>> page_status(VRegion& r, std::uint64_t page);
  Result<void> clear_status_bits(VRegion& r);

  // Routes faults to per-region hooks and pagers; installed as the
  // process fault handler.
  void install_handler();
  void set_region_hook(VRegion& r, std::function<bool(const Fault&)> hook);
  bool dispatch_fault(const Fault& f);

  Result<VirtAddr> reserve_va(std::uint64_t len, std::uint64_t align);
  void release_va(VirtAddr base, std::uint64_t len);

  // Table capability covering va at level (3 = PDPT, 2 = PD, 1 = PT),
  // mounting new tables on demand. Returns (handle, physical base).
  Result<std::pair<CapHandle, PhysAddr>> ensure_table(VirtAddr va,
                                                      unsigned level);

  // Library bookkeeping vs. page-table ground truth (test oracle).
  bool shadow_matches_tables() const;

  // Batched unmap/map of one leaf entry range (pager path).
  Result<void> unmap_leaf(VRegion& r, std::uint64_t page_index);
  Result<void> map_leaf(VRegion& r, std::uint64_t page_index, CapHandle cap,
                        Rights flags);

 private:
  VSpace() = default;

  Result<CapHandle> alloc_table(CapType type);
  Result<void> ensure_status_space();
  Result<VirtAddr> status_va_of_table(CapHandle table, PhysAddr table_base);
  // Walk helpers over the shadow tree.
  struct TableRef {
    CapHandle handle = 0;
    PhysAddr base = 0;
  };

  System* sys_ = nullptr;
  AllocService* alloc_ = nullptr;
  Process* proc_ = nullptr;
  unsigned table_node_ = 0;
  CapHandle vroot_ = 0;
  PhysAddr vroot_base_ = 0;

  // Shadow tree keyed by the VA prefix each table covers.
  // index 0: PDPT (512 GiB spans), 1: PD (1 GiB), 2: PT (2 MiB).
  std::map<VirtAddr, TableRef> tables_[3];

  std::map<VirtAddr, std::uint64_t> free_va_;
  std::map<VirtAddr, std::unique_ptr<VRegion>> regions_;
  std::map<VirtAddr, std::function<bool(const Fault&)>> hooks_;

  // Read-only self-mapping of table pages: one PT holds status mounts.
  std::vector<TableRef> status_pts_;
  VirtAddr status_base_ = 0;
  unsigned status_used_ = 0;
  std::map<PhysAddr, VirtAddr> status_va_;  // table page -> mapped VA
};

// First-fit allocator over a growing 4 KiB-page heap region; the classic
// sbrk/malloc veneer for memory where performance is not critical.
class Heap {
 public:
  Heap(VSpace& vs, AllocService& alloc, unsigned node = 0);

  Result<VirtAddr> morecore(std::uint64_t bytes);
  Result<VirtAddr> malloc(std::uint64_t bytes);
  Result<void> free(VirtAddr va);

  VirtAddr brk() const { return brk_; }
  std::uint64_t mapped_bytes() const { return mapped_; }

 private:
  VSpace* vs_;
  AllocService* alloc_;
  unsigned node_;
  VirtAddr heap_base_ = 0;
  std::uint64_t reserved_ = 0;
  VirtAddr brk_ = 0;
  std::uint64_t mapped_ = 0;
  std::map<VirtAddr, std::uint64_t> free_blocks_;
  std::map<VirtAddr, std::uint64_t> used_;
};

// The conventional start-up image a parent constructs for a new process:
// text/data/bss placeholders plus a heap seed.
struct StandardImage {
  std::unique_ptr<VSpace> vspace;
  VRegion* text = nullptr;
  VRegion* data = nullptr;
  VRegion* bss = nullptr;
  std::unique_ptr<Heap> heap;
};

Result<StandardImage> setup_standard_vspace(System& sys, AllocService& alloc,
                                            Process& proc, int core = 0);

}  // namespace cichlid
