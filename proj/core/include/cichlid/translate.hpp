#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "cichlid/machine.hpp"
#include "cichlid/phys_mem.hpp"
#include "cichlid/pte.hpp"
#include "cichlid/types.hpp"

namespace cichlid {

struct Translation {
  PhysAddr pa = 0;          // translated address for the queried va
  PageSize page_size = PageSize::k4K;
  PhysAddr leaf_pte_loc = 0;  // physical location of the leaf entry
  Pte leaf;                   // leaf entry value at walk time
};

using WalkResult = std::variant<Translation, Fault>;

// Pure four-level walk over the memory image. Reads 4/3/2 entries for
// 4 KiB / 2 MiB / 1 GiB leaves; the count is added to *reads when given.
WalkResult walk(const PhysMem& mem, PhysAddr root, VirtAddr va,
                std::uint64_t* reads = nullptr);

enum class FlushMode : std::uint8_t { Full, Selective, DefaultPolicy };

// One simulated core: the walker plus per-page-size TLBs. L1 has one array
// per page size; the optional L2 acts as a victim buffer for entries
// evicted from L1 (4 KiB only unless the machine model says otherwise).
class TranslationUnit {
 public:
  struct Counters {
    std::uint64_t tlb_hits = 0;
    std::uint64_t tlb_misses = 0;
    std::uint64_t walk_memory_reads = 0;
    std::uint64_t faults = 0;
    std::uint64_t full_flushes = 0;
    std::uint64_t selective_flushes = 0;
  };

  TranslationUnit(PhysMem& mem, const TlbConfig& config);

  // Data access through the TLB. On success the accessed bit is set on the
  // leaf entry, plus the dirty bit for writes. A write to a read-only page
  // faults without changing any PTE bits. `width` must not cross a 4 KiB
  // boundary.
  std::variant<std::uint64_t, Fault> access(VirtAddr va, AccessKind kind,
                                            unsigned width,
                                            std::uint64_t write_value = 0,
                                            PhysAddr* pa_out = nullptr);

  // Read-modify-write of one 64-bit word under a single translation.
  template <typename Fn>
  std::variant<std::uint64_t, Fault> rmw64(VirtAddr va, Fn&& fn,
                                           PhysAddr* pa_out = nullptr) {
    auto t = translate(va, AccessKind::Write);
    if (std::holds_alternative<Fault>(t)) return std::get<Fault>(t);
    const auto pa = std::get<PhysAddr>(t);
    if (pa_out != nullptr) *pa_out = pa;
    const std::uint64_t old = mem_->read_u64(pa);
    mem_->write_u64(pa, fn(old));
    return old;
  }

  void flush_full();
  void flush_selective(std::span<const VirtAddr> vas);
  // 'default policy': up to `flush_threshold` addresses selectively,
  // otherwise one full flush.
  void flush_policy(std::span<const VirtAddr> vas);
  // Flush honoring the unit's override mode (used by benchmark drivers).
  void flush_for_mode(std::span<const VirtAddr> vas);

  void set_flush_mode(FlushMode m) { mode_ = m; }
  FlushMode flush_mode() const { return mode_; }
  void set_flush_threshold(unsigned t) { threshold_ = t; }
  unsigned flush_threshold() const { return threshold_; }

  Result<void> set_root(PhysAddr root);
  PhysAddr root() const { return root_; }
  bool has_root() const { return has_root_; }

  const Counters& counters() const { return counters_; }
  Counters& counters() { return counters_; }

  // True if any TLB level currently caches a translation for va.
  bool cached(VirtAddr va) const;

 private:
  struct Entry {
    bool valid = false;
    std::uint64_t vpn = 0;
    PageSize size = PageSize::k4K;
    PhysAddr frame = 0;
    PhysAddr leaf_pte_loc = 0;
    bool writable = false;
    bool dirty = false;
    std::uint64_t tick = 0;
  };

  struct Array {
    TlbGeometry geom;
    std::vector<Entry> slots;  // set-major

    void reset(const TlbGeometry& g);
    unsigned sets() const { return geom.entries / geom.assoc; }
    Entry* find(VirtAddr va, PageSize ps);
    // Insert, returning the evicted entry if a valid one was displaced.
    std::optional<Entry> insert(const Entry& e);
    void invalidate(VirtAddr va);
    void clear();
    bool enabled() const { return geom.entries > 0; }
  };

  std::variant<PhysAddr, Fault> translate(VirtAddr va, AccessKind kind);
  Entry* lookup(VirtAddr va);
  void install(const Entry& e);

  PhysMem* mem_;
  TlbConfig config_;
  Array l1_[3];  // indexed by PageSize
  Array l2_;
  PhysAddr root_ = 0;
  bool has_root_ = false;
  std::uint64_t tick_ = 0;
  Counters counters_;
  FlushMode mode_ = FlushMode::DefaultPolicy;
  unsigned threshold_ = 1;
};

}  // namespace cichlid
