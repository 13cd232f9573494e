#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "cichlid/runtime.hpp"

namespace cichlid {

// Paged-out page images keyed by (region id, page index). Serializable to
// the CCLDSTOR file format (docs/store-format.md).
class BackingStore {
 public:
  explicit BackingStore(std::uint64_t page_bytes, std::uint64_t max_pages = 0)
      : page_bytes_(page_bytes), max_pages_(max_pages) {}

  std::uint64_t page_bytes() const { return page_bytes_; }

  Result<void> write_page(std::uint64_t region_id, std::uint64_t index,
                          std::span<const std::byte> data);
  bool has_page(std::uint64_t region_id, std::uint64_t index) const;
  Result<void> read_page(std::uint64_t region_id, std::uint64_t index,
                         std::span<std::byte> out) const;

  std::uint64_t writes() const { return writes_; }
  std::uint64_t reads() const { return reads_; }
  std::uint64_t stored_pages() const { return pages_.size(); }

  Result<void> save(const std::string& path) const;
  static Result<BackingStore> load(const std::string& path);

 private:
  std::uint64_t page_bytes_;
  std::uint64_t max_pages_;
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::vector<std::byte>>
      pages_;
  std::uint64_t writes_ = 0;
  mutable std::uint64_t reads_ = 0;
};

// Demand pager for one region: a fixed pool of resident frames, FIFO
// victim selection, and dirty-bit-driven write-back. Clean victims are
// dropped without touching the store.
class Pager {
 public:
  static Result<std::unique_ptr<Pager>> attach(VSpace& vs, VRegion& r,
                                               unsigned resident_frames,
                                               BackingStore& store);
  ~Pager();

  bool handle_fault(const Fault& f);
  Result<void> add_frames(unsigned count);

  unsigned resident_limit() const { return limit_; }
  std::uint64_t resident_now() const { return resident_.size(); }
  std::uint64_t faults() const { return faults_; }
  std::uint64_t evictions() const { return evictions_; }
  std::uint64_t loads() const { return loads_; }
  std::uint64_t zero_fills() const { return zero_fills_; }

 private:
  Pager() = default;
  Result<void> page_in(std::uint64_t index);
  Result<void> evict_one();

  VSpace* vs_ = nullptr;
  VRegion* region_ = nullptr;
  BackingStore* store_ = nullptr;
  unsigned limit_ = 0;

  struct PoolFrame {
    CapHandle frame = 0;  // the backing frame capability
    CapHandle copy = 0;   // mapping copy, reused across page-ins
    PhysAddr base = 0;
  };
  std::vector<PoolFrame> pool_;
  std::vector<unsigned> free_frames_;
  std::map<std::uint64_t, unsigned> resident_;  // page index -> pool slot
  std::deque<std::uint64_t> fifo_;
  std::uint64_t faults_ = 0;
  std::uint64_t evictions_ = 0;
  std::uint64_t loads_ = 0;
  std::uint64_t zero_fills_ = 0;
};

}  // namespace cichlid
