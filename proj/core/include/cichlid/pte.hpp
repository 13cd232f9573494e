#pragma once

#include <cstdint>

#include "cichlid/types.hpp"

namespace cichlid {

// x86-64 long-mode page table entry. A non-present entry is all-zero.
struct Pte {
  std::uint64_t raw = 0;

  static constexpr std::uint64_t kPresent = 1ull << 0;
  static constexpr std::uint64_t kWritable = 1ull << 1;
  static constexpr std::uint64_t kUser = 1ull << 2;
  static constexpr std::uint64_t kAccessed = 1ull << 5;
  static constexpr std::uint64_t kDirty = 1ull << 6;
  static constexpr std::uint64_t kPageSize = 1ull << 7;  // PD/PDPT only
  static constexpr std::uint64_t kAddrMask = 0x000ffffffffff000ull;

  bool present() const { return raw & kPresent; }
  bool writable() const { return raw & kWritable; }
  bool user() const { return raw & kUser; }
  bool accessed() const { return raw & kAccessed; }
  bool dirty() const { return raw & kDirty; }
  bool large() const { return raw & kPageSize; }
  PhysAddr addr() const { return raw & kAddrMask; }

  static Pte make(PhysAddr target, bool writable, bool large_page) {
    Pte e;
    e.raw = (target & kAddrMask) | kPresent | kUser |
            (writable ? kWritable : 0) | (large_page ? kPageSize : 0);
    return e;
  }
};

// Index of the entry covering va at a given level (4 = PML4 .. 1 = PT).
constexpr unsigned pt_index(VirtAddr va, unsigned level) {
  return static_cast<unsigned>((va >> (12 + 9 * (level - 1))) & 0x1ff);
}

// Bytes of virtual address space covered by one entry at a given level.
constexpr std::uint64_t level_span(unsigned level) {
  return 1ull << (12 + 9 * (level - 1));
}

}  // namespace cichlid
