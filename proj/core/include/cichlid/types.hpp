#pragma once

#include <cstdint>
#include <string>

namespace cichlid {

using PhysAddr = std::uint64_t;
using VirtAddr = std::uint64_t;

inline constexpr std::uint64_t kKiB = 1024ull;
inline constexpr std::uint64_t kMiB = 1024ull * kKiB;
inline constexpr std::uint64_t kGiB = 1024ull * kMiB;

inline constexpr std::uint64_t kPage4K = 4 * kKiB;
inline constexpr std::uint64_t kPage2M = 2 * kMiB;
inline constexpr std::uint64_t kPage1G = 1 * kGiB;

inline constexpr unsigned kPtesPerTable = 512;

enum class PageSize : std::uint8_t { k4K, k2M, k1G };

constexpr std::uint64_t bytes_of(PageSize ps) {
  switch (ps) {
    case PageSize::k4K: return kPage4K;
    case PageSize::k2M: return kPage2M;
    case PageSize::k1G: return kPage1G;
  }
  return 0;
}

constexpr unsigned shift_of(PageSize ps) {
  switch (ps) {
    case PageSize::k4K: return 12;
    case PageSize::k2M: return 21;
    case PageSize::k1G: return 30;
  }
  return 0;
}

// PTE reads needed by a walk that terminates at this leaf size.
constexpr unsigned walk_depth_of(PageSize ps) {
  switch (ps) {
    case PageSize::k4K: return 4;
    case PageSize::k2M: return 3;
    case PageSize::k1G: return 2;
  }
  return 0;
}

const char* to_string(PageSize ps);

constexpr bool is_pow2(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) {
  return (v + a - 1) & ~(a - 1);
}

constexpr std::uint64_t align_down(std::uint64_t v, std::uint64_t a) {
  return v & ~(a - 1);
}

// 48-bit canonical form: bits 63..47 all equal.
constexpr bool is_canonical(VirtAddr va) {
  const auto hi = va >> 47;
  return hi == 0 || hi == 0x1ffff;
}

struct Rights {
  bool read = true;
  bool write = true;

  static constexpr Rights rw() { return {true, true}; }
  static constexpr Rights ro() { return {true, false}; }

  constexpr bool subset_of(Rights other) const {
    return (!read || other.read) && (!write || other.write);
  }
  constexpr bool operator==(const Rights&) const = default;
};

enum class Errc : std::uint8_t {
  Ok = 0,
  InvalidSize,
  DisallowedTransition,
  HasConflictingDescendants,
  SlotExhausted,
  LookupFailed,
  NotEmpty,
  RuleViolation,
  AlreadyMapped,
  EntryOccupied,
  RightsExceeded,
  InvalidEntry,
  NotMapped,
  WrongType,
  InvalidRoot,
  OutOfMemory,
  InvalidAttr,
  StillMapped,
  HasDescendants,
  OutOfVA,
  UnknownRegion,
  NoFrames,
  StoreFull,
  UnhandledFault,
  DoubleFault,
  ProcessTerminated,
  InvalidArgument,
};

const char* to_string(Errc e);

enum class FaultCause : std::uint8_t {
  NotPresent,
  WriteToReadonly,
  NoTranslationRoot,
};

const char* to_string(FaultCause c);

enum class AccessKind : std::uint8_t { Read, Write };

struct Fault {
  VirtAddr va = 0;
  AccessKind kind = AccessKind::Read;
  FaultCause cause = FaultCause::NotPresent;
};

}  // namespace cichlid
