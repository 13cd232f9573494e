#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "cichlid/types.hpp"

namespace cichlid {

// Flat byte-addressable physical memory image. Backed by an anonymous
// MAP_NORESERVE mapping so multi-GiB machines only consume host RAM for
// pages actually touched. All page tables live inside this image.
class PhysMem {
 public:
  explicit PhysMem(std::uint64_t bytes);
  ~PhysMem();

  PhysMem(PhysMem&& other) noexcept;
  PhysMem& operator=(PhysMem&& other) noexcept;
  PhysMem(const PhysMem&) = delete;
  PhysMem& operator=(const PhysMem&) = delete;

  std::uint64_t size() const { return size_; }
  bool contains(PhysAddr pa, std::uint64_t len) const {
    return pa < size_ && len <= size_ - pa;
  }

  std::uint64_t read_u64(PhysAddr pa) const;
  void write_u64(PhysAddr pa, std::uint64_t value);

  std::uint64_t read_uint(PhysAddr pa, unsigned width) const;
  void write_uint(PhysAddr pa, std::uint64_t value, unsigned width);

  void read_bytes(PhysAddr pa, std::span<std::byte> out) const;
  void write_bytes(PhysAddr pa, std::span<const std::byte> in);
  void fill(PhysAddr pa, std::uint64_t len, std::uint8_t byte);

  std::uint8_t* raw() { return base_; }
  const std::uint8_t* raw() const { return base_; }

 private:
  std::uint8_t* base_ = nullptr;
  std::uint64_t size_ = 0;
};

}  // namespace cichlid
