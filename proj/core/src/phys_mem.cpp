#include "cichlid/phys_mem.hpp"

#include <sys/mman.h>

#include <cassert>
#include <cstring>
#include <stdexcept>
#include <utility>

namespace cichlid {

PhysMem::PhysMem(std::uint64_t bytes) : size_(bytes) {
  void* p = ::mmap(nullptr, bytes, PROT_READ | PROT_WRITE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) {
    throw std::runtime_error("PhysMem: mmap failed");
  }
  base_ = static_cast<std::uint8_t*>(p);
}

PhysMem::~PhysMem() {
  if (base_ != nullptr) {
    ::munmap(base_, size_);
  }
}

PhysMem::PhysMem(PhysMem&& other) noexcept
    : base_(std::exchange(other.base_, nullptr)),
      size_(std::exchange(other.size_, 0)) {}

PhysMem& PhysMem::operator=(PhysMem&& other) noexcept {
  if (this != &other) {
    if (base_ != nullptr) {
      ::munmap(base_, size_);
    }
    base_ = std::exchange(other.base_, nullptr);
    size_ = std::exchange(other.size_, 0);
  }
  return *this;
}

std::uint64_t PhysMem::read_u64(PhysAddr pa) const {
  assert(contains(pa, 8));
  std::uint64_t v;
  std::memcpy(&v, base_ + pa, 8);
  return v;
}

void PhysMem::write_u64(PhysAddr pa, std::uint64_t value) {
  assert(contains(pa, 8));
  std::memcpy(base_ + pa, &value, 8);
}

std::uint64_t PhysMem::read_uint(PhysAddr pa, unsigned width) const {
  assert(width == 1 || width == 2 || width == 4 || width == 8);
  assert(contains(pa, width));
  std::uint64_t v = 0;
  std::memcpy(&v, base_ + pa, width);
  return v;
}

void PhysMem::write_uint(PhysAddr pa, std::uint64_t value, unsigned width) {
  assert(width == 1 || width == 2 || width == 4 || width == 8);
  assert(contains(pa, width));
  std::memcpy(base_ + pa, &value, width);
}

void PhysMem::read_bytes(PhysAddr pa, std::span<std::byte> out) const {
  assert(contains(pa, out.size()));
  std::memcpy(out.data(), base_ + pa, out.size());
}

void PhysMem::write_bytes(PhysAddr pa, std::span<const std::byte> in) {
  assert(contains(pa, in.size()));
  std::memcpy(base_ + pa, in.data(), in.size());
}

void PhysMem::fill(PhysAddr pa, std::uint64_t len, std::uint8_t byte) {
  assert(contains(pa, len));
  std::memset(base_ + pa, byte, len);
}

}  // namespace cichlid
