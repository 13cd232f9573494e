#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cichlid/result.hpp"
#include "cichlid/types.hpp"

namespace cichlid {

// Per-page-size TLB geometry.
struct TlbGeometry {
  unsigned entries = 0;
  unsigned assoc = 1;

  bool valid() const {
    return entries > 0 && assoc > 0 && entries % assoc == 0;
  }
};

struct TlbConfig {
  TlbGeometry l1_4k;
  TlbGeometry l1_2m;
  TlbGeometry l1_1g;
  TlbGeometry l2;           // unified second level; entries == 0 disables it
  bool l2_all_sizes = false;  // false: L2 caches 4 KiB translations only
  unsigned flush_threshold = 1;  // max VAs flushed selectively by default policy
};

struct CacheGeometry {
  std::uint64_t total_bytes = 0;
  unsigned assoc = 1;
  unsigned line_bytes = 64;

  std::uint64_t sets() const {
    return total_bytes / (static_cast<std::uint64_t>(assoc) * line_bytes);
  }
  // Page colors induced on 4 KiB frames by the set partitioning.
  unsigned num_colors(std::uint64_t page_bytes = kPage4K) const {
    const auto c = total_bytes / (static_cast<std::uint64_t>(assoc) * page_bytes);
    return c == 0 ? 1 : static_cast<unsigned>(c);
  }
};

enum class MemKind : std::uint8_t { Dram, Persistent, Device };

const char* to_string(MemKind k);

struct MemNode {
  PhysAddr base = 0;
  std::uint64_t bytes = 0;
  MemKind kind = MemKind::Dram;
};

struct MachineModel {
  std::string name;
  TlbConfig tlb;
  CacheGeometry l3;
  std::vector<MemNode> nodes;
  std::vector<unsigned> distance;  // row-major nodes x nodes

  std::uint64_t total_phys() const {
    std::uint64_t t = 0;
    for (const auto& n : nodes) t += n.bytes;
    return t;
  }
  unsigned dist(unsigned from, unsigned to) const {
    return distance[from * nodes.size() + to];
  }

  // Resizes node spans to total/nodes each, keeping kinds and distances.
  Result<void> scale_memory(std::uint64_t total_bytes);

  static MachineModel ivybridge();
  static MachineModel opteron6378();
};

Result<MachineModel> load_machine_file(const std::string& path);

}  // namespace cichlid
