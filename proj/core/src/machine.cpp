#include "cichlid/machine.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace cichlid {

const char* to_string(MemKind k) {
  switch (k) {
    case MemKind::Dram: return "dram";
    case MemKind::Persistent: return "persistent";
    case MemKind::Device: return "device";
  }
  return "?";
}

Result<void> MachineModel::scale_memory(std::uint64_t total_bytes) {
  if (nodes.empty()) return Errc::InvalidAttr;
  const std::uint64_t per = total_bytes / nodes.size();
  if (!is_pow2(per) || per < kMiB) return Errc::InvalidSize;
  PhysAddr base = 0;
  for (auto& n : nodes) {
    n.base = base;
    n.bytes = per;
    base += per;
  }
  return {};
}

MachineModel MachineModel::ivybridge() {
  MachineModel m;
  m.name = "ivybridge";
  m.tlb.l1_4k = {64, 4};
  m.tlb.l1_2m = {32, 4};
  m.tlb.l1_1g = {4, 4};
  m.tlb.l2 = {512, 4};
  m.tlb.l2_all_sizes = false;
  m.tlb.flush_threshold = 1;
  m.l3 = {25 * kMiB, 20, 64};
  m.nodes = {{0, 256 * kMiB, MemKind::Dram}, {256 * kMiB, 256 * kMiB, MemKind::Dram}};
  m.distance = {10, 20, 20, 10};
  return m;
}

MachineModel MachineModel::opteron6378() {
  MachineModel m;
  m.name = "opteron6378";
  m.tlb.l1_4k = {64, 64};
  m.tlb.l1_2m = {64, 64};
  m.tlb.l1_1g = {64, 64};
  m.tlb.l2 = {1024, 8};
  m.tlb.l2_all_sizes = true;
  m.tlb.flush_threshold = 1;
  m.l3 = {12 * kMiB, 16, 64};
  m.nodes.clear();
  for (unsigned i = 0; i < 8; ++i) {
    m.nodes.push_back({i * 64 * kMiB, 64 * kMiB, MemKind::Dram});
  }
  m.distance.assign(64, 20);
  for (unsigned i = 0; i < 8; ++i) m.distance[i * 8 + i] = 10;
  // Paired nodes share a socket.
  for (unsigned i = 0; i < 8; i += 2) {
    m.distance[i * 8 + i + 1] = 12;
    m.distance[(i + 1) * 8 + i] = 12;
  }
  return m;
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

Result<std::uint64_t> parse_u64(const std::string& s) {
  std::uint64_t mult = 1;
  std::string body = s;
  if (!body.empty()) {
    switch (body.back()) {
      case 'K': case 'k': mult = kKiB; body.pop_back(); break;
      case 'M': case 'm': mult = kMiB; body.pop_back(); break;
      case 'G': case 'g': mult = kGiB; body.pop_back(); break;
      default: break;
    }
  }
  try {
    size_t pos = 0;
    const std::uint64_t v = std::stoull(body, &pos, 0);
    if (pos != body.size()) return Errc::InvalidArgument;
    return v * mult;
  } catch (...) {
    return Errc::InvalidArgument;
  }
}

}  // namespace

Result<MachineModel> load_machine_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) return Errc::InvalidArgument;

  std::map<std::string, std::string> kv;
  std::string section;
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) return Errc::InvalidArgument;
    kv[section + "." + trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  auto get_u64 = [&](const std::string& key,
                     std::uint64_t def) -> Result<std::uint64_t> {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    return parse_u64(it->second);
  };

  MachineModel m;
  {
    auto it = kv.find(".name");
    m.name = it != kv.end() ? it->second : "custom";
  }

  struct GeomKey { const char* key; TlbGeometry* geom; };
  GeomKey geoms[] = {
      {"tlb.dtlb_4k", &m.tlb.l1_4k},
      {"tlb.dtlb_2m", &m.tlb.l1_2m},
      {"tlb.dtlb_1g", &m.tlb.l1_1g},
      {"tlb.l2", &m.tlb.l2},
  };
  for (const auto& g : geoms) {
    auto e = get_u64(std::string(g.key) + "_entries", 0);
    auto a = get_u64(std::string(g.key) + "_assoc", 1);
    if (!e || !a) return Errc::InvalidArgument;
    g.geom->entries = static_cast<unsigned>(*e);
    g.geom->assoc = static_cast<unsigned>(*a);
  }
  auto l2all = get_u64("tlb.l2_all_sizes", 0);
  auto thr = get_u64("tlb.flush_threshold", 1);
  if (!l2all || !thr) return Errc::InvalidArgument;
  m.tlb.l2_all_sizes = *l2all != 0;
  m.tlb.flush_threshold = static_cast<unsigned>(*thr);

  auto l3b = get_u64("cache.l3_bytes", 0);
  auto l3a = get_u64("cache.l3_assoc", 1);
  auto lb = get_u64("cache.line_bytes", 64);
  if (!l3b || !l3a || !lb) return Errc::InvalidArgument;
  m.l3 = {*l3b, static_cast<unsigned>(*l3a), static_cast<unsigned>(*lb)};

  auto nnodes = get_u64("memory.nodes", 1);
  auto nbytes = get_u64("memory.node_bytes", 256 * kMiB);
  if (!nnodes || !nbytes || *nnodes == 0) return Errc::InvalidArgument;
  if (!is_pow2(*nbytes)) return Errc::InvalidSize;
  for (std::uint64_t i = 0; i < *nnodes; ++i) {
    MemNode n;
    n.base = i * *nbytes;
    n.bytes = *nbytes;
    auto it = kv.find("memory.node" + std::to_string(i) + "_kind");
    if (it != kv.end()) {
      if (it->second == "dram") n.kind = MemKind::Dram;
      else if (it->second == "persistent") n.kind = MemKind::Persistent;
      else if (it->second == "device") n.kind = MemKind::Device;
      else return Errc::InvalidAttr;
    }
    m.nodes.push_back(n);
  }

  auto it = kv.find("memory.distance");
  if (it != kv.end()) {
    std::istringstream ss(it->second);
    unsigned d;
    while (ss >> d) m.distance.push_back(d);
    if (m.distance.size() != m.nodes.size() * m.nodes.size()) {
      return Errc::InvalidArgument;
    }
  } else {
    const auto n = m.nodes.size();
    m.distance.assign(n * n, 20);
    for (size_t i = 0; i < n; ++i) m.distance[i * n + i] = 10;
  }
  return m;
}

}  // namespace cichlid
