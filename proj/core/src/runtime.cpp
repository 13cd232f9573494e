#include "cichlid/runtime.hpp"

#include <algorithm>
#include <cassert>

#include "cichlid/pager.hpp"
#include "cichlid/pte.hpp"

namespace cichlid {

namespace {

constexpr VirtAddr kVaBase = 16 * kMiB;
constexpr VirtAddr kVaEnd = 0x7000'0000'0000ull;

constexpr unsigned level_of_leaf(PageSize ps) {
  switch (ps) {
    case PageSize::k4K: return 1;
    case PageSize::k2M: return 2;
    case PageSize::k1G: return 3;
  }
  return 1;
}

}  // namespace

Result<MemObj> make_memobj(System& sys, AllocService& alloc, Process& proc,
                           unsigned node, std::uint64_t bytes,
                           std::uint64_t frame_size) {
  if (bytes == 0 || bytes % frame_size != 0) return Errc::InvalidSize;
  MemObj obj;
  MemAttr attrs;
  attrs.node = node;
  attrs.kind = sys.machine().nodes[node].kind;
  for (std::uint64_t off = 0; off < bytes; off += frame_size) {
    auto f = alloc.alloc(proc, attrs, frame_size);
    if (!f) return f.error();
    obj.add(*f, frame_size);
  }
  return obj;
}

Result<std::unique_ptr<VSpace>> VSpace::create(System& sys,
                                               AllocService& alloc,
                                               Process& proc,
                                               unsigned table_node) {
  auto vs = std::unique_ptr<VSpace>(new VSpace());
  vs->sys_ = &sys;
  vs->alloc_ = &alloc;
  vs->proc_ = &proc;
  vs->table_node_ = table_node;
  vs->free_va_[kVaBase] = kVaEnd - kVaBase;
  auto pml4 = vs->alloc_table(CapType::Pml4);
  if (!pml4) return pml4.error();
  vs->vroot_ = *pml4;
  auto view = sys.lookup(proc, *pml4);
  if (!view) return view.error();
  vs->vroot_base_ = view->base;
  return vs;
}

Result<void> VSpace::install(int core) {
  return sys_->install_vroot(*proc_, vroot_, core);
}

Result<CapHandle> VSpace::alloc_table(CapType type) {
  MemAttr attrs;
  attrs.node = table_node_;
  attrs.kind = sys_->machine().nodes[table_node_].kind;
  auto ram = alloc_->alloc(*proc_, attrs, kPage4K, 0, CapType::Ram);
  if (!ram) return ram.error();
  auto t = sys_->retype(*proc_, *ram, type, kPage4K, 1);
  if (!t) return t.error();
  return t->front();
}

Result<VirtAddr> VSpace::reserve_va(std::uint64_t len, std::uint64_t align) {
  for (auto it = free_va_.begin(); it != free_va_.end(); ++it) {
    const VirtAddr base = it->first;
    const std::uint64_t flen = it->second;
    const VirtAddr aligned = align_up(base, align);
    if (aligned + len > base + flen) continue;
    free_va_.erase(it);
    if (aligned > base) free_va_[base] = aligned - base;
    if (aligned + len < base + flen) {
      free_va_[aligned + len] = base + flen - (aligned + len);
    }
    return aligned;
  }
  return Errc::OutOfVA;
}

void VSpace::release_va(VirtAddr base, std::uint64_t len) {
  auto next = free_va_.lower_bound(base);
  if (next != free_va_.end() && base + len == next->first) {
    len += next->second;
    free_va_.erase(next);
  }
  if (!free_va_.empty()) {
    auto prev = free_va_.lower_bound(base);
    if (prev != free_va_.begin()) {
      --prev;
      if (prev->first + prev->second == base) {
        prev->second += len;
        return;
      }
    }
  }
  free_va_[base] = len;
}

Result<std::pair<CapHandle, PhysAddr>> VSpace::ensure_table(VirtAddr va,
                                                            unsigned level) {
  assert(level >= 1 && level <= 3);
  const unsigned idx = 3 - level;  // tables_[0]=PDPT .. [2]=PT
  const std::uint64_t span = level_span(level + 1);
  const VirtAddr prefix = align_down(va, span);
  auto it = tables_[idx].find(prefix);
  if (it != tables_[idx].end()) {
    return std::make_pair(it->second.handle, it->second.base);
  }

  CapHandle parent_handle = vroot_;
  if (level < 3) {
    auto up = ensure_table(va, level + 1);
    if (!up) return up.error();
    parent_handle = up->first;
  }
  static constexpr CapType kTypeOf[3] = {CapType::Pdpt, CapType::Pd,
                                         CapType::Pt};
  auto t = alloc_table(kTypeOf[idx]);
  if (!t) return t.error();
  const unsigned entry = pt_index(va, level + 1);
  MapArg arg{*t, Rights::rw()};
  auto res = sys_->invoke_map(*proc_, parent_handle, entry, {&arg, 1});
  if (!res.ok()) return res.status;
  auto view = sys_->lookup(*proc_, *t);
  if (!view) return view.error();
  tables_[idx][prefix] = {*t, view->base};
  return std::make_pair(*t, view->base);
}

Result<VRegion*> VSpace::map(const MemObj& obj, std::optional<VirtAddr> va,
                             PageSize page_size, Rights flags) {
  const std::uint64_t page = bytes_of(page_size);
  if (obj.total == 0 || obj.total % page != 0) return Errc::InvalidSize;

  // Frames must match the region's page size. Two exceptions: a 4 KiB
  // region accepts larger frames (spread over consecutive entries), and a
  // 2 MiB region accepts exact 512-batches of 4 KiB frames, realized as
  // filled PTs.
  PageSize leaf = page_size;
  std::uint64_t max_piece = 0;
  bool all_4k = true;
  for (const auto& pc : obj.pieces) {
    if (!is_pow2(pc.size) || pc.size < kPage4K) return Errc::InvalidSize;
    max_piece = std::max(max_piece, pc.size);
    if (pc.size != kPage4K) all_4k = false;
  }
  switch (page_size) {
    case PageSize::k4K:
      if (max_piece > kPage2M) return Errc::RuleViolation;
      break;
    case PageSize::k2M:
      if (all_4k) {
        if (obj.pieces.size() % kPtesPerTable != 0) return Errc::RuleViolation;
        leaf = PageSize::k4K;
      } else {
        for (const auto& pc : obj.pieces) {
          if (pc.size != kPage2M) return Errc::RuleViolation;
        }
      }
      break;
    case PageSize::k1G:
      for (const auto& pc : obj.pieces) {
        if (pc.size != kPage1G) return Errc::RuleViolation;
      }
      break;
  }

  const std::uint64_t len = obj.total;
  VirtAddr base = 0;
  if (va.has_value()) {
    base = *va;
    if (base % page != 0) return Errc::InvalidArgument;
    for (const auto& [rb, reg] : regions_) {
      if (base < rb + reg->length && rb < base + len) return Errc::OutOfVA;
    }
    // Must also be carved from the free list.
    bool carved = false;
    for (auto it = free_va_.begin(); it != free_va_.end(); ++it) {
      if (base >= it->first && base + len <= it->first + it->second) {
        const VirtAddr fb = it->first;
        const std::uint64_t fl = it->second;
        free_va_.erase(it);
        if (base > fb) free_va_[fb] = base - fb;
        if (base + len < fb + fl) free_va_[base + len] = fb + fl - base - len;
        carved = true;
        break;
      }
    }
    if (!carved) return Errc::OutOfVA;
  } else {
    // Align so no piece straddles its leaf table.
    auto r = reserve_va(len, std::max(page, max_piece));
    if (!r) return r.error();
    base = *r;
  }

  auto region = std::make_unique<VRegion>();
  region->base = base;
  region->length = len;
  region->page_size = page_size;
  region->leaf_size = leaf;
  region->flags = flags;
  region->obj = obj;

  const unsigned leaf_level = level_of_leaf(leaf);
  const std::uint64_t leaf_bytes = bytes_of(leaf);

  // Batch per leaf table: one invocation covers every consecutive entry
  // this region installs there.
  struct Batch {
    CapHandle table = 0;
    std::uint32_t first = 0;
    std::vector<MapArg> args;
  };
  std::optional<Batch> cur;
  VirtAddr at = base;
  auto flush_batch = [&]() -> Result<void> {
    if (!cur.has_value()) return {};
    auto res = sys_->invoke_map(*proc_, cur->table, cur->first, cur->args);
    cur.reset();
    if (!res.ok()) return res.status;
    return {};
  };

  for (const auto& pc : obj.pieces) {
    auto tab = ensure_table(at, leaf_level);
    if (!tab) {
      auto fr = flush_batch();
      (void)fr;
      return tab.error();
    }
    auto copy = sys_->copy_cap(*proc_, pc.frame);
    if (!copy) return copy.error();
    region->use_copies.push_back(*copy);
    const unsigned entry = pt_index(at, leaf_level);
    if (!cur.has_value() || cur->table != tab->first) {
      auto fr = flush_batch();
      if (!fr) return fr.error();
      cur = Batch{tab->first, entry, {}};
    }
    cur->args.push_back({*copy, flags});
    at += pc.size;
    // A piece never crosses its table: alignment above plus power-of-two
    // sizes guarantee it, but explicit VAs can break it.
    if ((at - 1) / level_span(leaf_level + 1) !=
            (at - pc.size) / level_span(leaf_level + 1) &&
        at % level_span(leaf_level + 1) != 0) {
      return Errc::RuleViolation;
    }
    (void)leaf_bytes;
  }
  auto fr = flush_batch();
  if (!fr) return fr.error();

  VRegion* out = region.get();
  regions_[base] = std::move(region);
  return out;
}

VRegion* VSpace::region_at(VirtAddr va) {
  auto it = regions_.upper_bound(va);
  if (it == regions_.begin()) return nullptr;
  --it;
  VRegion* r = it->second.get();
  if (va >= r->base && va < r->base + r->length) return r;
  return nullptr;
}

Result<void> VSpace::protect(VRegion& r, Rights flags) {
  if (region_at(r.base) != &r) return Errc::UnknownRegion;
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const std::uint64_t table_span = level_span(leaf_level + 1);
  VirtAddr at = r.base;
  const VirtAddr end = r.base + r.length;
  while (at < end) {
    const VirtAddr chunk_end = std::min(end, align_down(at, table_span) + table_span);
    auto tab = ensure_table(at, leaf_level);
    if (!tab) return tab.error();
    const std::uint32_t first = pt_index(at, leaf_level);
    const std::uint32_t count =
        static_cast<std::uint32_t>((chunk_end - at) / bytes_of(r.leaf_size));
    auto res = sys_->invoke_modify_flags(*proc_, tab->first, first, count, flags);
    if (!res.ok()) return res.status;
    at = chunk_end;
  }
  r.flags = flags;
  return {};
}

Result<void> VSpace::unmap(VRegion& r) {
  auto it = regions_.find(r.base);
  if (it == regions_.end() || it->second.get() != &r) {
    return Errc::UnknownRegion;
  }
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const std::uint64_t table_span = level_span(leaf_level + 1);
  VirtAddr at = r.base;
  const VirtAddr end = r.base + r.length;
  while (at < end) {
    const VirtAddr chunk_end =
        std::min(end, align_down(at, table_span) + table_span);
    auto tab = ensure_table(at, leaf_level);
    if (!tab) return tab.error();
    const std::uint32_t first = pt_index(at, leaf_level);
    const std::uint32_t count =
        static_cast<std::uint32_t>((chunk_end - at) / bytes_of(r.leaf_size));
    auto res = sys_->invoke_unmap(*proc_, tab->first, first, count);
    if (!res.ok()) return res.status;
    at = chunk_end;
  }
  for (CapHandle c : r.use_copies) {
    auto d = sys_->delete_cap(*proc_, c);
    if (!d) return d;
  }
  hooks_.erase(r.base);
  const VirtAddr base = r.base;
  const std::uint64_t len = r.length;
  regions_.erase(it);
  release_va(base, len);
  // Table capabilities are retained for reuse; teardown cost lives in the
  // bookkeeping, not the tables.
  return {};
}

Result<void> VSpace::ensure_status_space() {
  if (!status_pts_.empty()) return {};
  auto va = reserve_va(kPage2M, kPage2M);
  if (!va) return va.error();
  status_base_ = *va;
  auto pt = ensure_table(status_base_, 1);
  if (!pt) return pt.error();
  status_pts_.push_back({pt->first, pt->second});
  return {};
}

Result<VirtAddr> VSpace::status_va_of_table(CapHandle table,
                                            PhysAddr table_base) {
  auto it = status_va_.find(table_base);
  if (it != status_va_.end()) return it->second;
  auto es = ensure_status_space();
  if (!es) return es.error();
  if (status_used_ >= kPtesPerTable) return Errc::OutOfVA;
  // The mounted capability must be a fresh copy: the original already
  // holds its tree-edge mapping record.
  auto copy = sys_->copy_cap(*proc_, table);
  if (!copy) return copy.error();
  MapArg arg{*copy, Rights::ro()};
  auto res = sys_->invoke_map(*proc_, status_pts_[0].handle, status_used_,
                              {&arg, 1});
  if (!res.ok()) return res.status;
  const VirtAddr va = status_base_ + status_used_ * kPage4K;
  ++status_used_;
  status_va_[table_base] = va;
  return va;
}

Result<PageStatus> VSpace::read_status_bits(VRegion& r) {
  PageStatus st;
  const std::uint64_t n = r.pages();
  st.accessed.assign(n, false);
  st.dirty.assign(n, false);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto bits = page_status(r, i);
    if (!bits) return bits.error();
    st.accessed[i] = bits->first;
    st.dirty[i] = bits->second;
  }
  return st;
}

Result<std::pair<bool, bool>> VSpace::page_status(VRegion& r,
                                                  std::uint64_t page) {
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const VirtAddr va = r.base + page * bytes_of(r.leaf_size);
  auto tab = ensure_table(va, leaf_level);
  if (!tab) return tab.error();
  auto sva = status_va_of_table(tab->first, tab->second);
  if (!sva) return sva.error();
  const unsigned entry = pt_index(va, leaf_level);
  auto word = sys_->user_read(*proc_, *sva + 8ull * entry, 8);
  if (!word) return word.error();
  const Pte pte{*word};
  return std::make_pair(pte.accessed(), pte.dirty());
}

Result<void> VSpace::clear_status_bits(VRegion& r) {
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const std::uint64_t table_span = level_span(leaf_level + 1);
  VirtAddr at = r.base;
  const VirtAddr end = r.base + r.length;
  while (at < end) {
    const VirtAddr chunk_end =
        std::min(end, align_down(at, table_span) + table_span);
    auto tab = ensure_table(at, leaf_level);
    if (!tab) return tab.error();
    const std::uint32_t first = pt_index(at, leaf_level);
    const std::uint32_t count =
        static_cast<std::uint32_t>((chunk_end - at) / bytes_of(r.leaf_size));
    auto res = sys_->invoke_clear_dirty_bits(*proc_, tab->first, first, count);
    if (!res.ok()) return res.status;
    at = chunk_end;
  }
  return {};
}

void VSpace::install_handler() {
  proc_->handler = [this](const Fault& f) { return dispatch_fault(f); };
}

void VSpace::set_region_hook(VRegion& r,
                             std::function<bool(const Fault&)> hook) {
  hooks_[r.base] = std::move(hook);
}

bool VSpace::dispatch_fault(const Fault& f) {
  VRegion* r = region_at(f.va);
  if (r == nullptr) return false;
  auto h = hooks_.find(r->base);
  if (h != hooks_.end()) return h->second(f);
  if (r->pager != nullptr) return r->pager->handle_fault(f);
  return false;
}

Result<void> VSpace::unmap_leaf(VRegion& r, std::uint64_t page_index) {
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const VirtAddr va = r.base + page_index * bytes_of(r.leaf_size);
  auto tab = ensure_table(va, leaf_level);
  if (!tab) return tab.error();
  auto res =
      sys_->invoke_unmap(*proc_, tab->first, pt_index(va, leaf_level), 1);
  if (!res.ok()) return res.status;
  return {};
}

Result<void> VSpace::map_leaf(VRegion& r, std::uint64_t page_index,
                              CapHandle cap, Rights flags) {
  const unsigned leaf_level = level_of_leaf(r.leaf_size);
  const VirtAddr va = r.base + page_index * bytes_of(r.leaf_size);
  auto tab = ensure_table(va, leaf_level);
  if (!tab) return tab.error();
  MapArg arg{cap, flags};
  auto res =
      sys_->invoke_map(*proc_, tab->first, pt_index(va, leaf_level), {&arg, 1});
  if (!res.ok()) return res.status;
  return {};
}

bool VSpace::shadow_matches_tables() const {
  // Every shadow edge must exist as a present tree-edge PTE, and every
  // tree-edge PTE under the vroot must be in the shadow.
  const PhysMem& mem = sys_->mem();
  std::size_t shadow_edges = 0;
  for (unsigned idx = 0; idx < 3; ++idx) {
    const unsigned parent_level = 4 - idx;
    for (const auto& [prefix, ref] : tables_[idx]) {
      PhysAddr parent_base = vroot_base_;
      if (idx > 0) {
        const auto span = level_span(parent_level + 1);
        auto it = tables_[idx - 1].find(align_down(prefix, span));
        if (it == tables_[idx - 1].end()) return false;
        parent_base = it->second.base;
      }
      const Pte pte{
          mem.read_u64(parent_base + 8ull * pt_index(prefix, parent_level))};
      if (!pte.present() || pte.large() || pte.addr() != ref.base) {
        return false;
      }
      ++shadow_edges;
    }
  }
  // Count tree edges in the physical tree (status mounts are leaves in a
  // PT and do not participate).
  std::size_t phys_edges = 0;
  std::vector<std::pair<PhysAddr, unsigned>> frontier{{vroot_base_, 4}};
  while (!frontier.empty()) {
    auto [tbl, level] = frontier.back();
    frontier.pop_back();
    if (level == 1) continue;
    for (unsigned e = 0; e < kPtesPerTable; ++e) {
      const Pte pte{mem.read_u64(tbl + 8ull * e)};
      if (!pte.present()) continue;
      if ((level == 3 || level == 2) && pte.large()) continue;
      ++phys_edges;
      frontier.emplace_back(pte.addr(), level - 1);
    }
  }
  return phys_edges == shadow_edges;
}

// --- heap ---------------------------------------------------------------

Heap::Heap(VSpace& vs, AllocService& alloc, unsigned node)
    : vs_(&vs), alloc_(&alloc), node_(node) {}

Result<VirtAddr> Heap::morecore(std::uint64_t bytes) {
  bytes = align_up(bytes, kPage4K);
  if (heap_base_ == 0) {
    auto va = vs_->reserve_va(64 * kMiB, kPage2M);
    if (!va) return va.error();
    heap_base_ = *va;
    brk_ = heap_base_;
    reserved_ = 64 * kMiB;
  }
  if (brk_ + bytes > heap_base_ + reserved_) return Errc::OutOfVA;
  auto obj = make_memobj(vs_->sys(), *alloc_, vs_->proc(), node_, bytes,
                         kPage4K);
  if (!obj) return obj.error();
  // The heap VA range was reserved up front; map the new chunk at the
  // current break. The carve in map() would fail (already reserved), so
  // temporarily hand the range back.
  vs_->release_va(brk_, bytes);
  auto r = vs_->map(*obj, brk_, PageSize::k4K, Rights::rw());
  if (!r) return r.error();
  const VirtAddr old = brk_;
  brk_ += bytes;
  mapped_ += bytes;
  free_blocks_[old] = bytes;
  return old;
}

Result<VirtAddr> Heap::malloc(std::uint64_t bytes) {
  if (bytes == 0) bytes = 1;
  bytes = align_up(bytes, 16);
  for (auto it = free_blocks_.begin(); it != free_blocks_.end(); ++it) {
    if (it->second >= bytes) {
      const VirtAddr va = it->first;
      const std::uint64_t rest = it->second - bytes;
      free_blocks_.erase(it);
      if (rest > 0) free_blocks_[va + bytes] = rest;
      used_[va] = bytes;
      return va;
    }
  }
  auto grown = morecore(std::max<std::uint64_t>(bytes, 64 * kKiB));
  if (!grown) return grown.error();
  return malloc(bytes);
}

Result<void> Heap::free(VirtAddr va) {
  auto it = used_.find(va);
  if (it == used_.end()) return Errc::InvalidArgument;
  std::uint64_t len = it->second;
  used_.erase(it);
  // Coalesce with neighbors.
  auto next = free_blocks_.find(va + len);
  if (next != free_blocks_.end()) {
    len += next->second;
    free_blocks_.erase(next);
  }
  auto prev = free_blocks_.lower_bound(va);
  if (prev != free_blocks_.begin()) {
    --prev;
    if (prev->first + prev->second == va) {
      prev->second += len;
      return {};
    }
  }
  free_blocks_[va] = len;
  return {};
}

// --- standard image -------------------------------------------------------

Result<StandardImage> setup_standard_vspace(System& sys, AllocService& alloc,
                                            Process& proc, int core) {
  auto vs = VSpace::create(sys, alloc, proc);
  if (!vs) return vs.error();
  StandardImage img;
  img.vspace = std::move(*vs);

  auto mk = [&](std::uint64_t bytes, VirtAddr at,
                Rights flags) -> Result<VRegion*> {
    auto obj = make_memobj(sys, alloc, proc, 0, bytes, kPage4K);
    if (!obj) return obj.error();
    return img.vspace->map(*obj, at, PageSize::k4K, flags);
  };
  // Classic layout: text, data, bss. Mapped writable for population, text
  // protected read-only afterwards.
  auto text = mk(16 * kKiB, 64 * kMiB, Rights::rw());
  if (!text) return text.error();
  auto data = mk(16 * kKiB, 65 * kMiB, Rights::rw());
  if (!data) return data.error();
  auto bss = mk(16 * kKiB, 66 * kMiB, Rights::rw());
  if (!bss) return bss.error();
  img.text = *text;
  img.data = *data;
  img.bss = *bss;
  auto in = img.vspace->install(core);
  if (!in) return in.error();
  auto prot = img.vspace->protect(**text, Rights::ro());
  if (!prot) return prot.error();
  img.heap = std::make_unique<Heap>(*img.vspace, alloc, 0);
  auto seed = img.heap->morecore(64 * kKiB);
  if (!seed) return seed.error();
  img.vspace->install_handler();
  return img;
}

}  // namespace cichlid
