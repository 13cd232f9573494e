#include "cichlid/translate.hpp"

#include <algorithm>
#include <cassert>

namespace cichlid {

WalkResult walk(const PhysMem& mem, PhysAddr root, VirtAddr va,
                std::uint64_t* reads) {
  if (root == 0 || (root & (kPage4K - 1)) != 0 || !mem.contains(root, kPage4K) ||
      !is_canonical(va)) {
    return Fault{va, AccessKind::Read, FaultCause::NoTranslationRoot};
  }

  auto read_entry = [&](PhysAddr table, unsigned level,
                        PhysAddr* loc) -> std::optional<Pte> {
    const PhysAddr at = table + 8ull * pt_index(va, level);
    if (!mem.contains(at, 8)) return std::nullopt;
    if (reads != nullptr) ++*reads;
    *loc = at;
    return Pte{mem.read_u64(at)};
  };

  PhysAddr loc = 0;
  PhysAddr table = root;
  for (unsigned level = 4; level >= 1; --level) {
    auto e = read_entry(table, level, &loc);
    if (!e.has_value()) {
      return Fault{va, AccessKind::Read, FaultCause::NotPresent};
    }
    if (!e->present()) {
      return Fault{va, AccessKind::Read, FaultCause::NotPresent};
    }
    const bool leaf = level == 1 || ((level == 2 || level == 3) && e->large());
    if (leaf) {
      const PageSize ps = level == 1   ? PageSize::k4K
                          : level == 2 ? PageSize::k2M
                                       : PageSize::k1G;
      const std::uint64_t off = va & (bytes_of(ps) - 1);
      const PhysAddr pa = e->addr() + off;
      if (!mem.contains(e->addr(), bytes_of(ps))) {
        return Fault{va, AccessKind::Read, FaultCause::NotPresent};
      }
      return Translation{pa, ps, loc, *e};
    }
    table = e->addr();
    if (!mem.contains(table, kPage4K)) {
      return Fault{va, AccessKind::Read, FaultCause::NotPresent};
    }
  }
  return Fault{va, AccessKind::Read, FaultCause::NotPresent};
}

void TranslationUnit::Array::reset(const TlbGeometry& g) {
  geom = g;
  slots.assign(geom.entries, Entry{});
}

TranslationUnit::Entry* TranslationUnit::Array::find(VirtAddr va, PageSize ps) {
  if (!enabled()) return nullptr;
  const std::uint64_t vpn = va >> shift_of(ps);
  const unsigned set = static_cast<unsigned>(vpn % sets());
  Entry* base = slots.data() + static_cast<size_t>(set) * geom.assoc;
  for (unsigned w = 0; w < geom.assoc; ++w) {
    Entry& e = base[w];
    if (e.valid && e.size == ps && e.vpn == vpn) return &e;
  }
  return nullptr;
}

std::optional<TranslationUnit::Entry> TranslationUnit::Array::insert(
    const Entry& e) {
  const std::uint64_t vpn = e.vpn;
  const unsigned set = static_cast<unsigned>(vpn % sets());
  Entry* base = slots.data() + static_cast<size_t>(set) * geom.assoc;
  Entry* victim = base;
  for (unsigned w = 0; w < geom.assoc; ++w) {
    if (!base[w].valid) {
      base[w] = e;
      return std::nullopt;
    }
    if (base[w].tick < victim->tick) victim = &base[w];
  }
  Entry out = *victim;
  *victim = e;
  return out;
}

void TranslationUnit::Array::invalidate(VirtAddr va) {
  if (!enabled()) return;
  for (auto& e : slots) {
    if (!e.valid) continue;
    const std::uint64_t span = bytes_of(e.size);
    const VirtAddr base = e.vpn << shift_of(e.size);
    if (va >= base && va < base + span) e.valid = false;
  }
}

void TranslationUnit::Array::clear() {
  for (auto& e : slots) e.valid = false;
}

TranslationUnit::TranslationUnit(PhysMem& mem, const TlbConfig& config)
    : mem_(&mem), config_(config), threshold_(config.flush_threshold) {
  l1_[0].reset(config.l1_4k);
  l1_[1].reset(config.l1_2m);
  l1_[2].reset(config.l1_1g);
  l2_.reset(config.l2);
}

TranslationUnit::Entry* TranslationUnit::lookup(VirtAddr va) {
  for (auto ps : {PageSize::k4K, PageSize::k2M, PageSize::k1G}) {
    if (Entry* e = l1_[static_cast<int>(ps)].find(va, ps)) {
      e->tick = ++tick_;
      return e;
    }
  }
  if (l2_.enabled()) {
    for (auto ps : {PageSize::k4K, PageSize::k2M, PageSize::k1G}) {
      if (!config_.l2_all_sizes && ps != PageSize::k4K) continue;
      if (Entry* e = l2_.find(va, ps)) {
        // Promote to L1; the L2 copy is retired, an L1 victim moves down.
        Entry promoted = *e;
        promoted.tick = ++tick_;
        e->valid = false;
        install(promoted);
        return l1_[static_cast<int>(promoted.size)].find(va, promoted.size);
      }
    }
  }
  return nullptr;
}

void TranslationUnit::install(const Entry& e) {
  auto victim = l1_[static_cast<int>(e.size)].insert(e);
  if (victim.has_value() && l2_.enabled() &&
      (config_.l2_all_sizes || victim->size == PageSize::k4K)) {
    l2_.insert(*victim);
  }
}

std::variant<PhysAddr, Fault> TranslationUnit::translate(VirtAddr va,
                                                         AccessKind kind) {
  if (Entry* e = lookup(va)) {
    ++counters_.tlb_hits;
    if (kind == AccessKind::Write && !e->writable) {
      ++counters_.faults;
      return Fault{va, kind, FaultCause::WriteToReadonly};
    }
    if (kind == AccessKind::Write && !e->dirty) {
      // Hardware re-sets the dirty bit on the first write through a clean
      // cached translation.
      Pte leaf{mem_->read_u64(e->leaf_pte_loc)};
      if (leaf.present()) {
        leaf.raw |= Pte::kDirty | Pte::kAccessed;
        mem_->write_u64(e->leaf_pte_loc, leaf.raw);
      }
      e->dirty = true;
    }
    const std::uint64_t off = va & (bytes_of(e->size) - 1);
    return e->frame + off;
  }

  ++counters_.tlb_misses;
  auto w = walk(*mem_, has_root_ ? root_ : 0, va, &counters_.walk_memory_reads);
  if (std::holds_alternative<Fault>(w)) {
    ++counters_.faults;
    Fault f = std::get<Fault>(w);
    f.kind = kind;
    return f;
  }
  const Translation& t = std::get<Translation>(w);
  if (kind == AccessKind::Write && !t.leaf.writable()) {
    ++counters_.faults;
    return Fault{va, kind, FaultCause::WriteToReadonly};
  }

  Pte leaf = t.leaf;
  leaf.raw |= Pte::kAccessed;
  if (kind == AccessKind::Write) leaf.raw |= Pte::kDirty;
  mem_->write_u64(t.leaf_pte_loc, leaf.raw);

  Entry e;
  e.valid = true;
  e.vpn = va >> shift_of(t.page_size);
  e.size = t.page_size;
  e.frame = t.leaf.addr();
  e.leaf_pte_loc = t.leaf_pte_loc;
  e.writable = t.leaf.writable();
  e.dirty = leaf.dirty();
  e.tick = ++tick_;
  install(e);
  return t.pa;
}

std::variant<std::uint64_t, Fault> TranslationUnit::access(
    VirtAddr va, AccessKind kind, unsigned width, std::uint64_t write_value,
    PhysAddr* pa_out) {
  assert(width == 1 || width == 2 || width == 4 || width == 8);
  assert((va & (kPage4K - 1)) + width <= kPage4K && "access crosses a page");
  auto t = translate(va, kind);
  if (std::holds_alternative<Fault>(t)) return std::get<Fault>(t);
  const PhysAddr pa = std::get<PhysAddr>(t);
  if (pa_out != nullptr) *pa_out = pa;
  if (kind == AccessKind::Write) {
    mem_->write_uint(pa, write_value, width);
    return write_value;
  }
  return mem_->read_uint(pa, width);
}

void TranslationUnit::flush_full() {
  for (auto& a : l1_) a.clear();
  l2_.clear();
  ++counters_.full_flushes;
}

void TranslationUnit::flush_selective(std::span<const VirtAddr> vas) {
  for (VirtAddr va : vas) {
    for (auto& a : l1_) a.invalidate(va);
    l2_.invalidate(va);
  }
  ++counters_.selective_flushes;
}

void TranslationUnit::flush_policy(std::span<const VirtAddr> vas) {
  if (vas.empty()) return;
  if (vas.size() <= threshold_) {
    flush_selective(vas);
  } else {
    flush_full();
  }
}

void TranslationUnit::flush_for_mode(std::span<const VirtAddr> vas) {
  if (vas.empty()) return;
  switch (mode_) {
    case FlushMode::Full: flush_full(); break;
    case FlushMode::Selective: flush_selective(vas); break;
    case FlushMode::DefaultPolicy: flush_policy(vas); break;
  }
}

Result<void> TranslationUnit::set_root(PhysAddr root) {
  if ((root & (kPage4K - 1)) != 0 || !mem_->contains(root, kPage4K)) {
    return Errc::InvalidRoot;
  }
  root_ = root;
  has_root_ = true;
  flush_full();
  return {};
}

bool TranslationUnit::cached(VirtAddr va) const {
  auto probe = [&](const Array& a, PageSize ps) {
    return const_cast<Array&>(a).find(va, ps) != nullptr;
  };
  for (auto ps : {PageSize::k4K, PageSize::k2M, PageSize::k1G}) {
    if (probe(l1_[static_cast<int>(ps)], ps)) return true;
    if (l2_.geom.entries > 0 && (config_.l2_all_sizes || ps == PageSize::k4K) &&
        probe(l2_, ps)) {
      return true;
    }
  }
  return false;
}

}  // namespace cichlid
