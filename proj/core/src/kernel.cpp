#include "cichlid/kernel.hpp"

#include <algorithm>
#include <cassert>
#include <set>

#include "cichlid/pte.hpp"

namespace cichlid {

std::uint64_t PteRecord::target_size() const {
  switch (table_type) {
    case CapType::Pt: return kPage4K;
    case CapType::Pd: return pte.large() ? kPage2M : kPage4K;
    case CapType::Pdpt: return pte.large() ? kPage1G : kPage4K;
    case CapType::Pml4: return kPage4K;
    default: return 0;
  }
}

bool AuthoritySet::allows(PhysAddr pa, unsigned bytes, AccessKind kind) const {
  const auto& set = kind == AccessKind::Write ? writable : readable;
  for (const auto& [lo, hi] : set) {
    if (pa >= lo && pa + bytes <= hi) return true;
  }
  return false;
}

System::System(MachineModel machine) : machine_(std::move(machine)) {}

System::~System() = default;

Result<CapHandle> System::bootstrap(std::uint64_t total_bytes) {
  assert(!mem_.has_value() && "bootstrap runs once");
  std::uint64_t total = total_bytes != 0 ? total_bytes : machine_.total_phys();
  if (!is_pow2(total) || total < kMiB) return Errc::InvalidSize;
  if (total_bytes != 0) {
    auto r = machine_.scale_memory(total_bytes);
    if (!r) return r.error();
  }
  mem_.emplace(total);
  tus_.push_back(std::make_unique<TranslationUnit>(*mem_, machine_.tlb));
  active_proc_.assign(1, nullptr);
  active_root_cap_.assign(1, nullptr);

  Process& p0 = create_process();
  CapNode* root = db_.make_root(CapType::Untyped, 0, total);
  auto h = p0.space.insert(root);
  assert(h.ok());
  root_untyped_handle_ = *h;
  return *h;
}

Process& System::create_process() {
  auto p = std::make_unique<Process>();
  p->id = static_cast<int>(procs_.size());
  procs_.push_back(std::move(p));
  return *procs_.back();
}

CounterMap System::counter_map() const {
  CounterMap m;
  const KernelCounters& k = counters_;
  m.emplace_back("invocations", k.invocations);
  m.emplace_back("retypes", k.retypes);
  m.emplace_back("copies", k.copies);
  m.emplace_back("deletes", k.deletes);
  m.emplace_back("revokes", k.revokes);
  m.emplace_back("maps", k.maps);
  m.emplace_back("unmaps", k.unmaps);
  m.emplace_back("modify_flags", k.modify_flags);
  m.emplace_back("modify_flags_multi", k.modify_flags_multi);
  m.emplace_back("clear_dirty", k.clear_dirty);
  m.emplace_back("identifies", k.identifies);
  m.emplace_back("vroot_installs", k.vroot_installs);
  m.emplace_back("map_entries", k.map_entries);
  m.emplace_back("unmap_entries", k.unmap_entries);
  m.emplace_back("modify_entries", k.modify_entries);
  m.emplace_back("clear_entries", k.clear_entries);
  m.emplace_back("upcalls", k.upcalls);
  m.emplace_back("terminations", k.terminations);
  std::uint64_t hits = 0, misses = 0, walks = 0, faults = 0, full = 0,
                sel = 0;
  for (const auto& tu : tus_) {
    const auto& c = tu->counters();
    hits += c.tlb_hits;
    misses += c.tlb_misses;
    walks += c.walk_memory_reads;
    faults += c.faults;
    full += c.full_flushes;
    sel += c.selective_flushes;
  }
  m.emplace_back("tlb_hits", hits);
  m.emplace_back("tlb_misses", misses);
  m.emplace_back("walk_memory_reads", walks);
  m.emplace_back("faults", faults);
  m.emplace_back("full_flushes", full);
  m.emplace_back("selective_flushes", sel);
  return m;
}

void System::trace_checkpoint(const std::string& label) {
  trace_.record(label, {}, Errc::Ok, counter_map());
}

void System::emit_trace(const char* op,
                        std::vector<std::pair<std::string, std::int64_t>> args,
                        Errc status) {
  if (!trace_.enabled()) return;
  trace_.record(op, std::move(args), status, counter_map());
}

Result<CapNode*> System::resolve(const Process& p, CapHandle h) const {
  return p.space.resolve(h);
}

// --- capability operations --------------------------------------------

Result<std::vector<CapHandle>> System::retype(Process& p, CapHandle src,
                                              CapType target,
                                              std::uint64_t obj_size,
                                              std::uint32_t count,
                                              Process* dest) {
  ++counters_.invocations;
  ++counters_.retypes;
  auto fail = [&](Errc e) -> Result<std::vector<CapHandle>> {
    emit_trace("retype", {{"src", src}, {"count", count}}, e);
    return e;
  };
  auto rsrc = resolve(p, src);
  if (!rsrc) return fail(rsrc.error());
  CapNode* s = *rsrc;
  if (!retype_allowed(s->type, target)) return fail(Errc::DisallowedTransition);
  if (!is_pow2(obj_size) || obj_size < kPage4K) return fail(Errc::InvalidSize);
  if (is_table_type(target) || target == CapType::CNode) {
    if (obj_size != kPage4K) return fail(Errc::InvalidSize);
  }
  if (count == 0 ||
      static_cast<std::uint64_t>(count) * obj_size > s->size) {
    return fail(Errc::InvalidSize);
  }
  const PhysAddr lo = s->base;
  const PhysAddr hi = s->base + static_cast<std::uint64_t>(count) * obj_size;
  if (db_.subtree_overlaps(s, lo, hi)) {
    return fail(Errc::HasConflictingDescendants);
  }

  Process& d = dest != nullptr ? *dest : p;
  std::vector<CapHandle> handles;
  std::vector<CapNode*> made;
  handles.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CapNode* n =
        db_.add_child(s, target, lo + i * obj_size, obj_size, s->rights);
    if (target == CapType::CNode) n->cnode = std::make_shared<CNodeObject>();
    auto h = d.space.insert(n);
    if (!h) {
      // Roll back already-created children; nothing was published yet.
      for (CapNode* m : made) {
        d.space.detach(m);
        db_.remove(m);
      }
      db_.remove(n);
      return fail(Errc::SlotExhausted);
    }
    made.push_back(n);
    handles.push_back(*h);
  }
  emit_trace("retype", {{"src", src}, {"count", count}}, Errc::Ok);
  return handles;
}

Result<CapHandle> System::copy_cap(Process& p, CapHandle src,
                                   std::optional<Rights> downgrade,
                                   Process* dest) {
  ++counters_.invocations;
  ++counters_.copies;
  auto rsrc = resolve(p, src);
  if (!rsrc) {
    emit_trace("copy", {{"src", src}}, Errc::LookupFailed);
    return Errc::LookupFailed;
  }
  CapNode* s = *rsrc;
  Rights rights = s->rights;
  if (downgrade.has_value()) {
    rights.read = rights.read && downgrade->read;
    rights.write = rights.write && downgrade->write;
  }
  Process& d = dest != nullptr ? *dest : p;
  CapNode* n = db_.add_copy(s, rights);
  auto h = d.space.insert(n);
  if (!h) {
    db_.remove(n);
    emit_trace("copy", {{"src", src}}, Errc::SlotExhausted);
    return Errc::SlotExhausted;
  }
  emit_trace("copy", {{"src", src}}, Errc::Ok);
  return *h;
}

void System::clear_record(CapNode* owner, std::vector<VirtAddr>& vas) {
  const MappingRecord rec = *owner->mapping;
  const auto more = vas_of_entries(0, rec.table_base, table_level(rec.table_type),
                                   rec.entry, rec.count);
  vas.insert(vas.end(), more.begin(), more.end());
  auto it = pte_owner_.find(rec.table_base);
  for (std::uint32_t k = 0; k < rec.count; ++k) {
    const std::uint16_t e = static_cast<std::uint16_t>(rec.entry + k);
    mem_->write_u64(rec.table_base + 8ull * e, 0);
    if (it != pte_owner_.end()) it->second.erase(e);
  }
  if (it != pte_owner_.end() && it->second.empty()) pte_owner_.erase(it);
  owner->mapping.reset();
}

void System::apply_flush(int core, std::vector<VirtAddr>& vas) {
  if (vas.empty()) return;
  std::sort(vas.begin(), vas.end());
  vas.erase(std::unique(vas.begin(), vas.end()), vas.end());
  tus_[core]->flush_for_mode(vas);
}

void System::destroy_caps(std::vector<CapNode*> doomed,
                          std::vector<VirtAddr>& vas) {
  std::set<CapNode*> doomed_set(doomed.begin(), doomed.end());

  // Phase 1: drop the doomed capabilities' own mappings while the active
  // tree is still intact, so flush addresses can be computed.
  for (CapNode* n : doomed) {
    if (n->mapping.has_value()) clear_record(n, vas);
  }

  // Phase 2: physical table pages losing their last capability take every
  // mapping installed inside them down too.
  std::set<PhysAddr> dead_tables;
  for (CapNode* n : doomed) {
    if (!is_table_type(n->type)) continue;
    bool survivor = false;
    for (CapNode* c : db_.copies_of(n)) {
      if (doomed_set.find(c) == doomed_set.end()) {
        survivor = true;
        break;
      }
    }
    if (!survivor) dead_tables.insert(n->base);
  }
  for (PhysAddr base : dead_tables) {
    auto it = pte_owner_.find(base);
    if (it == pte_owner_.end()) continue;
    std::vector<CapNode*> owners;
    for (const auto& [entry, owner] : it->second) owners.push_back(owner);
    std::sort(owners.begin(), owners.end());
    owners.erase(std::unique(owners.begin(), owners.end()), owners.end());
    for (CapNode* owner : owners) {
      if (owner->mapping.has_value()) clear_record(owner, vas);
    }
  }

  // Phase 3: CNode storage losing its last capability strands the
  // capabilities slotted inside it (they stay live in the DB but become
  // unaddressable).
  for (CapNode* n : doomed) {
    if (n->type != CapType::CNode || n->cnode == nullptr) continue;
    bool survivor = false;
    for (CapNode* c : db_.copies_of(n)) {
      if (doomed_set.find(c) == doomed_set.end()) {
        survivor = true;
        break;
      }
    }
    if (survivor) continue;
    // The slot storage dies with its last capability; everything held in
    // it (doomed or not) loses its address.
    for (CapNode* held : n->cnode->slots) {
      if (held != nullptr) {
        held->holder = nullptr;
        held->space = nullptr;
        held->handle = 0;
      }
    }
  }

  // Phase 4: unlink. Reverse pre-order removes children before parents.
  for (auto it = doomed.rbegin(); it != doomed.rend(); ++it) {
    CapNode* n = *it;
    if (n->space != nullptr) n->space->detach(n);
    db_.remove(n);
  }
}

Result<void> System::delete_cap(Process& p, CapHandle h) {
  ++counters_.invocations;
  ++counters_.deletes;
  auto rn = resolve(p, h);
  if (!rn) {
    emit_trace("delete", {{"cap", h}}, Errc::LookupFailed);
    return Errc::LookupFailed;
  }
  CapNode* n = *rn;
  if (n->type == CapType::CNode && n->cnode != nullptr && n->cnode->used > 0) {
    emit_trace("delete", {{"cap", h}}, Errc::NotEmpty);
    return Errc::NotEmpty;
  }
  std::vector<VirtAddr> vas;
  destroy_caps({n}, vas);
  apply_flush(0, vas);
  emit_trace("delete", {{"cap", h}}, Errc::Ok);
  return {};
}

Result<void> System::revoke(Process& p, CapHandle h) {
  ++counters_.invocations;
  ++counters_.revokes;
  auto rn = resolve(p, h);
  if (!rn) {
    emit_trace("revoke", {{"cap", h}}, Errc::LookupFailed);
    return Errc::LookupFailed;
  }
  CapNode* n = *rn;
  std::vector<CapNode*> doomed;
  db_.collect_descendants(n, doomed);
  for (CapNode* c : db_.copies_of(n)) {
    doomed.push_back(c);
    db_.collect_descendants(c, doomed);
  }
  std::vector<VirtAddr> vas;
  destroy_caps(std::move(doomed), vas);
  apply_flush(0, vas);
  emit_trace("revoke", {{"cap", h}}, Errc::Ok);
  return {};
}

Result<CapView> System::lookup(const Process& p, CapHandle h) const {
  auto rn = resolve(p, h);
  if (!rn) return Errc::LookupFailed;
  const CapNode* n = *rn;
  return CapView{n->type, n->base, n->size, n->rights,
                 n->mapping.has_value()};
}

Result<const CapNode*> System::inspect(const Process& p, CapHandle h) const {
  auto rn = resolve(p, h);
  if (!rn) return Errc::LookupFailed;
  return static_cast<const CapNode*>(*rn);
}

// --- mapping rules ------------------------------------------------------

System::RuleDecision System::mapping_rule(CapType table, CapType arg,
                                          std::uint64_t arg_size,
                                          Rights flags) {
  using K = RuleDecision::Kind;
  RuleDecision deny;
  switch (table) {
    case CapType::Pml4:
      if (arg == CapType::Pdpt && arg_size == kPage4K) {
        return {K::TableMount, PageSize::k4K, 1};
      }
      return deny;
    case CapType::Pdpt:
      if (arg == CapType::Pd && arg_size == kPage4K) {
        return {K::TableMount, PageSize::k4K, 1};
      }
      if (arg == CapType::Frame && arg_size == kPage1G) {
        return {K::Leaf, PageSize::k1G, 1};
      }
      return deny;
    case CapType::Pd:
      if (arg == CapType::Pt && arg_size == kPage4K) {
        return {K::TableMount, PageSize::k4K, 1};
      }
      if (arg == CapType::Frame && arg_size == kPage2M) {
        return {K::Leaf, PageSize::k2M, 1};
      }
      return deny;
    case CapType::Pt:
      if (arg == CapType::Frame && arg_size >= kPage4K) {
        // A frame larger than one page fills consecutive entries.
        return {K::Leaf, PageSize::k4K,
                static_cast<unsigned>(arg_size / kPage4K)};
      }
      if (is_table_type(arg) && arg_size == kPage4K && !flags.write) {
        // Page tables may be mapped as data, read-only.
        return {K::StatusMount, PageSize::k4K, 1};
      }
      return deny;
    default:
      return deny;
  }
}

InvocationResult System::invoke_map(Process& p, CapHandle table,
                                    std::uint32_t start_entry,
                                    std::span<const MapArg> args) {
  ++counters_.invocations;
  ++counters_.maps;
  InvocationResult res;
  auto fail = [&](Errc e) {
    res.status = e;
    emit_trace("map", {{"table", table}, {"start", start_entry},
                       {"args", static_cast<std::int64_t>(args.size())}},
               e);
    return res;
  };

  auto rt = resolve(p, table);
  if (!rt) return fail(Errc::LookupFailed);
  CapNode* t = *rt;
  if (!is_table_type(t->type)) return fail(Errc::RuleViolation);

  // Validate-then-apply: a failing entry leaves table memory untouched.
  struct Planned {
    CapNode* cap;
    RuleDecision rule;
    std::uint32_t entry;
    Rights flags;
  };
  std::vector<Planned> plan;
  std::set<CapNode*> seen;
  std::uint32_t cur = start_entry;
  for (const MapArg& a : args) {
    auto ra = resolve(p, a.cap);
    if (!ra) return fail(Errc::LookupFailed);
    CapNode* c = *ra;
    const RuleDecision rule = mapping_rule(t->type, c->type, c->size, a.flags);
    if (rule.kind == RuleDecision::Kind::Deny) return fail(Errc::RuleViolation);
    if (cur + rule.entry_count > kPtesPerTable) return fail(Errc::InvalidEntry);
    if (c->mapping.has_value() || seen.count(c) > 0) {
      return fail(Errc::AlreadyMapped);
    }
    if (!a.flags.subset_of(c->rights)) return fail(Errc::RightsExceeded);
    for (std::uint32_t k = 0; k < rule.entry_count; ++k) {
      if (mem_->read_u64(t->base + 8ull * (cur + k)) != 0) {
        return fail(Errc::EntryOccupied);
      }
    }
    seen.insert(c);
    plan.push_back({c, rule, cur, a.flags});
    cur += rule.entry_count;
    res.entries.push_back(Errc::Ok);
  }

  for (const Planned& pl : plan) {
    const bool leaf = pl.rule.kind == RuleDecision::Kind::Leaf;
    const bool large = leaf && pl.rule.leaf_size != PageSize::k4K;
    const bool writable =
        pl.rule.kind == RuleDecision::Kind::TableMount ? true : pl.flags.write;
    // Multi-entry frames spread consecutive 4 KiB pages over the entries.
    const std::uint64_t stride = pl.rule.entry_count > 1 ? kPage4K : 0;
    const std::uint64_t page_bytes = leaf ? bytes_of(pl.rule.leaf_size) : 0;
    for (std::uint32_t k = 0; k < pl.rule.entry_count; ++k) {
      const PhysAddr target = pl.cap->base + k * stride;
      if (zero_on_map_ && leaf) {
        mem_->fill(target, stride != 0 ? kPage4K : page_bytes, 0);
      }
      mem_->write_u64(t->base + 8ull * (pl.entry + k),
                      Pte::make(target, writable, large).raw);
      pte_owner_[t->base][static_cast<std::uint16_t>(pl.entry + k)] = pl.cap;
    }
    MappingRecord rec;
    rec.table_base = t->base;
    rec.table_type = t->type;
    rec.entry = static_cast<std::uint16_t>(pl.entry);
    rec.count = static_cast<std::uint16_t>(pl.rule.entry_count);
    rec.flags = pl.flags;
    rec.leaf_size = pl.rule.leaf_size;
    rec.table_mount = pl.rule.kind == RuleDecision::Kind::TableMount;
    rec.status_mount = pl.rule.kind == RuleDecision::Kind::StatusMount;
    pl.cap->mapping = rec;
    counters_.map_entries += pl.rule.entry_count;
  }
  emit_trace("map", {{"table", table}, {"start", start_entry},
                     {"args", static_cast<std::int64_t>(args.size())}},
             Errc::Ok);
  return res;
}

InvocationResult System::invoke_unmap(Process& p, CapHandle table,
                                      std::uint32_t start_entry,
                                      std::uint32_t count) {
  ++counters_.invocations;
  ++counters_.unmaps;
  InvocationResult res;
  auto fail = [&](Errc e) {
    res.status = e;
    emit_trace("unmap",
               {{"table", table}, {"start", start_entry}, {"count", count}},
               e);
    return res;
  };
  auto rt = resolve(p, table);
  if (!rt) return fail(Errc::LookupFailed);
  CapNode* t = *rt;
  if (!is_table_type(t->type)) return fail(Errc::RuleViolation);
  if (start_entry + count > kPtesPerTable || count == 0) {
    return fail(Errc::InvalidEntry);
  }

  std::vector<VirtAddr> vas;
  auto it = pte_owner_.find(t->base);
  std::vector<CapNode*> owners;
  if (it != pte_owner_.end()) {
    for (std::uint32_t e = start_entry; e < start_entry + count; ++e) {
      auto o = it->second.find(static_cast<std::uint16_t>(e));
      if (o != it->second.end()) owners.push_back(o->second);
    }
  }
  std::sort(owners.begin(), owners.end());
  owners.erase(std::unique(owners.begin(), owners.end()), owners.end());
  // A capability spanning several entries is unmapped whole, even when the
  // requested range covers it only partially.
  for (CapNode* owner : owners) {
    if (owner->mapping.has_value()) clear_record(owner, vas);
  }
  counters_.unmap_entries += count;
  apply_flush(0, vas);
  emit_trace("unmap",
             {{"table", table}, {"start", start_entry}, {"count", count}},
             Errc::Ok);
  return res;
}

InvocationResult System::invoke_modify_flags(Process& p, CapHandle table,
                                             std::uint32_t start_entry,
                                             std::uint32_t count,
                                             Rights new_flags) {
  ++counters_.invocations;
  ++counters_.modify_flags;
  if (count > 1) ++counters_.modify_flags_multi;
  InvocationResult res;
  auto fail = [&](Errc e) {
    res.status = e;
    emit_trace("modify_flags",
               {{"table", table}, {"start", start_entry}, {"count", count}},
               e);
    return res;
  };
  auto rt = resolve(p, table);
  if (!rt) return fail(Errc::LookupFailed);
  CapNode* t = *rt;
  if (!is_table_type(t->type)) return fail(Errc::RuleViolation);
  if (start_entry + count > kPtesPerTable || count == 0) {
    return fail(Errc::InvalidEntry);
  }

  auto it = pte_owner_.find(t->base);
  for (std::uint32_t e = start_entry; e < start_entry + count; ++e) {
    const Pte pte{mem_->read_u64(t->base + 8ull * e)};
    if (!pte.present()) return fail(Errc::NotMapped);
    if (it == pte_owner_.end()) return fail(Errc::NotMapped);
    auto o = it->second.find(static_cast<std::uint16_t>(e));
    if (o == it->second.end()) return fail(Errc::NotMapped);
    const CapNode* owner = o->second;
    // Protection applies to data mappings; tree edges and read-only status
    // pages keep their flags.
    if (owner->mapping->table_mount) return fail(Errc::RightsExceeded);
    if (owner->mapping->status_mount && new_flags.write) {
      return fail(Errc::RightsExceeded);
    }
    if (!new_flags.subset_of(owner->rights)) return fail(Errc::RightsExceeded);
  }

  std::vector<VirtAddr> vas =
      vas_of_entries(0, t->base, table_level(t->type), start_entry, count);
  for (std::uint32_t e = start_entry; e < start_entry + count; ++e) {
    Pte pte{mem_->read_u64(t->base + 8ull * e)};
    // Accessed/dirty survive protection changes.
    if (new_flags.write) {
      pte.raw |= Pte::kWritable;
    } else {
      pte.raw &= ~Pte::kWritable;
    }
    mem_->write_u64(t->base + 8ull * e, pte.raw);
  }
  counters_.modify_entries += count;
  apply_flush(0, vas);
  emit_trace("modify_flags",
             {{"table", table}, {"start", start_entry}, {"count", count}},
             Errc::Ok);
  res.entries.assign(count, Errc::Ok);
  return res;
}

InvocationResult System::invoke_clear_dirty_bits(Process& p, CapHandle table,
                                                 std::uint32_t start_entry,
                                                 std::uint32_t count) {
  ++counters_.invocations;
  ++counters_.clear_dirty;
  InvocationResult res;
  auto fail = [&](Errc e) {
    res.status = e;
    emit_trace("clear_dirty",
               {{"table", table}, {"start", start_entry}, {"count", count}},
               e);
    return res;
  };
  auto rt = resolve(p, table);
  if (!rt) return fail(Errc::LookupFailed);
  CapNode* t = *rt;
  if (!is_table_type(t->type)) return fail(Errc::RuleViolation);
  if (start_entry + count > kPtesPerTable || count == 0) {
    return fail(Errc::InvalidEntry);
  }
  for (std::uint32_t e = start_entry; e < start_entry + count; ++e) {
    const Pte pte{mem_->read_u64(t->base + 8ull * e)};
    if (!pte.present()) return fail(Errc::NotMapped);
  }

  std::vector<VirtAddr> vas =
      vas_of_entries(0, t->base, table_level(t->type), start_entry, count);
  for (std::uint32_t e = start_entry; e < start_entry + count; ++e) {
    Pte pte{mem_->read_u64(t->base + 8ull * e)};
    pte.raw &= ~(Pte::kDirty | Pte::kAccessed);
    mem_->write_u64(t->base + 8ull * e, pte.raw);
  }
  counters_.clear_entries += count;
  // A stale cached translation would swallow future dirty-bit updates, so
  // the affected addresses are dropped from the TLB (selectively; a Full
  // override still hits everything).
  if (!vas.empty()) {
    if (tus_[0]->flush_mode() == FlushMode::Full) {
      tus_[0]->flush_full();
    } else {
      std::sort(vas.begin(), vas.end());
      vas.erase(std::unique(vas.begin(), vas.end()), vas.end());
      tus_[0]->flush_selective(vas);
    }
  }
  emit_trace("clear_dirty",
             {{"table", table}, {"start", start_entry}, {"count", count}},
             Errc::Ok);
  res.entries.assign(count, Errc::Ok);
  return res;
}

Result<CapView> System::identify(Process& p, CapHandle h) {
  ++counters_.invocations;
  ++counters_.identifies;
  auto v = lookup(p, h);
  emit_trace("identify", {{"cap", h}}, v.ok() ? Errc::Ok : v.error());
  return v;
}

Result<void> System::install_vroot(Process& p, CapHandle pml4, int core) {
  ++counters_.invocations;
  ++counters_.vroot_installs;
  auto rn = resolve(p, pml4);
  if (!rn) {
    emit_trace("install_vroot", {{"cap", pml4}}, Errc::LookupFailed);
    return Errc::LookupFailed;
  }
  CapNode* n = *rn;
  if (n->type != CapType::Pml4) {
    emit_trace("install_vroot", {{"cap", pml4}}, Errc::WrongType);
    return Errc::WrongType;
  }
  auto r = tus_[core]->set_root(n->base);
  if (!r) {
    emit_trace("install_vroot", {{"cap", pml4}}, r.error());
    return r;
  }
  active_proc_[core] = &p;
  active_root_cap_[core] = n;
  emit_trace("install_vroot", {{"cap", pml4}}, Errc::Ok);
  return {};
}

// --- user data path ------------------------------------------------------

void System::terminate(Process& p, Errc reason) {
  p.terminated = true;
  p.term_reason = reason;
  ++counters_.terminations;
  emit_trace("terminate", {{"proc", p.id}}, reason);
}

Result<std::uint64_t> System::run_user_access(
    Process& p, int core,
    const std::function<std::variant<std::uint64_t, Fault>()>& op) {
  if (p.terminated) return Errc::ProcessTerminated;
  assert((active_proc_[core] == &p || active_proc_[core] == nullptr) &&
         "process not active on this core");
  auto r = op();
  if (!std::holds_alternative<Fault>(r)) return std::get<std::uint64_t>(r);

  const Fault f = std::get<Fault>(r);
  if (!p.handler) {
    terminate(p, Errc::UnhandledFault);
    return Errc::UnhandledFault;
  }
  ++counters_.upcalls;
  emit_trace("upcall",
             {{"va", static_cast<std::int64_t>(f.va)},
              {"write", f.kind == AccessKind::Write ? 1 : 0}},
             Errc::Ok);
  const bool handled = p.handler(f);
  if (!handled) {
    terminate(p, Errc::UnhandledFault);
    return Errc::UnhandledFault;
  }
  // One retry; a second fault at the same spot kills the process.
  auto r2 = op();
  if (std::holds_alternative<Fault>(r2)) {
    terminate(p, Errc::DoubleFault);
    return Errc::DoubleFault;
  }
  return std::get<std::uint64_t>(r2);
}

Result<std::uint64_t> System::user_read(Process& p, VirtAddr va,
                                        unsigned width, int core) {
  return run_user_access(p, core, [&]() {
    PhysAddr pa = 0;
    auto a = tus_[core]->access(va, AccessKind::Read, width, 0, &pa);
    if (!std::holds_alternative<Fault>(a) && cache_tap_ != nullptr) {
      cache_tap_->touch(pa, width);
    }
    return a;
  });
}

Result<void> System::user_write(Process& p, VirtAddr va, std::uint64_t value,
                                unsigned width, int core) {
  auto r = run_user_access(p, core, [&]() {
    PhysAddr pa = 0;
    auto a = tus_[core]->access(va, AccessKind::Write, width, value, &pa);
    if (!std::holds_alternative<Fault>(a) && cache_tap_ != nullptr) {
      cache_tap_->touch(pa, width);
    }
    return a;
  });
  if (!r) return r.error();
  return {};
}

Result<std::uint64_t> System::user_rmw64(
    Process& p, VirtAddr va,
    const std::function<std::uint64_t(std::uint64_t)>& fn, int core) {
  return run_user_access(p, core, [&]() {
    PhysAddr pa = 0;
    auto a = tus_[core]->rmw64(va, fn, &pa);
    if (!std::holds_alternative<Fault>(a) && cache_tap_ != nullptr) {
      cache_tap_->touch(pa, 8);
    }
    return a;
  });
}

// --- oracles -------------------------------------------------------------

std::vector<const CapNode*> System::live_tables() const {
  std::vector<const CapNode*> out;
  std::set<PhysAddr> seen;
  db_.for_each([&](const CapNode& n) {
    if (is_table_type(n.type) && seen.insert(n.base).second) {
      out.push_back(&n);
    }
  });
  std::sort(out.begin(), out.end(),
            [](const CapNode* a, const CapNode* b) { return a->base < b->base; });
  return out;
}

std::vector<PteRecord> System::scan_ptes(PhysAddr lo, PhysAddr hi) const {
  std::vector<PteRecord> out;
  for (const CapNode* t : live_tables()) {
    if (t->base < lo || t->base >= hi) continue;
    for (unsigned e = 0; e < kPtesPerTable; ++e) {
      const Pte pte{mem_->read_u64(t->base + 8ull * e)};
      if (pte.present()) {
        out.push_back({t->base, t->type, static_cast<std::uint16_t>(e), pte});
      }
    }
  }
  return out;
}

std::vector<PteRecord> System::ptes_targeting(PhysAddr lo, PhysAddr hi) const {
  std::vector<PteRecord> out;
  for (const CapNode* t : live_tables()) {
    for (unsigned e = 0; e < kPtesPerTable; ++e) {
      const Pte pte{mem_->read_u64(t->base + 8ull * e)};
      if (!pte.present()) continue;
      PteRecord rec{t->base, t->type, static_cast<std::uint16_t>(e), pte};
      const PhysAddr tb = rec.target_base();
      if (tb < hi && lo < tb + rec.target_size()) out.push_back(rec);
    }
  }
  return out;
}

std::vector<VirtAddr> System::vas_of_entries(int core, PhysAddr table_base,
                                             unsigned table_lvl,
                                             unsigned start,
                                             unsigned count) const {
  std::vector<VirtAddr> out;
  if (tus_.empty() || !tus_[core]->has_root()) return out;
  const PhysAddr root = tus_[core]->root();

  // Collect virtual prefixes at which the table is mounted under the root.
  std::vector<VirtAddr> prefixes;
  std::vector<std::pair<PhysAddr, VirtAddr>> frontier{{root, 0}};
  std::vector<std::pair<PhysAddr, VirtAddr>> next;
  for (unsigned level = 4; level >= 1; --level) {
    for (const auto& [tbl, prefix] : frontier) {
      if (tbl == table_base && level == table_lvl) prefixes.push_back(prefix);
      if (level == 1) continue;
      for (unsigned e = 0; e < kPtesPerTable; ++e) {
        const Pte pte{mem_->read_u64(tbl + 8ull * e)};
        if (!pte.present()) continue;
        if ((level == 3 || level == 2) && pte.large()) continue;
        if (!mem_->contains(pte.addr(), kPage4K)) continue;
        next.emplace_back(pte.addr(), prefix | (static_cast<VirtAddr>(e)
                                                << (12 + 9 * (level - 1))));
      }
    }
    frontier.swap(next);
    next.clear();
  }

  const std::uint64_t span = level_span(table_lvl);
  for (VirtAddr prefix : prefixes) {
    for (unsigned k = 0; k < count; ++k) {
      VirtAddr va = prefix + static_cast<VirtAddr>(start + k) * span;
      if (va & (1ull << 47)) va |= 0xffff000000000000ull;
      out.push_back(va);
    }
  }
  return out;
}

AuditReport System::audit() const {
  AuditReport rep;
  rep.partition_ok = db_.check_partition();
  if (!rep.partition_ok) rep.detail += "partition violated;";
  rep.exclusion_ok = db_.check_type_exclusion();
  if (!rep.exclusion_ok) rep.detail += "frame/structural overlap;";

  // One-PTE rule: present entries and live mapping records must agree
  // one-to-one.
  std::set<std::pair<PhysAddr, std::uint16_t>> claimed;
  bool dup = false;
  bool missing = false;
  db_.for_each([&](const CapNode& n) {
    if (!n.mapping.has_value()) return;
    const MappingRecord& r = *n.mapping;
    for (std::uint32_t k = 0; k < r.count; ++k) {
      const auto key = std::make_pair(r.table_base,
                                      static_cast<std::uint16_t>(r.entry + k));
      if (!claimed.insert(key).second) dup = true;
      const Pte pte{mem_->read_u64(r.table_base + 8ull * (r.entry + k))};
      if (!pte.present()) missing = true;
    }
  });
  std::size_t present = 0;
  for (const CapNode* t : live_tables()) {
    for (unsigned e = 0; e < kPtesPerTable; ++e) {
      const Pte pte{mem_->read_u64(t->base + 8ull * e)};
      if (!pte.present()) continue;
      ++present;
      if (claimed.find({t->base, static_cast<std::uint16_t>(e)}) ==
          claimed.end()) {
        missing = true;
      }
    }
  }
  rep.one_pte_ok = !dup && !missing && present == claimed.size();
  if (!rep.one_pte_ok) rep.detail += "one-pte rule violated;";
  return rep;
}

AuthoritySet System::authorized_for(const Process& p) const {
  AuthoritySet out;
  for (const CapNode* n : p.space.reachable()) {
    if (n->type == CapType::Frame) {
      if (n->rights.read) out.readable.emplace_back(n->base, n->end());
      if (n->rights.write) out.writable.emplace_back(n->base, n->end());
    } else if (is_table_type(n->type) && n->rights.read) {
      // Table pages are readable authority (read-only status mappings).
      out.readable.emplace_back(n->base, n->end());
    }
  }
  return out;
}

}  // namespace cichlid
