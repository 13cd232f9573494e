#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cichlid/caps.hpp"
#include "cichlid/machine.hpp"
#include "cichlid/phys_mem.hpp"
#include "cichlid/trace.hpp"
#include "cichlid/translate.hpp"
#include "cichlid/types.hpp"

namespace cichlid {

struct CapView {
  CapType type = CapType::Untyped;
  PhysAddr base = 0;
  std::uint64_t size = 0;
  Rights rights = Rights::rw();
  bool mapped = false;
};

struct InvocationResult {
  Errc status = Errc::Ok;
  std::vector<Errc> entries;  // per-arg outcomes for batched calls
  bool ok() const { return status == Errc::Ok; }
};

struct MapArg {
  CapHandle cap = 0;
  Rights flags = Rights::rw();
};

struct PteRecord {
  PhysAddr table_base = 0;
  CapType table_type = CapType::Pt;
  std::uint16_t entry = 0;
  Pte pte;

  // Physical span the entry points at.
  PhysAddr target_base() const { return pte.addr(); }
  std::uint64_t target_size() const;
};

struct KernelCounters {
  std::uint64_t invocations = 0;
  std::uint64_t retypes = 0;
  std::uint64_t copies = 0;
  std::uint64_t deletes = 0;
  std::uint64_t revokes = 0;
  std::uint64_t maps = 0;
  std::uint64_t unmaps = 0;
  std::uint64_t modify_flags = 0;
  std::uint64_t modify_flags_multi = 0;  // batched protect (count > 1)
  std::uint64_t clear_dirty = 0;
  std::uint64_t identifies = 0;
  std::uint64_t vroot_installs = 0;
  std::uint64_t map_entries = 0;
  std::uint64_t unmap_entries = 0;
  std::uint64_t modify_entries = 0;
  std::uint64_t clear_entries = 0;
  std::uint64_t upcalls = 0;
  std::uint64_t terminations = 0;
};

class System;

using FaultHandler = std::function<bool(const Fault&)>;

struct Process {
  int id = 0;
  CapSpace space;
  FaultHandler handler;
  bool terminated = false;
  Errc term_reason = Errc::Ok;
};

// Callback for last-level-cache accounting of successful data accesses.
class CacheTap {
 public:
  virtual void touch(PhysAddr pa, unsigned bytes) = 0;

 protected:
  ~CacheTap() = default;
};

struct AuditReport {
  bool partition_ok = true;
  bool exclusion_ok = true;
  bool one_pte_ok = true;
  std::string detail;

  bool ok() const { return partition_ok && exclusion_ok && one_pte_ok; }
};

// Authority recomputed from a capability space; used by safety auditors.
struct AuthoritySet {
  std::vector<std::pair<PhysAddr, PhysAddr>> readable;
  std::vector<std::pair<PhysAddr, PhysAddr>> writable;

  bool allows(PhysAddr pa, unsigned bytes, AccessKind kind) const;
};

// The emulated machine plus its capability kernel: physical memory, one
// translation unit per core, the derivation database, per-process
// capability spaces, and the invocation set operating on page-table memory.
// Single-threaded; a System may be moved between threads but not shared.
class System {
 public:
  explicit System(MachineModel machine);
  ~System();

  System(const System&) = delete;
  System& operator=(const System&) = delete;

  // Creates physical memory as one Untyped capability held by process 0.
  // total_bytes == 0 uses the machine model's memory size; a nonzero value
  // rescales the model's node spans.
  Result<CapHandle> bootstrap(std::uint64_t total_bytes = 0);

  Process& create_process();
  Process& proc(int id) { return *procs_[id]; }
  int num_procs() const { return static_cast<int>(procs_.size()); }
  CapHandle root_untyped() const { return root_untyped_handle_; }

  PhysMem& mem() { return *mem_; }
  const PhysMem& mem() const { return *mem_; }
  TranslationUnit& tu(int core = 0) { return *tus_[core]; }
  const MachineModel& machine() const { return machine_; }
  DerivationDb& db() { return db_; }
  const DerivationDb& db() const { return db_; }
  TraceLog& trace() { return trace_; }
  KernelCounters& counters() { return counters_; }
  const KernelCounters& counters() const { return counters_; }

  CounterMap counter_map() const;
  void trace_checkpoint(const std::string& label);

  void set_zero_on_map(bool z) { zero_on_map_ = z; }
  void set_cache_tap(CacheTap* tap) { cache_tap_ = tap; }

  // --- capability operations -------------------------------------------
  Result<std::vector<CapHandle>> retype(Process& p, CapHandle src,
                                        CapType target, std::uint64_t obj_size,
                                        std::uint32_t count,
                                        Process* dest = nullptr);
  Result<CapHandle> copy_cap(Process& p, CapHandle src,
                             std::optional<Rights> downgrade = std::nullopt,
                             Process* dest = nullptr);
  Result<void> delete_cap(Process& p, CapHandle h);
  Result<void> revoke(Process& p, CapHandle h);
  Result<CapView> lookup(const Process& p, CapHandle h) const;
  // Read-only view of the underlying node, for service bookkeeping and
  // test oracles.
  Result<const CapNode*> inspect(const Process& p, CapHandle h) const;

  // --- kernel invocations ----------------------------------------------
  InvocationResult invoke_map(Process& p, CapHandle table,
                              std::uint32_t start_entry,
                              std::span<const MapArg> args);
  InvocationResult invoke_unmap(Process& p, CapHandle table,
                                std::uint32_t start_entry,
                                std::uint32_t count);
  InvocationResult invoke_modify_flags(Process& p, CapHandle table,
                                       std::uint32_t start_entry,
                                       std::uint32_t count, Rights new_flags);
  InvocationResult invoke_clear_dirty_bits(Process& p, CapHandle table,
                                           std::uint32_t start_entry,
                                           std::uint32_t count);
  Result<CapView> identify(Process& p, CapHandle h);
  Result<void> install_vroot(Process& p, CapHandle pml4, int core = 0);

  Process* active_process(int core = 0) { return active_proc_[core]; }

  // --- user data path (fault reflection + one retry) --------------------
  Result<std::uint64_t> user_read(Process& p, VirtAddr va, unsigned width,
                                  int core = 0);
  Result<void> user_write(Process& p, VirtAddr va, std::uint64_t value,
                          unsigned width, int core = 0);
  Result<std::uint64_t> user_rmw64(
      Process& p, VirtAddr va,
      const std::function<std::uint64_t(std::uint64_t)>& fn, int core = 0);

  // --- oracles and audits ------------------------------------------------
  // Present entries of live page tables located inside [lo, hi).
  std::vector<PteRecord> scan_ptes(PhysAddr lo, PhysAddr hi) const;
  // Present entries of any live table whose target intersects [lo, hi).
  std::vector<PteRecord> ptes_targeting(PhysAddr lo, PhysAddr hi) const;

  AuditReport audit() const;
  AuthoritySet authorized_for(const Process& p) const;

  // One virtual address per page covered by the given entries under the
  // core's active translation root (empty when unreachable).
  std::vector<VirtAddr> vas_of_entries(int core, PhysAddr table_base,
                                       unsigned table_lvl, unsigned start,
                                       unsigned count) const;

 private:
  struct RuleDecision {
    enum class Kind : std::uint8_t { Deny, Leaf, TableMount, StatusMount };
    Kind kind = Kind::Deny;
    PageSize leaf_size = PageSize::k4K;
    unsigned entry_count = 1;
  };
  static RuleDecision mapping_rule(CapType table, CapType arg,
                                   std::uint64_t arg_size, Rights flags);

  Result<CapNode*> resolve(const Process& p, CapHandle h) const;
  void clear_record(CapNode* owner, std::vector<VirtAddr>& vas);
  void destroy_caps(std::vector<CapNode*> doomed,
                    std::vector<VirtAddr>& vas);
  void apply_flush(int core, std::vector<VirtAddr>& vas);
  void terminate(Process& p, Errc reason);
  Result<std::uint64_t> run_user_access(
      Process& p, int core,
      const std::function<std::variant<std::uint64_t, Fault>()>& op);
  void emit_trace(const char* op,
                  std::vector<std::pair<std::string, std::int64_t>> args,
                  Errc status);
  // Live table capabilities deduplicated by physical page.
  std::vector<const CapNode*> live_tables() const;

  MachineModel machine_;
  std::optional<PhysMem> mem_;
  std::vector<std::unique_ptr<TranslationUnit>> tus_;
  DerivationDb db_;
  std::vector<std::unique_ptr<Process>> procs_;
  CapHandle root_untyped_handle_ = 0;
  // entry -> owning capability per physical table page
  std::unordered_map<PhysAddr, std::map<std::uint16_t, CapNode*>> pte_owner_;
  std::vector<Process*> active_proc_;
  std::vector<CapNode*> active_root_cap_;
  KernelCounters counters_;
  TraceLog trace_;
  bool zero_on_map_ = false;
  CacheTap* cache_tap_ = nullptr;
};

}  // namespace cichlid
