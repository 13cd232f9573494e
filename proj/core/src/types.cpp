#include "cichlid/types.hpp"

namespace cichlid {

const char* to_string(PageSize ps) {
  switch (ps) {
    case PageSize::k4K: return "4k";
    case PageSize::k2M: return "2m";
    case PageSize::k1G: return "1g";
  }
  return "?";
}

const char* to_string(Errc e) {
  switch (e) {
    case Errc::Ok: return "ok";
    case Errc::InvalidSize: return "invalid_size";
    case Errc::DisallowedTransition: return "disallowed_transition";
    case Errc::HasConflictingDescendants: return "has_conflicting_descendants";
    case Errc::SlotExhausted: return "slot_exhausted";
    case Errc::LookupFailed: return "lookup_failed";
    case Errc::NotEmpty: return "not_empty";
    case Errc::RuleViolation: return "rule_violation";
    case Errc::AlreadyMapped: return "already_mapped";
    case Errc::EntryOccupied: return "entry_occupied";
    case Errc::RightsExceeded: return "rights_exceeded";
    case Errc::InvalidEntry: return "invalid_entry";
    case Errc::NotMapped: return "not_mapped";
    case Errc::WrongType: return "wrong_type";
    case Errc::InvalidRoot: return "invalid_root";
    case Errc::OutOfMemory: return "out_of_memory";
    case Errc::InvalidAttr: return "invalid_attr";
    case Errc::StillMapped: return "still_mapped";
    case Errc::HasDescendants: return "has_descendants";
    case Errc::OutOfVA: return "out_of_va";
    case Errc::UnknownRegion: return "unknown_region";
    case Errc::NoFrames: return "no_frames";
    case Errc::StoreFull: return "store_full";
    case Errc::UnhandledFault: return "unhandled_fault";
    case Errc::DoubleFault: return "double_fault";
    case Errc::ProcessTerminated: return "process_terminated";
    case Errc::InvalidArgument: return "invalid_argument";
  }
  return "?";
}

const char* to_string(FaultCause c) {
  switch (c) {
    case FaultCause::NotPresent: return "not-present";
    case FaultCause::WriteToReadonly: return "write-to-readonly";
    case FaultCause::NoTranslationRoot: return "no-translation-root";
  }
  return "?";
}

}  // namespace cichlid
