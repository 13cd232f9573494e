#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cichlid/result.hpp"

namespace cichlid {

// Flat view of every simulator counter, used for trace deltas and reports.
using CounterMap = std::vector<std::pair<std::string, std::uint64_t>>;

struct TraceRecord {
  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::pair<std::string, std::int64_t>> args;
  Errc status = Errc::Ok;
  CounterMap deltas;  // nonzero counter movement since the previous record
};

// JSON-lines invocation log: one record per capability invocation plus
// upcall and checkpoint markers. Counter movement between records is
// attributed to the record that closes the gap.
class TraceLog {
 public:
  void enable(bool keep_in_memory = true) {
    enabled_ = true;
    keep_ = keep_in_memory;
  }
  bool enabled() const { return enabled_; }

  Result<void> open_file(const std::string& path);
  void close();

  void record(const std::string& op,
              std::vector<std::pair<std::string, std::int64_t>> args,
              Errc status, const CounterMap& now);

  const std::vector<TraceRecord>& records() const { return records_; }
  void clear() {
    records_.clear();
    last_.clear();
  }

  // Sums every delta seen so far for the named counter.
  std::uint64_t total(const std::string& counter) const;
  std::uint64_t count_ops(const std::string& op) const;

 private:
  bool enabled_ = false;
  bool keep_ = true;
  std::uint64_t seq_ = 0;
  std::map<std::string, std::uint64_t> last_;
  std::vector<TraceRecord> records_;
  std::ofstream file_;
};

}  // namespace cichlid
