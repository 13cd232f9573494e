#include "cichlid/trace.hpp"

#include <nlohmann/json.hpp>

namespace cichlid {

Result<void> TraceLog::open_file(const std::string& path) {
  file_.open(path, std::ios::trunc);
  if (!file_) return Errc::InvalidArgument;
  enabled_ = true;
  return {};
}

void TraceLog::close() {
  if (file_.is_open()) file_.close();
}

void TraceLog::record(const std::string& op,
                      std::vector<std::pair<std::string, std::int64_t>> args,
                      Errc status, const CounterMap& now) {
  if (!enabled_) return;
  TraceRecord r;
  r.seq = seq_++;
  r.op = op;
  r.args = std::move(args);
  r.status = status;
  for (const auto& [name, value] : now) {
    const auto prev = last_.count(name) ? last_[name] : 0;
    if (value != prev) r.deltas.emplace_back(name, value - prev);
    last_[name] = value;
  }
  if (file_.is_open()) {
    nlohmann::json j;
    j["seq"] = r.seq;
    j["op"] = r.op;
    j["status"] = to_string(r.status);
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [k, v] : r.args) a[k] = v;
    j["args"] = a;
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [k, v] : r.deltas) d[k] = v;
    j["delta"] = d;
    file_ << j.dump() << '\n';
  }
  if (keep_) records_.push_back(std::move(r));
}

std::uint64_t TraceLog::total(const std::string& counter) const {
  std::uint64_t t = 0;
  for (const auto& r : records_) {
    for (const auto& [k, v] : r.deltas) {
      if (k == counter) t += v;
    }
  }
  return t;
}

std::uint64_t TraceLog::count_ops(const std::string& op) const {
  std::uint64_t t = 0;
  for (const auto& r : records_) {
    if (r.op == op) ++t;
  }
  return t;
}

}  // namespace cichlid
