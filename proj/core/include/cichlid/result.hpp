#pragma once

#include <cassert>
#include <utility>
#include <variant>

#include "cichlid/types.hpp"

namespace cichlid {

// Minimal expected-style wrapper used by every fallible kernel and library
// entry point. Errc::Ok is never a valid error payload.
template <typename T>
class Result {
 public:
  Result(T value) : v_(std::move(value)) {}
  Result(Errc e) : v_(e) { assert(e != Errc::Ok); }

  bool ok() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return ok(); }

  Errc error() const { return ok() ? Errc::Ok : std::get<Errc>(v_); }

  T& value() {
    assert(ok());
    return std::get<T>(v_);
  }
  const T& value() const {
    assert(ok());
    return std::get<T>(v_);
  }
  T& operator*() { return value(); }
  const T& operator*() const { return value(); }
  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }

 private:
  std::variant<T, Errc> v_;
};

template <>
class Result<void> {
 public:
  Result() : e_(Errc::Ok) {}
  Result(Errc e) : e_(e) {}

  bool ok() const { return e_ == Errc::Ok; }
  explicit operator bool() const { return ok(); }
  Errc error() const { return e_; }

 private:
  Errc e_;
};

}  // namespace cichlid
