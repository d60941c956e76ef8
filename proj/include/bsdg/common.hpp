#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace bsdg {

// Programming errors: shape mismatches, tape misuse, broken preconditions.
struct contract_violation : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad user-supplied configuration (unknown keys, out-of-range values, ...).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input file. Carries the byte offset where parsing gave up.
struct parse_error : std::runtime_error {
  std::size_t offset;
  parse_error(const std::string& msg, std::size_t off)
      : std::runtime_error(msg + " (byte offset " + std::to_string(off) + ")"),
        offset(off) {}
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Runtime failures during optimization (non-finite loss and friends).
struct training_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw contract_violation(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw contract_violation(msg);
}

}  // namespace detail

}  // namespace bsdg
