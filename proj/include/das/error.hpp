#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace das {

enum class Errc {
  invalid_argument,
  non_finite,
  io,
  bad_magic,
  unsupported_version,
  bad_header,
  truncated,
  size_mismatch,
  unknown_label,
  shortfall,
  shape_mismatch,
  config_mismatch,
  no_forward_state,
  replica_divergence,
};

std::string_view errc_name(Errc code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(Errc::invalid_argument, what);
}

}  // namespace das
