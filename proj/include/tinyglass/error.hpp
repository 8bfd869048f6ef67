// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tinyglass {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated an operation's precondition (shapes, ranges, configs).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN/Inf or otherwise left the representable domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or decoding failure.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

[[noreturn]] inline void contract_fail(const std::string& what) { throw ContractError(what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) contract_fail(what);
}

}  // namespace detail
}  // namespace tinyglass
