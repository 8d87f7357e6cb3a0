// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace refusion {

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A referenced file or directory does not exist (CLI exit code 3).
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or sampling produced non-finite values (CLI exit code 4).
class Divergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace refusion
