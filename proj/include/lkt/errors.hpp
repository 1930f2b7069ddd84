// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lkt {

/// Bad user input: malformed files, invalid flags, missing paths. The CLI maps
/// this to exit code 1; everything else is a runtime failure (exit code 2).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class OutOfVocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

}  // namespace lkt
