#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace branchlab {

// Raised when a computation produces NaN/Inf. `index` is the offending
// coordinate (finite differences) or step (training), or npos when unknown.
class NonFiniteError : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  NonFiniteError(const std::string& what, std::size_t index = npos)
      : std::runtime_error(what), index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

// Training blew up. Carries the step at which the loss stopped being finite.
class DivergenceError : public NonFiniteError {
 public:
  DivergenceError(std::size_t step)
      : NonFiniteError("non-finite loss at step " + std::to_string(step), step) {}

  std::size_t step() const noexcept { return index(); }
};

// Two routes that must agree (e.g. factorized vs. direct gradient) did not.
class ConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace branchlab
