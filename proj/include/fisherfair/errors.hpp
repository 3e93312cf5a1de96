#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fisherfair {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An instance document violates a model invariant. The message names it.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A cut was asked for more utility than the rest of the segment holds.
class UnreachableUtility : public Error {
 public:
  using Error::Error;
};

/// A cut was asked for positive utility from a piece that is identically zero.
class DegeneratePiece : public Error {
 public:
  using Error::Error;
};

/// Utility prices outside the domain of the dual objective.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A utility vector handed to the partition routine is not attainable.
class InfeasibleUtilities : public Error {
 public:
  using Error::Error;
};

/// The ellipsoid shape matrix lost positive definiteness.
class NumericalBreakdown : public Error {
 public:
  using Error::Error;
};

/// An iterative method hit its iteration cap. Carries the best iterate seen.
template <class Result>
class NotConverged : public Error {
 public:
  NotConverged(const std::string& what, Result best, double gap)
      : Error(what), best_(std::move(best)), gap_(gap) {}

  const Result& best() const noexcept { return best_; }
  double gap() const noexcept { return gap_; }

 private:
  Result best_;
  double gap_;
};

}  // namespace fisherfair
