#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace collab {

using UserId = std::size_t;
using ItemId = std::size_t;
using TypeId = std::size_t;
/// 1-based round index over the horizon.
using Round = std::size_t;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model / hyper-parameter / operation precondition.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Recommender state inconsistent with the request (e.g. user outside P0).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A user (or the active set) ran out of fresh items.
class ExhaustionError : public Error {
 public:
  using Error::Error;
};

/// Metric requested for an environment that cannot provide it.
class UnsupportedMetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Configuration schema violation; message carries the offending path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace collab
