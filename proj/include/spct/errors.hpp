#pragma once

#include <stdexcept>
#include <string>

namespace spct {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shape or rank mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid argument value (bad probability, negative pace, ...).
struct ValueError : Error {
  using Error::Error;
};

/// File format / IO failure. Messages name the byte offset where known.
struct IoError : Error {
  using Error::Error;
};

/// NaN-guard violation: a non-finite value reached an op that requires
/// finite input, or a log saw a non-clamped zero.
struct NanError : Error {
  using Error::Error;
};

/// Training aborted on a non-finite loss. Carries the iteration index and
/// the last finite loss values for diagnosis.
struct TrainAbort : Error {
  TrainAbort(std::string msg, int epoch_, int iter_, double last_sup_,
             double last_spc_, double last_reg_)
      : Error(std::move(msg)),
        epoch(epoch_),
        iter(iter_),
        last_sup(last_sup_),
        last_spc(last_spc_),
        last_reg(last_reg_) {}
  int epoch;
  int iter;
  double last_sup;
  double last_spc;
  double last_reg;
};

}  // namespace spct
