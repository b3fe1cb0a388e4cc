#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace beamtime {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BEAMTIME_DEFINE_ERROR(Name)  \
  class Name : public Error {        \
   public:                           \
    using Error::Error;              \
  }

BEAMTIME_DEFINE_ERROR(PastEvent);
BEAMTIME_DEFINE_ERROR(InvalidDistribution);
BEAMTIME_DEFINE_ERROR(UnknownTopic);
BEAMTIME_DEFINE_ERROR(FacilityBusy);
BEAMTIME_DEFINE_ERROR(UnknownRun);
BEAMTIME_DEFINE_ERROR(InvalidState);
BEAMTIME_DEFINE_ERROR(DestinationUnavailable);
BEAMTIME_DEFINE_ERROR(ValidationError);
BEAMTIME_DEFINE_ERROR(SchemaViolation);
BEAMTIME_DEFINE_ERROR(UnknownDataset);
BEAMTIME_DEFINE_ERROR(UnknownTrial);
BEAMTIME_DEFINE_ERROR(EmptyExpression);
BEAMTIME_DEFINE_ERROR(TrialFrozen);
BEAMTIME_DEFINE_ERROR(CapacityExceeded);
BEAMTIME_DEFINE_ERROR(UnknownReservation);
BEAMTIME_DEFINE_ERROR(NodesExceedPool);
BEAMTIME_DEFINE_ERROR(UnknownJob);
BEAMTIME_DEFINE_ERROR(ProfileInvalid);
BEAMTIME_DEFINE_ERROR(StoreUnavailable);
BEAMTIME_DEFINE_ERROR(DuplicateRecord);
BEAMTIME_DEFINE_ERROR(EmptyResult);

#undef BEAMTIME_DEFINE_ERROR

/// Scenario configuration error; `pointer` is a JSON pointer to the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string pointer, const std::string& message)
      : Error(pointer + ": " + message), pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

class CorruptLog : public Error {
 public:
  CorruptLog(std::size_t line, const std::string& message)
      : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace beamtime
