#pragma once

#include <stdexcept>
#include <string>

namespace stemfold {

enum class ErrorKind {
  kInvalidArgument,
  kNumericalOverflow,
  kSimulationDiverged,
  kAgentUnobservable,
  kTrainingDiverged,
  kData,
  kFingerprint,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::kInvalidArgument, what) {}
};

// Raised when a state leaves the finite range; carries the offending step.
class NumericalOverflow : public Error {
 public:
  NumericalOverflow(const std::string& what, long step)
      : Error(ErrorKind::kNumericalOverflow, what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class SimulationDiverged : public Error {
 public:
  explicit SimulationDiverged(long step)
      : Error(ErrorKind::kSimulationDiverged,
              "simulation diverged at raw step " + std::to_string(step)),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class AgentUnobservable : public Error {
 public:
  explicit AgentUnobservable(int agent)
      : Error(ErrorKind::kAgentUnobservable,
              "agent " + std::to_string(agent) + " has no observations in the encoder window"),
        agent_(agent) {}
  int agent() const noexcept { return agent_; }

 private:
  int agent_;
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(const std::string& what, long step = -1)
      : Error(ErrorKind::kTrainingDiverged,
              step >= 0 ? what + " at step " + std::to_string(step) : what),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

class FingerprintError : public Error {
 public:
  explicit FingerprintError(const std::string& what) : Error(ErrorKind::kFingerprint, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

}  // namespace stemfold
