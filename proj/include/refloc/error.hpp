#pragma once

#include <stdexcept>
#include <string>

namespace refloc {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  ok = 0,
  failure = 1,
  validation = 2,
  stage_order = 3,
  io = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Malformed input: bad annotation, bad config, contract violation on data.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ExitCode::validation, what) {}
};

// A pipeline stage was requested before the stage it depends on.
class StageOrderError : public Error {
 public:
  explicit StageOrderError(const std::string& what)
      : Error(ExitCode::stage_order, what) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(ExitCode::io, path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what)
      : Error(ExitCode::failure, what) {}
};

}  // namespace refloc
