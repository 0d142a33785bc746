#pragma once

#include <stdexcept>
#include <string>

namespace icx {

/// Base for every error raised by the harness.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid dataset contents or layout.
class CorpusError : public Error {
 public:
  using Error::Error;
};

/// A prompt cannot be materialized (e.g. the query alone overflows the budget).
class PromptError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a backend or scorer: wrong family, bad coverage, bad template.
class ScoringError : public Error {
 public:
  using Error::Error;
};

/// Transport-level failure (connection refused, timeout) after retries.
class NetworkError : public Error {
 public:
  using Error::Error;
};

/// The server answered, but not in the shape the wire protocol requires.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// The server answered with an error status and body.
class ServerError : public Error {
 public:
  ServerError(int status, std::string code, const std::string& message)
      : Error("server error " + std::to_string(status) + " [" + code + "]: " + message),
        status_(status),
        code_(std::move(code)) {}

  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

/// Bad configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace icx
