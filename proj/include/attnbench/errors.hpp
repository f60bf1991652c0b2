#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attnbench {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset could not be read or a record is unusable. `line` is 1-based, 0 when
// the failure is not tied to a record.
class IngestError : public Error {
 public:
  IngestError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ArrangeError : public Error {
 public:
  using Error::Error;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

class PromptError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

// Backend failures.
class TransportError : public Error {
 public:
  using Error::Error;
};

class HttpStatusError : public Error {
 public:
  HttpStatusError(int status, const std::string& body)
      : Error("HTTP " + std::to_string(status) + ": " + body), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& field, const std::string& detail)
      : Error("malformed response: " + field + " " + detail), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ResumeError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

class TraceError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnbench
