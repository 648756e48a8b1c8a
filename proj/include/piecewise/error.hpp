#pragma once

#include <stdexcept>
#include <string>

namespace piecewise {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was not met by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Operand shapes are inconsistent with a graph primitive.
class ShapeError : public Error {
 public:
  ShapeError(std::string node, const std::string& what)
      : Error("shape mismatch at node '" + node + "': " + what), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

/// A forward value became NaN or infinite.
class OverflowError : public Error {
 public:
  explicit OverflowError(std::string node)
      : Error("non-finite value produced at node '" + node + "'"), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

/// Malformed input file. `offset` is the byte offset where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t offset, const std::string& what)
      : Error(path + " @ byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace piecewise
