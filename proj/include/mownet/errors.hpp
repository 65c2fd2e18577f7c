#pragma once

#include <stdexcept>
#include <string>

namespace mownet {

// Violated precondition of a library call.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Operand shapes that cannot be combined by a primitive.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// A class holds fewer eligible samples than a meta ordinal set needs.
class CapacityError : public std::runtime_error {
 public:
  CapacityError(const std::string& what, int cls)
      : std::runtime_error(what), cls_(cls) {}
  int class_index() const noexcept { return cls_; }

 private:
  int cls_;
};

// Malformed dataset or checkpoint bytes.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite values or a failed numerical cross-check.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mownet
