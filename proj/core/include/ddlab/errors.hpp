#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ddlab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A scalar argument outside its admissible range (temperature, epsilon, timestep...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// An integer index (class label, block index) out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// Input data violating a documented invariant (non-normalized rows, empty splits...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// API misuse: backward on a non-scalar, optimizer step without gradients.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Malformed on-disk data. Carries the byte offset at which parsing failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Loading a checkpoint whose entries do not match the receiving model.
class CheckpointMismatchError : public Error {
public:
    using Error::Error;
};

}  // namespace ddlab
