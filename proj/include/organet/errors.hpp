#pragma once

#include <stdexcept>
#include <string>

namespace organet {

/// Invalid or inconsistent configuration (model geometry, loss weights, run config).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Problems reading or validating input data.
class DataError : public std::runtime_error {
public:
    enum class Kind { MissingFile, Undecodable, ShapeMismatch, EmptyDataset, Format };

    DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Non-finite values during optimization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace organet
