#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace m3pt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error hierarchy. The CLI maps each family onto a stable exit code:
// IoError -> 1, InvalidArgument/ConfigError/MissingArtifact -> 2,
// NumericalError -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class MissingArtifact : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const std::string& message) {
    if (!cond) throw InvalidArgument(message);
}

}  // namespace m3pt
