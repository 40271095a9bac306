#pragma once

#include <stdexcept>
#include <string>

namespace gridner {

// Base error. The CLI maps ConfigError/DataError/IoError to exit code 2
// (usage/config/data) and everything else to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace gridner
