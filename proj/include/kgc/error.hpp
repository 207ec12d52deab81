#pragma once

#include <stdexcept>
#include <string>

namespace kgc {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config_error -> 2, parse/integrity -> 3, numeric_error -> 4.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct index_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct integrity_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kgc
