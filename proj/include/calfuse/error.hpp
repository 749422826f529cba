#pragma once

#include <stdexcept>
#include <string>

namespace calfuse {

/// Raised for malformed inputs, violated preconditions and invalid
/// configurations. Messages name the offending id or line.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace calfuse
