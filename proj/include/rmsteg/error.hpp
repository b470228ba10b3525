#pragma once

#include <stdexcept>
#include <string>

namespace rmsteg {

// Base of every error the library raises. Decode failures are values, not errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define RMSTEG_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

RMSTEG_DEFINE_ERROR(CapacityExceeded);
RMSTEG_DEFINE_ERROR(UnsupportedVersion);
RMSTEG_DEFINE_ERROR(ShapeMismatch);
RMSTEG_DEFINE_ERROR(SingularMatrix);
RMSTEG_DEFINE_ERROR(NonFiniteValue);
RMSTEG_DEFINE_ERROR(NonFiniteLoss);
RMSTEG_DEFINE_ERROR(FormatError);
RMSTEG_DEFINE_ERROR(EmptyDataset);
RMSTEG_DEFINE_ERROR(ConfigError);

#undef RMSTEG_DEFINE_ERROR

}  // namespace rmsteg
