#pragma once

#include <stdexcept>
#include <string>

namespace conealign {

// Root of every error the library throws. The CLI maps subclasses of
// UsageError to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ManifestError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int last_finite_epoch)
        : Error(what), last_finite_epoch_(last_finite_epoch) {}

    // -1 when no epoch finished with a finite loss.
    int last_finite_epoch() const noexcept { return last_finite_epoch_; }

private:
    int last_finite_epoch_;
};

class SingularError : public Error {
public:
    using Error::Error;
};

} // namespace conealign
