#ifndef BILEVEL_ERRORS_HPP
#define BILEVEL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace bilevel {

/// Invalid configuration or argument (CLI exit code 2).
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Numerical failure at run time: non-SPD system, NaN state, ... (CLI exit code 3).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bilevel

#endif
