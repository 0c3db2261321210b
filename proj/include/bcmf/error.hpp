#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bcmf {

enum class ErrorKind {
    shape,       // extents or ranks do not fit the operation
    domain,      // argument outside its valid range
    non_finite,  // NaN or Inf produced or consumed
    state,       // object used before it is ready (e.g. empty tape)
    io,          // file could not be opened, read or written
    format,      // file contents malformed
    config,      // configuration invalid or inconsistent
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::domain: return "domain";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::state: return "state";
        case ErrorKind::io: return "io";
        case ErrorKind::format: return "format";
        case ErrorKind::config: return "config";
    }
    return "unknown";
}

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace bcmf
