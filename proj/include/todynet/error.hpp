#pragma once

#include <stdexcept>
#include <string>

namespace todynet {

enum class ErrorKind {
    kIo,
    kParse,
    kConfig,
    kData,
    kShape,
    kContract,
    kRuntime,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_io(std::string msg) { throw Error(ErrorKind::kIo, std::move(msg)); }
[[noreturn]] inline void throw_parse(std::string msg) { throw Error(ErrorKind::kParse, std::move(msg)); }
[[noreturn]] inline void throw_config(std::string msg) { throw Error(ErrorKind::kConfig, std::move(msg)); }
[[noreturn]] inline void throw_data(std::string msg) { throw Error(ErrorKind::kData, std::move(msg)); }
[[noreturn]] inline void throw_shape(std::string msg) { throw Error(ErrorKind::kShape, std::move(msg)); }
[[noreturn]] inline void throw_contract(std::string msg) { throw Error(ErrorKind::kContract, std::move(msg)); }
[[noreturn]] inline void throw_runtime(std::string msg) { throw Error(ErrorKind::kRuntime, std::move(msg)); }

}  // namespace todynet
