#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace atas {

// Every failure carries a short machine-parseable category; the CLI prints
// "error: <category>: <message>" and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct ParameterError : Error {
    explicit ParameterError(const std::string& m) : Error("parameter", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error("contract", m) {}
};

// Zero-norm vectors feeding cosine similarity and friends.
struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& m) : Error("degenerate_input", m) {}
};

struct GenerationError : Error {
    explicit GenerationError(const std::string& m) : Error("generation", m) {}
};

struct MetricUndefinedError : Error {
    explicit MetricUndefinedError(const std::string& m) : Error("metric_undefined", m) {}
};

struct DivergenceError : Error {
    explicit DivergenceError(const std::string& m) : Error("divergence", m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

} // namespace atas
