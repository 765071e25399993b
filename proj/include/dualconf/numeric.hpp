#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <system_error>

namespace dualconf {

// One formula for every t: each step (exp, add, divide) is monotone under
// round-to-nearest, so the result is nondecreasing in t. Overflow of exp(-t)
// yields exactly 0.
inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// ln(1 + e^x) without overflow.
inline double softplus(double x) {
    if (x > 0.0) {
        return x + std::log1p(std::exp(-x));
    }
    return std::log1p(std::exp(x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc{}) {
        return "nan";
    }
    return std::string(buf, res.ptr);
}

} // namespace dualconf
