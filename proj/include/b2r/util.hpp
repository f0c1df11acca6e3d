#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace b2r {

namespace detail {

inline void str_append(std::ostringstream&) {}

template <class T, class... Rest>
void str_append(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    str_append(os, rest...);
}

} // namespace detail

// Concatenates streamable arguments into a std::string (error messages, labels).
template <class... Args>
std::string str(const Args&... args) {
    std::ostringstream os;
    os.precision(17);
    detail::str_append(os, args...);
    return os.str();
}

// Domain error: invalid inputs, violated preconditions, malformed files.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
    throw DomainError(str(args...));
}

template <class... Args>
void require(bool cond, const Args&... args) {
    if (!cond) {
        fail(args...);
    }
}

// Neumaier compensated summation. Order-sensitive only below ~1e-16 relative,
// which is what makes batch-permutation invariance hold to 1e-12.
class KahanSum {
public:
    void add(double x) {
        double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x)) {
            comp_ += (sum_ - t) + x;
        } else {
            comp_ += (x - t) + sum_;
        }
        sum_ = t;
    }

    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double compensated_sum(const std::vector<double>& xs) {
    KahanSum s;
    for (double x : xs) {
        s.add(x);
    }
    return s.value();
}

inline double mean(const std::vector<double>& xs) {
    require(!xs.empty(), "mean of empty vector");
    return compensated_sum(xs) / static_cast<double>(xs.size());
}

inline double sample_std(const std::vector<double>& xs) {
    if (xs.size() < 2) {
        return 0.0;
    }
    double m = mean(xs);
    KahanSum s;
    for (double x : xs) {
        s.add((x - m) * (x - m));
    }
    return std::sqrt(s.value() / static_cast<double>(xs.size() - 1));
}

} // namespace b2r
