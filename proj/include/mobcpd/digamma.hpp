#pragma once

#include <cmath>
#include <stdexcept>

namespace mobcpd {

// psi(x) for x > 0.  Recurrence psi(x) = psi(x+1) - 1/x pushes the argument
// above 10, where the asymptotic series in 1/x^2 is accurate to ~1e-16.
inline double digamma(double x) {
    if (!(x > 0.0))
        throw std::invalid_argument("digamma: argument must be positive");
    double acc = 0.0;
    while (x < 10.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // B_2k / (2k x^{2k}) terms
    double series = inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 -
                    inv2 * (1.0 / 252.0 -
                    inv2 * (1.0 / 240.0 -
                    inv2 * (1.0 / 132.0)))));
    return acc + std::log(x) - 0.5 * inv - series;
}

}  // namespace mobcpd
