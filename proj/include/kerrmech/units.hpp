#pragma once

#include <cmath>
#include <limits>

#include "kerrmech/errors.hpp"

// Unit conventions: angular frequencies (rad/s) everywhere inside the
// library; ordinary frequency (Hz) only at external boundaries (config,
// CSV, CLI). The two conversions below are the single audited crossing.

namespace kerrmech {

inline constexpr double pi = 3.14159265358979323846;
inline constexpr double k_boltzmann = 1.380649e-23;    // J/K
inline constexpr double hbar = 1.054571817e-34;        // J s

/// Ordinary frequency (Hz) -> angular frequency (rad/s).
/// The long double intermediate keeps the round trip with
/// angular_to_hz within 1 ulp.
inline double hz_to_angular(double f) {
    if (!std::isfinite(f))
        throw ValidationError("hz_to_angular: input frequency is not finite");
    constexpr long double two_pi_l = 6.283185307179586476925286766559L;
    return static_cast<double>(static_cast<long double>(f) * two_pi_l);
}

/// Angular frequency (rad/s) -> ordinary frequency (Hz).
inline double angular_to_hz(double w) {
    if (!std::isfinite(w))
        throw ValidationError("angular_to_hz: input frequency is not finite");
    constexpr long double two_pi_l = 6.283185307179586476925286766559L;
    return static_cast<double>(static_cast<long double>(w) / two_pi_l);
}

/// Thermal phonon occupation in the high-temperature (Boltzmann) limit,
/// n_th = k_B T / (hbar omega_m). Exactly linear in T.
inline double thermal_occupation(double temperature_k, double omega_m) {
    if (!(omega_m > 0.0))
        throw ValidationError("thermal_occupation: omega_m must be > 0");
    if (!(temperature_k >= 0.0))
        throw ValidationError("thermal_occupation: temperature must be >= 0");
    return (k_boltzmann * temperature_k) / (hbar * omega_m);
}

/// Full Bose-Einstein occupation 1/(exp(hbar omega/kT) - 1).
inline double thermal_occupation_bose(double temperature_k, double omega_m) {
    if (!(omega_m > 0.0))
        throw ValidationError("thermal_occupation_bose: omega_m must be > 0");
    if (!(temperature_k >= 0.0))
        throw ValidationError("thermal_occupation_bose: temperature must be >= 0");
    if (temperature_k == 0.0) return 0.0;
    return 1.0 / std::expm1(hbar * omega_m / (k_boltzmann * temperature_k));
}

} // namespace kerrmech
