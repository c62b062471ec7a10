#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "kerrmech/errors.hpp"
#include "kerrmech/units.hpp"

namespace kerrmech {

/// Cavity constants, all angular (rad/s).
struct CavityParams {
    double omega_c = 0.0;   ///< bare cavity frequency
    double kappa_c = 0.0;   ///< coupling rate to the input line
    double kappa_i = 0.0;   ///< intrinsic loss rate
    double kerr = 0.0;      ///< Kerr constant per photon (sign unrestricted)

    double kappa() const { return kappa_c + kappa_i; }
};

/// Mechanical resonator constants, angular (rad/s); n_th dimensionless.
struct MechParams {
    double omega_m = 0.0;
    double gamma_m = 0.0;
    double g0 = 0.0;
    double n_th = 0.0;
};

struct SystemParams {
    CavityParams cavity;
    MechParams mech;
};

enum class SweepDirection { up, down, none };

inline const char* to_string(SweepDirection d) {
    switch (d) {
        case SweepDirection::up: return "up";
        case SweepDirection::down: return "down";
        default: return "none";
    }
}

/// Drive strength is either an absolute input photon flux n_in (1/s) or a
/// ratio r = n_in/n_bi relative to the critical input flux. Exactly one is
/// the source of truth per run.
enum class DriveKind { photon_flux, ratio };

struct DriveParams {
    double detuning = 0.0;                       ///< Delta = omega_d - omega_c (rad/s)
    DriveKind kind = DriveKind::photon_flux;
    double strength = 0.0;                       ///< n_in (1/s) or r, per kind
    SweepDirection direction = SweepDirection::none;

    static DriveParams flux(double detuning, double n_in,
                            SweepDirection dir = SweepDirection::none) {
        return DriveParams{detuning, DriveKind::photon_flux, n_in, dir};
    }
    static DriveParams ratio(double detuning, double r,
                             SweepDirection dir = SweepDirection::none) {
        return DriveParams{detuning, DriveKind::ratio, r, dir};
    }
};

namespace detail {

inline void require(bool ok, std::vector<std::string>& errs, const std::string& msg) {
    if (!ok) errs.push_back(msg);
}

inline std::string with_value(const char* field, double v, const char* what) {
    std::ostringstream os;
    os << field << " " << what << " (got " << v << ")";
    return os.str();
}

} // namespace detail

/// Result of validate(): the checked parameter set plus any non-fatal
/// warnings. Constructing one by hand bypasses the checks; don't.
struct ValidatedParams {
    SystemParams params;
    std::vector<std::string> warnings;
};

/// Checks every invariant and reports all violations at once.
inline ValidatedParams validate(const SystemParams& p) {
    std::vector<std::string> errs;
    std::vector<std::string> warnings;
    using detail::require;
    using detail::with_value;

    const auto& c = p.cavity;
    require(std::isfinite(c.omega_c) && c.omega_c > 0.0, errs,
            with_value("cavity.omega_c", c.omega_c, "must be > 0"));
    require(std::isfinite(c.kappa_c) && c.kappa_c > 0.0, errs,
            with_value("cavity.kappa_c", c.kappa_c, "must be > 0"));
    require(std::isfinite(c.kappa_i) && c.kappa_i >= 0.0, errs,
            with_value("cavity.kappa_i", c.kappa_i, "must be >= 0"));
    require(std::isfinite(c.kerr), errs,
            with_value("cavity.kerr", c.kerr, "must be finite"));

    const auto& m = p.mech;
    require(std::isfinite(m.omega_m) && m.omega_m > 0.0, errs,
            with_value("mech.omega_m", m.omega_m, "must be > 0"));
    require(std::isfinite(m.gamma_m) && m.gamma_m > 0.0, errs,
            with_value("mech.gamma_m", m.gamma_m, "must be > 0"));
    require(std::isfinite(m.g0), errs,
            with_value("mech.g0", m.g0, "must be finite"));
    require(std::isfinite(m.n_th) && m.n_th >= 0.0, errs,
            with_value("mech.n_th", m.n_th, "must be >= 0"));

    if (!errs.empty()) {
        std::string joined = "invalid parameters:";
        for (const auto& e : errs) joined += "\n  - " + e;
        throw ValidationError(joined);
    }

    if (m.omega_m > 0.0 && m.gamma_m > m.omega_m / 10.0)
        warnings.push_back(detail::with_value(
            "mech.gamma_m", m.gamma_m,
            "exceeds omega_m/10; linewidth is not small against the mechanical frequency"));

    return ValidatedParams{p, warnings};
}

/// Idempotent: validating an already validated set returns it unchanged.
inline ValidatedParams validate(const ValidatedParams& vp) { return vp; }

/// Checks the drive block against the cavity it will be applied to.
inline void validate_drive(const CavityParams& c, const DriveParams& d) {
    if (!std::isfinite(d.detuning))
        throw ValidationError("drive.detuning must be finite");
    if (!std::isfinite(d.strength) || d.strength < 0.0)
        throw ValidationError(detail::with_value("drive.strength", d.strength, "must be >= 0"));
    if (d.kind == DriveKind::ratio && !(c.kerr > 0.0))
        throw ValidationError("drive specified as r = n_in/n_bi requires kerr > 0");
}

} // namespace kerrmech
