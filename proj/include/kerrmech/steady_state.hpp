#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kerrmech/errors.hpp"
#include "kerrmech/params.hpp"

// Classical steady states of the driven Kerr cavity. Everything is solved in
// the scaled variables m = |K| n_c / kappa, delta = Delta / kappa, where the
// photon-number cubic reads
//
//     m [ (delta + m)^2 + 1/4 ] = eps,   eps = |K| kappa_c n_in / kappa^3,
//
// which keeps the coefficients O(1) for any device. Negative Kerr maps onto
// positive Kerr under delta -> -delta.

namespace kerrmech {

enum class BranchLabel { low, middle, high };

inline const char* to_string(BranchLabel b) {
    switch (b) {
        case BranchLabel::low: return "low";
        case BranchLabel::middle: return "middle";
        default: return "high";
    }
}

/// One classical solution of the photon-number cubic.
struct SteadyStateBranch {
    double n_c = 0.0;                    ///< intracavity photon number
    std::complex<double> alpha{0.0, 0.0};///< amplitude, |alpha|^2 == n_c
    BranchLabel label = BranchLabel::low;///< position among the roots at this detuning
    bool stable = false;
    int multiplicity = 1;                ///< 2 at a spinodal, 3 at the critical point
    double detuning = 0.0;               ///< Delta this root was solved at (rad/s)
    double delta_tilde = 0.0;            ///< Delta + 2 K n_c
    double delta_bar = 0.0;              ///< Delta + K n_c
    double lambda_sq = 0.0;              ///< K^2 n_c^2
    double beta = 0.0;                   ///< static mechanical displacement -g0 n_c / omega_m
    double back_shift = 0.0;             ///< neglected detuning shift 2 g0^2 n_c / omega_m
};

struct SteadySolution {
    std::vector<SteadyStateBranch> branches;   ///< sorted by ascending n_c
    std::vector<std::string> warnings;
};

/// Critical input photon flux n_bi above which the response bifurcates.
inline double critical_input(const SystemParams& p) {
    const double kappa = p.cavity.kappa();
    const double kerr = p.cavity.kerr;
    if (!(kerr > 0.0))
        throw ValidationError("no bifurcation for non-positive Kerr");
    return (kappa / p.cavity.kappa_c) * kappa * kappa / (3.0 * std::sqrt(3.0) * kerr);
}

namespace detail {

/// Right-hand side kappa_c * n_in of the cubic, from either drive spec.
inline double cubic_rhs(const CavityParams& c, const DriveParams& d) {
    validate_drive(c, d);
    const double kappa = c.kappa();
    if (d.kind == DriveKind::photon_flux) return c.kappa_c * d.strength;
    return d.strength * kappa * kappa * kappa / (3.0 * std::sqrt(3.0) * c.kerr);
}

/// Drive strength as the dimensionless eps of the scaled cubic.
inline double cubic_eps(const CavityParams& c, const DriveParams& d) {
    const double kappa = c.kappa();
    return std::abs(c.kerr) * cubic_rhs(c, d) / (kappa * kappa * kappa);
}

inline constexpr double eps_critical = 0.19245008972987525484;  // 1/(3 sqrt 3)

struct ScaledRoot {
    double m;
    int multiplicity;
};

inline long double scaled_poly(long double m, long double delta, long double eps) {
    const long double db = delta + m;
    return m * (db * db + 0.25L) - eps;
}

inline long double scaled_poly_deriv(long double m, long double delta) {
    return 3.0L * m * m + 4.0L * delta * m + delta * delta + 0.25L;
}

/// All non-negative real roots of the scaled cubic, ascending, with a
/// Newton polish in extended precision. Double roots at spinodals are
/// detected and merged.
inline std::vector<ScaledRoot> solve_scaled_cubic(double delta, double eps) {
    std::vector<double> roots;
    if (eps == 0.0) {
        roots.push_back(0.0);
    } else {
        // depressed form y^3 + p y + q with m = y - 2 delta / 3
        const double b = 2.0 * delta;
        const double c = delta * delta + 0.25;
        const double d = -eps;
        const double p = c - b * b / 3.0;
        const double q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
        const double disc = -4.0 * p * p * p - 27.0 * q * q;
        const double scale = std::max({std::abs(p * p * p), q * q, 1e-300});
        const double p_tol = 1e-11 * (1.0 + delta * delta);
        const double q_tol = 1e-11 * (1.0 + std::abs(delta * delta * delta));

        if (std::abs(p) < p_tol && std::abs(q) < q_tol) {
            // triple root: the critical point of the cusp
            roots.assign(3, -b / 3.0);
        } else if (disc > 1e-24 * scale) {
            const double rad = std::sqrt(-p / 3.0);
            double arg = 3.0 * q / (2.0 * p * rad);
            arg = std::clamp(arg, -1.0, 1.0);
            const double theta = std::acos(arg);
            for (int k = 0; k < 3; ++k)
                roots.push_back(2.0 * rad * std::cos((theta - 2.0 * pi * k) / 3.0) - b / 3.0);
        } else if (disc < -1e-24 * scale) {
            const double half_q = q / 2.0;
            const double s = std::sqrt(half_q * half_q + p * p * p / 27.0);
            const double u = std::cbrt(-half_q + (half_q <= 0.0 ? s : -s));
            // the companion factor avoids cancellation in u + v
            const double v = (u != 0.0) ? -p / (3.0 * u) : 0.0;
            roots.push_back(u + v - b / 3.0);
        } else {
            // degenerate discriminant: double (or triple) root
            if (std::abs(p) < 1e-12 * std::cbrt(scale)) {
                roots.push_back(-b / 3.0);  // triple
                roots.push_back(-b / 3.0);
                roots.push_back(-b / 3.0);
            } else {
                roots.push_back(3.0 * q / p - b / 3.0);
                roots.push_back(-3.0 * q / (2.0 * p) - b / 3.0);
                roots.push_back(-3.0 * q / (2.0 * p) - b / 3.0);
            }
        }
    }

    // polish and filter
    std::vector<double> polished;
    for (double m : roots) {
        long double x = m;
        for (int it = 0; it < 4; ++it) {
            const long double f = scaled_poly(x, delta, eps);
            const long double fp = scaled_poly_deriv(x, delta);
            if (std::abs(static_cast<double>(fp)) < 1e-9 * (1.0 + std::abs(m))) break;
            const long double step = f / fp;
            x -= step;
            if (std::abs(static_cast<double>(step)) < 1e-18 * (1.0 + std::abs(static_cast<double>(x)))) break;
        }
        const double mx = static_cast<double>(x);
        if (mx >= -1e-14) polished.push_back(std::max(mx, 0.0));
    }
    std::sort(polished.begin(), polished.end());

    std::vector<ScaledRoot> out;
    for (double m : polished) {
        if (!out.empty() && std::abs(m - out.back().m) <= 1e-9 * (1.0 + std::abs(m)))
            out.back().multiplicity += 1;
        else
            out.push_back({m, 1});
    }
    return out;
}

/// Stationary points of f(m) = m[(delta+m)^2 + 1/4]: local max first.
struct Tangents {
    bool exist = false;
    double m_max = 0.0;  ///< position of the local maximum (smaller m)
    double m_min = 0.0;  ///< position of the local minimum (larger m)
};

inline Tangents tangents(double delta) {
    Tangents t;
    const double disc = 4.0 * delta * delta - 3.0;
    if (disc <= 0.0 || delta >= 0.0) return t;
    const double s = std::sqrt(disc);
    t.exist = true;
    t.m_max = (-4.0 * delta - s) / 6.0;
    t.m_min = (-4.0 * delta + s) / 6.0;
    return t;
}

inline double f_scaled(double m, double delta) {
    const double db = delta + m;
    return m * (db * db + 0.25);
}

/// Solves F(m_tan(delta), delta) = eps for delta < -sqrt(3)/2. `use_max`
/// selects the local-maximum tangent (upper spinodal) vs the local minimum
/// (lower spinodal). Both tangent values grow monotonically as delta
/// decreases, so a march-and-bisect bracket always succeeds.
inline double solve_spinodal(double eps, bool use_max) {
    const double delta_c = -std::sqrt(3.0) / 2.0;
    auto value = [&](double delta) {
        const Tangents t = tangents(delta);
        return f_scaled(use_max ? t.m_max : t.m_min, delta) - eps;
    };
    double hi = delta_c * (1.0 + 1e-12);
    double lo = delta_c * 1.05;
    int guard = 0;
    while (value(lo) < 0.0) {
        hi = lo;
        lo *= 1.5;
        if (++guard > 2000)
            throw ConvergenceError("bistable_window: failed to bracket spinodal");
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (value(mid) >= 0.0) lo = mid; else hi = mid;
        if (std::abs(hi - lo) <= 1e-15 * std::abs(lo)) break;
    }
    // Newton polish; envelope theorem gives dF/ddelta = 2 m (delta + m).
    double delta = 0.5 * (lo + hi);
    for (int it = 0; it < 3; ++it) {
        const Tangents t = tangents(delta);
        const double m = use_max ? t.m_max : t.m_min;
        const double deriv = 2.0 * m * (delta + m);
        if (deriv == 0.0) break;
        delta -= (f_scaled(m, delta) - eps) / deriv;
    }
    return delta;
}

} // namespace detail

/// Equivalent input photon flux of a drive block (resolves r to n_in).
inline double drive_photon_flux(const SystemParams& p, const DriveParams& d) {
    return detail::cubic_rhs(p.cavity, d) / p.cavity.kappa_c;
}

/// Drive strength as r = n_in/n_bi; requires kerr > 0.
inline double drive_ratio(const SystemParams& p, const DriveParams& d) {
    return drive_photon_flux(p, d) / critical_input(p);
}

/// All classical steady states at one detuning: 1 to 3 branches, ascending
/// in n_c, with stability classified by the sign of
/// D(0) = kappa^2/4 + delta_tilde^2 - |lambda|^2.
inline SteadySolution solve_steady_states(const SystemParams& p, const DriveParams& d) {
    const CavityParams& cav = p.cavity;
    const double kappa = cav.kappa();
    const double kerr = cav.kerr;
    const double rhs = detail::cubic_rhs(cav, d);
    const double delta = d.detuning;

    SteadySolution sol;
    std::vector<detail::ScaledRoot> scaled;
    std::vector<double> ns;

    if (kerr == 0.0) {
        ns.push_back(rhs / (delta * delta + kappa * kappa / 4.0));
        scaled.push_back({0.0, 1});
    } else {
        const double eps = std::abs(kerr) * rhs / (kappa * kappa * kappa);
        const double delta_eff = (kerr > 0.0 ? delta : -delta) / kappa;
        scaled = detail::solve_scaled_cubic(delta_eff, eps);
        for (const auto& r : scaled) ns.push_back(r.m * kappa / std::abs(kerr));
    }

    // residual contract: |f(n) - rhs| <= 1e-10 max(1, n kappa^2)
    for (double n : ns) {
        const double db = delta + kerr * n;
        const double resid = n * (db * db + kappa * kappa / 4.0) - rhs;
        if (std::abs(resid) > 1e-10 * std::max(1.0, n * kappa * kappa)) {
            std::ostringstream os;
            os << "solve_steady_states: root polish failed at Delta = " << delta
               << ", n_c = " << n << " (residual " << resid << ")";
            throw ConvergenceError(os.str());
        }
    }

    const std::size_t count = ns.size();
    for (std::size_t i = 0; i < count; ++i) {
        SteadyStateBranch b;
        b.n_c = ns[i];
        b.multiplicity = scaled[i].multiplicity;
        b.detuning = delta;
        b.delta_tilde = delta + 2.0 * kerr * b.n_c;
        b.delta_bar = delta + kerr * b.n_c;
        b.lambda_sq = kerr * kerr * b.n_c * b.n_c;
        const double d0 = kappa * kappa / 4.0 + b.delta_tilde * b.delta_tilde - b.lambda_sq;
        b.stable = d0 > 0.0;

        if (rhs > 0.0 && b.n_c > 0.0) {
            const std::complex<double> num(0.0, -std::sqrt(rhs));
            const std::complex<double> den(-kappa / 2.0, b.delta_bar);
            const std::complex<double> u = num / den;
            b.alpha = std::sqrt(b.n_c) * u / std::abs(u);
        }

        b.beta = -p.mech.g0 * b.n_c / p.mech.omega_m;
        b.back_shift = 2.0 * p.mech.g0 * p.mech.g0 * b.n_c / p.mech.omega_m;
        if (b.back_shift > kappa / 1000.0) {
            std::ostringstream os;
            os << "static displacement back-shift " << b.back_shift
               << " rad/s exceeds kappa/1000 at n_c = " << b.n_c
               << "; it is neglected by the cubic";
            sol.warnings.push_back(os.str());
        }

        if (count == 3) {
            b.label = (i == 0) ? BranchLabel::low
                               : (i == 1 ? BranchLabel::middle : BranchLabel::high);
        } else if (count == 2) {
            b.label = (i == 0) ? BranchLabel::low : BranchLabel::high;
        } else {
            b.label = BranchLabel::low;
        }
        sol.branches.push_back(b);
    }
    return sol;
}

/// Detuning window with three coexisting solutions, bounded by the two
/// spinodal detunings. Below or exactly at the critical drive the window
/// does not exist (the threshold point itself is degenerate).
struct BistableWindow {
    double delta_lo = 0.0;
    double delta_hi = 0.0;
    bool exists = false;
    std::string note;
};

inline BistableWindow bistable_window(const SystemParams& p, const DriveParams& d) {
    const CavityParams& cav = p.cavity;
    const double kappa = cav.kappa();
    BistableWindow w;
    if (cav.kerr == 0.0) {
        w.note = "linear cavity: no bistability";
        return w;
    }
    const double eps = detail::cubic_eps(cav, d);
    if (eps <= detail::eps_critical) {
        if (eps == detail::eps_critical) {
            const double dc = -std::sqrt(3.0) / 2.0 * kappa * (cav.kerr > 0.0 ? 1.0 : -1.0);
            w.delta_lo = w.delta_hi = dc;
            w.note = "drive exactly at the critical input: window degenerates to a point";
        }
        return w;
    }
    // scaled spinodals for the positive-Kerr mirror image
    const double s_hi = detail::solve_spinodal(eps, /*use_max=*/true);   // low branch dies here
    const double s_lo = detail::solve_spinodal(eps, /*use_max=*/false);  // high branch dies here
    if (cav.kerr > 0.0) {
        w.delta_lo = s_lo * kappa;
        w.delta_hi = s_hi * kappa;
    } else {
        w.delta_lo = -s_hi * kappa;
        w.delta_hi = -s_lo * kappa;
    }
    w.exists = true;
    return w;
}

inline BistableWindow bistable_window(const SystemParams& p, double n_in) {
    return bistable_window(p, DriveParams::flux(0.0, n_in));
}

/// Adiabatic sweep over a detuning grid at fixed drive strength.
struct SweepResult {
    std::vector<double> detuning;          ///< rad/s, in sweep order
    std::vector<double> n_c;
    std::vector<BranchLabel> occupied;     ///< branch identity followed by the sweep
    std::vector<std::uint8_t> jumped;      ///< 1 where the occupied branch switched
    std::vector<std::size_t> jump_indices;
};

/// Follows the occupied branch across the grid: the continuation of the
/// current branch is kept while it exists; when it dies at a spinodal the
/// sweep jumps to the remaining stable branch and the index is recorded.
inline SweepResult hysteresis_sweep(const SystemParams& p, const DriveParams& drive,
                                    const std::vector<double>& grid) {
    if (grid.empty())
        throw ValidationError("hysteresis_sweep: empty detuning grid");
    const SweepDirection dir = drive.direction;
    if (dir == SweepDirection::none)
        throw ValidationError("hysteresis_sweep: sweep direction must be up or down");
    for (std::size_t i = 1; i < grid.size(); ++i) {
        const bool ok = (dir == SweepDirection::up) ? grid[i] > grid[i - 1]
                                                    : grid[i] < grid[i - 1];
        if (!ok)
            throw ValidationError("hysteresis_sweep: grid must be strictly monotone in the sweep direction");
    }

    const BistableWindow win = bistable_window(p, drive);
    const bool mirror = p.cavity.kerr < 0.0;
    // in the mirrored coordinate x the low branch exists for x <= x_hi and
    // the high branch for x >= x_lo
    const double x_lo = mirror ? -win.delta_hi : win.delta_lo;
    const double x_hi = mirror ? -win.delta_lo : win.delta_hi;

    SweepResult res;
    res.detuning = grid;
    res.n_c.resize(grid.size());
    res.occupied.resize(grid.size());
    res.jumped.assign(grid.size(), 0);

    BranchLabel current = BranchLabel::low;
    bool first = true;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        DriveParams d = drive;
        d.detuning = grid[i];
        const SteadySolution sol = solve_steady_states(p, d);

        if (!win.exists) {
            // monostable: follow the unique stable root
            const auto it = std::find_if(sol.branches.begin(), sol.branches.end(),
                                         [](const SteadyStateBranch& b) { return b.stable; });
            res.n_c[i] = (it != sol.branches.end()) ? it->n_c : sol.branches.front().n_c;
            res.occupied[i] = BranchLabel::low;
            continue;
        }

        const double x = mirror ? -grid[i] : grid[i];
        const bool low_exists = x <= x_hi;
        const bool high_exists = x >= x_lo;

        if (first) {
            if (!high_exists) current = BranchLabel::low;
            else if (!low_exists) current = BranchLabel::high;
            else current = (dir == SweepDirection::up) ? BranchLabel::low : BranchLabel::high;
            first = false;
        } else if (current == BranchLabel::low && !low_exists) {
            current = BranchLabel::high;
            res.jumped[i] = 1;
            res.jump_indices.push_back(i);
        } else if (current == BranchLabel::high && !high_exists) {
            current = BranchLabel::low;
            res.jumped[i] = 1;
            res.jump_indices.push_back(i);
        }

        // pick the stable root matching the identity: smallest for low,
        // largest for high (outer roots are the stable ones)
        const auto& br = sol.branches;
        if (current == BranchLabel::low)
            res.n_c[i] = br.front().n_c;
        else
            res.n_c[i] = br.back().n_c;
        res.occupied[i] = current;
    }
    return res;
}

/// The stable branch of the requested identity at one detuning, if the
/// branch exists there. `low`/`high` identity follows the bistable-window
/// regions; below threshold every point is the single `low` branch.
inline std::optional<SteadyStateBranch> branch_at(const SystemParams& p, const DriveParams& d,
                                                  BranchLabel which) {
    const BistableWindow win = bistable_window(p, d);
    const SteadySolution sol = solve_steady_states(p, d);
    const bool mirror = p.cavity.kerr < 0.0;
    if (!win.exists) {
        if (which == BranchLabel::high) return std::nullopt;
        return sol.branches.front();
    }
    const double x = mirror ? -d.detuning : d.detuning;
    const double x_lo = mirror ? -win.delta_hi : win.delta_lo;
    const double x_hi = mirror ? -win.delta_lo : win.delta_hi;
    if (which == BranchLabel::low) {
        if (x > x_hi) return std::nullopt;
        return sol.branches.front();
    }
    if (which == BranchLabel::high) {
        if (x < x_lo) return std::nullopt;
        return sol.branches.back();
    }
    return std::nullopt;
}

} // namespace kerrmech
