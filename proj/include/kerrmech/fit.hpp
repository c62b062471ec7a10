#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "kerrmech/errors.hpp"
#include "kerrmech/params.hpp"
#include "kerrmech/steady_state.hpp"
#include "kerrmech/units.hpp"

// Parameter extraction from measured or synthetic traces. All fits run a
// deterministic damped least-squares refinement (Levenberg-Marquardt with
// Marquardt scaling); the linear circle fit uses analytic Jacobians, the
// rest central differences. External interfaces are in Hz, internals in
// rad/s, as everywhere else in the library.

namespace kerrmech::fit {

// ---------------------------------------------------------------------------
// Levenberg-Marquardt engine
// ---------------------------------------------------------------------------

using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using JacobianFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;
using FeasibleFn = std::function<bool(const Eigen::VectorXd&)>;

struct LMOptions {
    int max_iterations = 400;
    double ftol = 1e-15;
    double xtol = 1e-14;
    double lambda_init = 1e-3;
};

struct LMResult {
    Eigen::VectorXd params;
    Eigen::MatrixXd covariance;
    Eigen::VectorXd stderrors;
    double chi2 = 0.0;
    int n_residuals = 0;
    int iterations = 0;
    bool converged = false;
    std::string message;
};

/// Central differences with steps set by the per-parameter *feature* scale
/// (the scale over which the residuals change appreciably), which for
/// offset-like parameters is far smaller than the parameter's magnitude.
inline Eigen::MatrixXd numeric_jacobian(const ResidualFn& f, const Eigen::VectorXd& x,
                                        const Eigen::VectorXd& feature_scale) {
    const Eigen::VectorXd r0 = f(x);
    Eigen::MatrixXd jac(r0.size(), x.size());
    for (int j = 0; j < x.size(); ++j) {
        const double h = 1e-5 * std::max(std::abs(feature_scale(j)), 1e-30);
        Eigen::VectorXd xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        jac.col(j) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return jac;
}

inline LMResult levenberg_marquardt(const ResidualFn& f, Eigen::VectorXd x,
                                    const LMOptions& opts = {},
                                    const JacobianFn* jacobian = nullptr,
                                    const FeasibleFn* feasible = nullptr,
                                    const Eigen::VectorXd* typical = nullptr) {
    const int n = static_cast<int>(x.size());
    const Eigen::VectorXd typ = typical ? *typical : Eigen::VectorXd::Ones(n);

    // work in scaled coordinates z = x / scale: parameters of wildly
    // different magnitude (a delay in seconds next to a frequency in rad/s)
    // otherwise wreck the conditioning of the normal equations
    Eigen::VectorXd scale(n);
    for (int k = 0; k < n; ++k)
        scale(k) = std::max({std::abs(typ(k)), std::abs(x(k)), 1e-30});
    auto to_x = [&](const Eigen::VectorXd& z) {
        return (z.array() * scale.array()).matrix().eval();
    };
    auto scaled_jac_at = [&](const Eigen::VectorXd& z) {
        const Eigen::VectorXd xx = to_x(z);
        Eigen::MatrixXd j =
            jacobian ? (*jacobian)(xx) : numeric_jacobian(f, xx, typ);
        for (int k = 0; k < n; ++k) j.col(k) *= scale(k);
        return j;
    };

    Eigen::VectorXd z = (x.array() / scale.array()).matrix();
    Eigen::VectorXd r = f(to_x(z));
    double cost = r.squaredNorm();
    double lambda = opts.lambda_init;
    LMResult res;
    res.n_residuals = static_cast<int>(r.size());

    Eigen::MatrixXd jac = scaled_jac_at(z);
    for (int it = 0; it < opts.max_iterations; ++it) {
        res.iterations = it + 1;
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd g = jac.transpose() * r;
        Eigen::VectorXd diag = jtj.diagonal();
        const double dmax = std::max(diag.maxCoeff(), 1e-300);
        for (int k = 0; k < n; ++k) diag(k) = std::max(diag(k), 1e-10 * dmax);

        bool accepted = false;
        for (int tries = 0; tries < 50 && !accepted; ++tries) {
            Eigen::MatrixXd a = jtj;
            a.diagonal() += lambda * diag;
            const Eigen::VectorXd step = a.ldlt().solve(-g);
            const Eigen::VectorXd z_try = z + step;
            if (!step.allFinite() || (feasible && !(*feasible)(to_x(z_try)))) {
                lambda *= 10.0;
                continue;
            }
            const Eigen::VectorXd r_try = f(to_x(z_try));
            const double cost_try = r_try.squaredNorm();
            if (cost_try < cost) {
                const double rel_red = (cost - cost_try) / std::max(cost, 1e-300);
                const double rel_step = step.cwiseAbs().maxCoeff();
                z = z_try;
                r = r_try;
                cost = cost_try;
                lambda = std::max(lambda * 0.3, 1e-14);
                accepted = true;
                if (rel_red < opts.ftol || rel_step < opts.xtol) res.converged = true;
            } else {
                lambda *= 10.0;
            }
        }
        if (!accepted) {
            // no downhill step exists: the current point is stationary
            res.converged = true;
        }
        if (res.converged) break;
        jac = scaled_jac_at(z);
    }

    res.params = to_x(z);
    res.chi2 = cost;
    jac = scaled_jac_at(z);
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const int dof = std::max<int>(1, res.n_residuals - n);
    const double sigma2 = cost / dof;

    // covariance via column equilibration: (J^T J)^-1 = E (E J^T J E)^-1 E
    // with E = diag(1/||col_k||). The equilibrated matrix is the correlation
    // matrix of the columns, so a small-eigenvalue floor only fires for
    // genuinely degenerate directions, whose variance is then reported as
    // huge rather than silently understated.
    Eigen::VectorXd equil(n);
    for (int k = 0; k < n; ++k)
        equil(k) = 1.0 / std::max(std::sqrt(jtj(k, k)), 1e-150);
    const Eigen::MatrixXd corr = equil.asDiagonal() * jtj * equil.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
    const Eigen::VectorXd ev = es.eigenvalues();
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < n; ++k)
        inv(k) = 1.0 / std::max(ev(k), 1e-12);
    const Eigen::MatrixXd corr_inv =
        es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    const Eigen::MatrixXd cov_z =
        equil.asDiagonal() * corr_inv * equil.asDiagonal();
    res.covariance = sigma2 * (scale.asDiagonal() * cov_z * scale.asDiagonal());
    res.stderrors = res.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    if (!res.converged)
        res.message = "iteration limit reached";
    return res;
}

// ---------------------------------------------------------------------------
// S21 circle fits (hanger-notch configuration)
// ---------------------------------------------------------------------------

struct S21Trace {
    std::vector<double> freq_hz;
    std::vector<std::complex<double>> s21;
    double power_dbm = -120.0;           ///< applied at the generator
    double attenuation_db = 0.0;         ///< generator-to-device line attenuation
    double attenuation_sigma_db = 2.0;   ///< its uncertainty
    SweepDirection direction = SweepDirection::none;
};

/// Power arriving at the device, W.
inline double device_power_w(const S21Trace& t, double attenuation_offset_db = 0.0) {
    return 1e-3 * std::pow(10.0, (t.power_dbm - t.attenuation_db - attenuation_offset_db) / 10.0);
}

struct CircleFitParams {
    double amplitude = 1.0;     ///< a
    double alpha_env = 0.0;     ///< environment phase (rad)
    double tau_delay = 0.0;     ///< electrical delay (s)
    double q_l = 0.0;           ///< loaded quality factor
    double q_c_mag = 0.0;       ///< |Q_c|
    double phi_0 = 0.0;         ///< impedance mismatch (rad)
    double omega_c = 0.0;       ///< rad/s
    std::optional<double> kerr; ///< rad/s per photon (Kerr variant only)
    Eigen::MatrixXd covariance; ///< order: a, alpha, tau, Q_l, |Q_c|, phi_0, omega_c[, kerr]
    Eigen::VectorXd stderrors;
    double chi2 = 0.0;
    std::vector<std::string> notes;
};

namespace detail {

inline std::complex<double> s21_model(double omega, double a, double alpha, double tau,
                                      double q_l, double q_c, double phi0, double omega_c) {
    const std::complex<double> im(0.0, 1.0);
    const std::complex<double> env = a * std::exp(im * (alpha - tau * omega));
    const std::complex<double> den = 1.0 + 2.0 * im * q_l * (omega - omega_c) / omega;
    return env * (1.0 - (q_l / q_c) * std::exp(im * phi0) / den);
}

/// dS/d(a, alpha, tau, Q_l, |Q_c|, phi0, omega_c), closed form.
inline void s21_jacobian_row(double omega, const Eigen::VectorXd& p,
                             std::complex<double>* d) {
    const std::complex<double> im(0.0, 1.0);
    const double a = p(0), alpha = p(1), tau = p(2), q_l = p(3), q_c = p(4),
                 phi0 = p(5), omega_c = p(6);
    const std::complex<double> env = a * std::exp(im * (alpha - tau * omega));
    const std::complex<double> den = 1.0 + 2.0 * im * q_l * (omega - omega_c) / omega;
    const std::complex<double> eph = std::exp(im * phi0);
    const std::complex<double> b = (q_l / q_c) * eph;
    const std::complex<double> s = env * (1.0 - b / den);
    d[0] = s / a;
    d[1] = im * s;
    d[2] = -im * omega * s;
    d[3] = -env * eph / (q_c * den * den);
    d[4] = env * b / (q_c * den);
    d[5] = -im * env * b / den;
    d[6] = -2.0 * im * q_l * env * b / (omega * den * den);
}

/// Algebraic (Kasa) circle fit; returns center and radius.
inline void kasa_circle(const std::vector<std::complex<double>>& z,
                        std::complex<double>& center, double& radius) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
    Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
    for (const auto& w : z) {
        const double x = w.real(), y = w.imag();
        const Eigen::Vector3d row(x, y, 1.0);
        m += row * row.transpose();
        rhs += row * (x * x + y * y);
    }
    const Eigen::Vector3d sol = m.ldlt().solve(rhs);
    center = std::complex<double>(sol(0) / 2.0, sol(1) / 2.0);
    radius = std::sqrt(std::max(sol(2) + std::norm(center), 0.0));
}

inline double kasa_residual(const std::vector<std::complex<double>>& z) {
    std::complex<double> c;
    double r;
    kasa_circle(z, c, r);
    double acc = 0.0;
    for (const auto& w : z) {
        const double d = std::abs(w - c) - r;
        acc += d * d;
    }
    return acc;
}

inline std::vector<double> unwrap(std::vector<double> phase) {
    for (std::size_t i = 1; i < phase.size(); ++i) {
        double d = phase[i] - phase[i - 1];
        while (d > pi) { phase[i] -= 2.0 * pi; d = phase[i] - phase[i - 1]; }
        while (d < -pi) { phase[i] += 2.0 * pi; d = phase[i] - phase[i - 1]; }
    }
    return phase;
}

inline void check_trace_grid(const S21Trace& t, const char* who) {
    if (t.freq_hz.size() != t.s21.size() || t.freq_hz.size() < 2)
        throw ValidationError(std::string(who) + ": malformed trace");
    const bool up = t.freq_hz[1] > t.freq_hz[0];
    for (std::size_t i = 1; i < t.freq_hz.size(); ++i) {
        const bool ok = up ? t.freq_hz[i] > t.freq_hz[i - 1] : t.freq_hz[i] < t.freq_hz[i - 1];
        if (!ok)
            throw ValidationError(std::string(who) + ": frequency grid must be strictly monotone");
    }
}

} // namespace detail

inline CircleFitParams circle_fit_linear(const S21Trace& trace) {
    detail::check_trace_grid(trace, "circle_fit_linear");
    const std::size_t m = trace.freq_hz.size();
    if (m < 50)
        throw ValidationError("circle_fit_linear: need at least 50 points");

    std::vector<double> omega(m);
    for (std::size_t i = 0; i < m; ++i) omega[i] = hz_to_angular(trace.freq_hz[i]);
    const bool ascending = omega[1] > omega[0];
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = ascending ? i : m - 1 - i;

    // 1. delay: per-edge phase slopes (unwrap is only safe within an edge),
    //    then a golden-section polish of the algebraic circle residual
    const std::size_t edge = std::max<std::size_t>(5, m / 10);
    auto edge_slope = [&](std::size_t k0, std::size_t k1) {
        std::vector<double> ph, w_edge;
        for (std::size_t k = k0; k < k1; ++k) {
            const std::size_t i = order[k];
            ph.push_back(std::arg(trace.s21[i]));
            w_edge.push_back(omega[i]);
        }
        ph = detail::unwrap(ph);
        double sw = 0, sww = 0, sp = 0, swp = 0;
        for (std::size_t k = 0; k < ph.size(); ++k) {
            sw += w_edge[k];
            sww += w_edge[k] * w_edge[k];
            sp += ph[k];
            swp += w_edge[k] * ph[k];
        }
        const double npts = static_cast<double>(ph.size());
        return (npts * swp - sw * sp) / std::max(npts * sww - sw * sw, 1e-300);
    };
    double tau0 = -0.5 * (edge_slope(0, edge) + edge_slope(m - edge, m));

    const double span = std::abs(omega[order[m - 1]] - omega[order[0]]);
    auto residual_of_tau = [&](double tau) {
        std::vector<std::complex<double>> w(m);
        const std::complex<double> im(0.0, 1.0);
        for (std::size_t i = 0; i < m; ++i) w[i] = trace.s21[i] * std::exp(im * tau * omega[i]);
        return detail::kasa_residual(w);
    };
    {
        // the residual oscillates in tau with period ~2 pi / span, so a
        // coarse scan isolates the global minimum before the refinement
        const double half_window = 20.0 / span;
        const int coarse = 512;
        double best_tau = tau0, best_val = residual_of_tau(tau0);
        for (int k = 0; k <= coarse; ++k) {
            const double t = tau0 - half_window + 2.0 * half_window * k / coarse;
            const double v = residual_of_tau(t);
            if (v < best_val) { best_val = v; best_tau = t; }
        }
        double lo = best_tau - 2.0 * half_window / coarse;
        double hi = best_tau + 2.0 * half_window / coarse;
        const double gr = 0.6180339887498949;
        double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
        double f1 = residual_of_tau(x1), f2 = residual_of_tau(x2);
        for (int it = 0; it < 120; ++it) {
            if (f1 < f2) { hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = residual_of_tau(x1); }
            else { lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = residual_of_tau(x2); }
        }
        tau0 = 0.5 * (lo + hi);
    }

    // 2. circle in the delay-removed plane
    std::vector<std::complex<double>> w(m);
    {
        const std::complex<double> im(0.0, 1.0);
        for (std::size_t i = 0; i < m; ++i) w[i] = trace.s21[i] * std::exp(im * tau0 * omega[i]);
    }
    std::complex<double> center;
    double radius;
    detail::kasa_circle(w, center, radius);
    const double scatter = std::sqrt(detail::kasa_residual(w) / m);
    if (radius < 3.0 * scatter)
        throw ValidationError("circle_fit_linear: degenerate circle (radius below the noise floor)");

    // 3. phase-vs-frequency fit on the circle
    std::vector<double> theta(m), wsorted(m);
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t i = ascending ? k : m - 1 - k;
        theta[k] = std::arg(w[i] - center);
        wsorted[k] = omega[i];
    }
    theta = detail::unwrap(theta);

    std::size_t dip = 0;
    for (std::size_t i = 1; i < m; ++i)
        if (std::abs(trace.s21[i]) < std::abs(trace.s21[dip])) dip = i;
    double omega_c0 = omega[dip];
    double q_l0 = omega_c0 / (span / 10.0);

    auto phase_resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(m);
        for (std::size_t k = 0; k < m; ++k)
            r(k) = p(0) + 2.0 * std::atan(2.0 * p(1) * (1.0 - wsorted[k] / p(2))) - theta[k];
        return r;
    };
    Eigen::VectorXd p0(3);
    double theta_dip = theta[ascending ? dip : m - 1 - dip];
    p0 << theta_dip, q_l0, omega_c0;
    Eigen::VectorXd typ3(3);
    typ3 << 1.0, q_l0, omega_c0 / q_l0;
    LMOptions phase_opts;
    phase_opts.max_iterations = 200;
    FeasibleFn pos3 = [](const Eigen::VectorXd& p) { return p(1) > 0.0 && p(2) > 0.0; };
    const LMResult pfit = levenberg_marquardt(phase_resid, p0, phase_opts, nullptr, &pos3, &typ3);
    const double theta0 = pfit.params(0);
    double q_l = pfit.params(1);
    double omega_c = pfit.params(2);

    if (span < 5.0 * omega_c / q_l)
        throw ValidationError("circle_fit_linear: trace must span at least 5 linewidths");

    // 4. geometry: resonance point and its antipode (the off-resonant point)
    const std::complex<double> z_res = center + radius * std::exp(std::complex<double>(0.0, theta0));
    const std::complex<double> z_inf = 2.0 * center - z_res;
    const double a0 = std::abs(z_inf);
    const double alpha0 = std::arg(z_inf);
    const double phi00 = std::arg(z_inf - center) - alpha0;
    const double q_c0 = q_l * a0 / (2.0 * radius);

    // 5. full refinement of all seven parameters with analytic Jacobian
    Eigen::VectorXd x(7);
    x << a0, alpha0, tau0, q_l, q_c0, std::remainder(phi00, 2.0 * pi), omega_c;
    auto resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(2 * m);
        for (std::size_t i = 0; i < m; ++i) {
            const std::complex<double> d =
                detail::s21_model(omega[i], p(0), p(1), p(2), p(3), p(4), p(5), p(6)) -
                trace.s21[i];
            r(2 * i) = d.real();
            r(2 * i + 1) = d.imag();
        }
        return r;
    };
    JacobianFn jac = [&](const Eigen::VectorXd& p) {
        Eigen::MatrixXd j(2 * m, 7);
        std::complex<double> row[7];
        for (std::size_t i = 0; i < m; ++i) {
            detail::s21_jacobian_row(omega[i], p, row);
            for (int k = 0; k < 7; ++k) {
                j(2 * i, k) = row[k].real();
                j(2 * i + 1, k) = row[k].imag();
            }
        }
        return j;
    };
    FeasibleFn pos7 = [](const Eigen::VectorXd& p) {
        return p(0) > 0.0 && p(3) > 0.0 && p(4) > 0.0 && p(6) > 0.0;
    };
    Eigen::VectorXd typ7(7);
    typ7 << a0, 1.0, std::abs(tau0) + 1.0 / span, q_l, q_c0, 1.0, omega_c;
    const LMResult lm = levenberg_marquardt(resid, x, {}, &jac, &pos7, &typ7);
    if (!lm.converged)
        throw ConvergenceError("circle_fit_linear: refinement did not converge");

    CircleFitParams out;
    out.amplitude = lm.params(0);
    out.alpha_env = std::remainder(lm.params(1), 2.0 * pi);
    out.tau_delay = lm.params(2);
    out.q_l = lm.params(3);
    out.q_c_mag = lm.params(4);
    out.phi_0 = std::remainder(lm.params(5), 2.0 * pi);
    out.omega_c = lm.params(6);
    out.covariance = lm.covariance;
    out.stderrors = lm.stderrors;
    out.chi2 = lm.chi2;
    return out;
}

// ---------------------------------------------------------------------------
// Kerr-extended multi-power circle fit
// ---------------------------------------------------------------------------

namespace detail {

/// Photon number along one trace by adiabatic continuation in sweep order.
/// The cubic is the steady-state photon-number equation with the hanger
/// input convention (an extra factor 1/2 on the drive term).
inline std::vector<double> kerr_trace_photon_numbers(
    const S21Trace& trace, const std::vector<double>& omega, double q_l, double q_c,
    double omega_c, double kerr, double attenuation_offset_db, bool* bistable_seen,
    std::vector<std::size_t>* ambiguous) {
    const double kappa = omega_c / q_l;
    const double power_w = device_power_w(trace, attenuation_offset_db);
    const std::size_t m = omega.size();
    const bool ascending = omega[1] > omega[0];
    const bool sweep_up = trace.direction != SweepDirection::down;

    std::vector<double> n(m, 0.0);
    double prev = -1.0;
    for (std::size_t k = 0; k < m; ++k) {
        // iterate in sweep order regardless of storage order
        const std::size_t i = (sweep_up == ascending) ? k : m - 1 - k;
        const double rhs = (omega_c / (2.0 * q_c)) * (power_w / (hbar * omega[i])) * 0.5;
        const double delta = omega[i] - omega_c;

        std::vector<double> roots;
        if (kerr == 0.0) {
            roots.push_back(rhs / (delta * delta + kappa * kappa / 4.0));
        } else {
            const double eps = std::abs(kerr) * rhs / (kappa * kappa * kappa);
            const double d_eff = (kerr > 0.0 ? delta : -delta) / kappa;
            for (const auto& sr : kerrmech::detail::solve_scaled_cubic(d_eff, eps))
                roots.push_back(sr.m * kappa / std::abs(kerr));
        }
        if (roots.size() > 1) {
            if (bistable_seen) *bistable_seen = true;
            if (trace.direction == SweepDirection::none)
                throw ValidationError(
                    "circle_fit_kerr: bistable trace requires a sweep-direction tag");
            // stable outer roots only; nearest to the previous point
            std::vector<double> stable = {roots.front(), roots.back()};
            if (prev < 0.0) prev = sweep_up ? stable.front() : stable.back();
            const double pick =
                std::abs(stable[0] - prev) <= std::abs(stable[1] - prev) ? stable[0] : stable[1];
            if (ambiguous && roots.size() == 3) {
                const double gap = std::min(std::abs(roots[1] - roots[0]),
                                            std::abs(roots[2] - roots[1]));
                if (gap < 1e-3 * roots[2]) ambiguous->push_back(i);
            }
            n[i] = pick;
        } else {
            n[i] = roots.front();
        }
        prev = n[i];
    }
    return n;
}

} // namespace detail

struct KerrCircleOptions {
    double attenuation_offset_db = 0.0;  ///< evaluate with a shifted attenuation
    bool propagate_attenuation = true;   ///< refit at +-sigma extremes
    LMOptions lm;
};

struct KerrCircleFit {
    CircleFitParams params;          ///< kerr field set
    double kerr_att_low = 0.0;       ///< kerr refit at -sigma attenuation
    double kerr_att_high = 0.0;      ///< kerr refit at +sigma attenuation
    double kerr_uncertainty = 0.0;   ///< half-spread of the attenuation refits
};

namespace detail {

inline CircleFitParams kerr_fit_single(const std::vector<S21Trace>& traces,
                                       const CircleFitParams& init, double kerr_init,
                                       double attenuation_offset_db, const LMOptions& lm_opts) {
    std::vector<std::vector<double>> omegas;
    std::size_t total = 0;
    for (const auto& t : traces) {
        std::vector<double> w(t.freq_hz.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = hz_to_angular(t.freq_hz[i]);
        total += w.size();
        omegas.push_back(std::move(w));
    }

    auto resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(2 * total);
        std::size_t at = 0;
        for (std::size_t tix = 0; tix < traces.size(); ++tix) {
            const auto& t = traces[tix];
            const auto& w = omegas[tix];
            const auto n = kerr_trace_photon_numbers(t, w, p(3), p(4), p(6), p(7),
                                                     attenuation_offset_db, nullptr, nullptr);
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double wc_eff = p(6) - p(7) * n[i];
                const std::complex<double> d =
                    s21_model(w[i], p(0), p(1), p(2), p(3), p(4), p(5), wc_eff) - t.s21[i];
                r(at++) = d.real();
                r(at++) = d.imag();
            }
        }
        return r;
    };

    Eigen::VectorXd x(8);
    x << init.amplitude, init.alpha_env, init.tau_delay, init.q_l, init.q_c_mag,
        init.phi_0, init.omega_c, kerr_init;
    Eigen::VectorXd typ(8);
    typ << init.amplitude, 1.0, 1.0 / init.omega_c, init.q_l, init.q_c_mag,
        1.0, init.omega_c / init.q_l,
        std::max(std::abs(kerr_init), 1e-4 * init.omega_c / init.q_l);
    FeasibleFn pos = [](const Eigen::VectorXd& p) {
        return p(0) > 0.0 && p(3) > 0.0 && p(4) > 0.0 && p(6) > 0.0;
    };
    const LMResult lm = levenberg_marquardt(resid, x, lm_opts, nullptr, &pos, &typ);
    if (!lm.converged)
        throw ConvergenceError("circle_fit_kerr: refinement did not converge");

    CircleFitParams out;
    out.amplitude = lm.params(0);
    out.alpha_env = std::remainder(lm.params(1), 2.0 * pi);
    out.tau_delay = lm.params(2);
    out.q_l = lm.params(3);
    out.q_c_mag = lm.params(4);
    out.phi_0 = std::remainder(lm.params(5), 2.0 * pi);
    out.omega_c = lm.params(6);
    out.kerr = lm.params(7);
    out.covariance = lm.covariance;
    out.stderrors = lm.stderrors;
    out.chi2 = lm.chi2;

    // post-fit diagnostics: spinodal-ambiguous points per trace
    for (std::size_t tix = 0; tix < traces.size(); ++tix) {
        bool bistable = false;
        std::vector<std::size_t> ambiguous;
        kerr_trace_photon_numbers(traces[tix], omegas[tix], out.q_l, out.q_c_mag,
                                  out.omega_c, *out.kerr, attenuation_offset_db,
                                  &bistable, &ambiguous);
        for (std::size_t i : ambiguous) {
            std::ostringstream os;
            os << "trace " << tix << ", point " << i
               << ": photon-number branches nearly degenerate (spinodal)";
            out.notes.push_back(os.str());
        }
    }
    return out;
}

} // namespace detail

/// Joint fit of several powers with the photon-number-induced shift
/// omega_c -> omega_c - K n_c; the branch at bistable points follows the
/// sweep direction through the same continuation rule as the steady-state
/// module.
inline KerrCircleFit circle_fit_kerr(const std::vector<S21Trace>& traces,
                                     const KerrCircleOptions& opts = {}) {
    if (traces.size() < 3)
        throw ValidationError("circle_fit_kerr: need at least 3 powers spanning the nonlinear shift");
    for (const auto& t : traces) detail::check_trace_grid(t, "circle_fit_kerr");

    // order by device power; the weakest trace anchors the linear parameters
    std::vector<std::size_t> by_power(traces.size());
    for (std::size_t i = 0; i < by_power.size(); ++i) by_power[i] = i;
    std::sort(by_power.begin(), by_power.end(), [&](std::size_t a, std::size_t b) {
        return device_power_w(traces[a]) < device_power_w(traces[b]);
    });
    const CircleFitParams lin = circle_fit_linear(traces[by_power.front()]);

    // Kerr scale guess from the dip shift between the weakest and strongest
    // traces
    auto dip_omega = [&](const S21Trace& t) {
        std::size_t dip = 0;
        for (std::size_t i = 1; i < t.s21.size(); ++i)
            if (std::abs(t.s21[i]) < std::abs(t.s21[dip])) dip = i;
        return hz_to_angular(t.freq_hz[dip]);
    };
    const S21Trace& strong = traces[by_power.back()];
    const double kappa = lin.omega_c / lin.q_l;
    const double rhs_strong = (lin.omega_c / (2.0 * lin.q_c_mag)) *
                              (device_power_w(strong, opts.attenuation_offset_db) /
                               (hbar * lin.omega_c)) * 0.5;
    const double n_strong = rhs_strong / (kappa * kappa / 4.0);
    double kerr_init = (dip_omega(traces[by_power.front()]) - dip_omega(strong)) /
                       std::max(n_strong, 1e-30);
    if (!std::isfinite(kerr_init)) kerr_init = 0.0;

    KerrCircleFit fitres;
    fitres.params = detail::kerr_fit_single(traces, lin, kerr_init,
                                            opts.attenuation_offset_db, opts.lm);
    if (opts.propagate_attenuation) {
        double sigma = 0.0;
        for (const auto& t : traces) sigma = std::max(sigma, t.attenuation_sigma_db);
        const auto lo = detail::kerr_fit_single(traces, fitres.params, *fitres.params.kerr,
                                                opts.attenuation_offset_db + sigma, opts.lm);
        const auto hi = detail::kerr_fit_single(traces, fitres.params, *fitres.params.kerr,
                                                opts.attenuation_offset_db - sigma, opts.lm);
        fitres.kerr_att_low = *lo.kerr;
        fitres.kerr_att_high = *hi.kerr;
        fitres.kerr_uncertainty = std::max(std::abs(*fitres.params.kerr - *lo.kerr),
                                           std::abs(*fitres.params.kerr - *hi.kerr));
    }
    return fitres;
}

// ---------------------------------------------------------------------------
// Mechanical sideband fit
// ---------------------------------------------------------------------------

struct PsdTrace {
    std::vector<double> freq_hz;
    std::vector<double> psd;
};

struct SidebandFit {
    double area = 0.0;        ///< integrated Lorentzian, proportional to g0^2 <n_m>
    double area_err = 0.0;
    double omega_m = 0.0;     ///< rad/s
    double gamma_m = 0.0;     ///< rad/s (FWHM)
    double omega_m_err = 0.0;
    double gamma_m_err = 0.0;
    double offset = 0.0;
    double peak_height = 0.0;
    double snr = 0.0;
    double chi2 = 0.0;
};

inline SidebandFit mech_sideband_fit(const PsdTrace& trace) {
    const std::size_t m = trace.freq_hz.size();
    if (m < 16 || trace.psd.size() != m)
        throw ValidationError("mech_sideband_fit: malformed trace");

    std::size_t peak = 0;
    for (std::size_t i = 1; i < m; ++i)
        if (trace.psd[i] > trace.psd[peak]) peak = i;

    std::vector<double> sorted = trace.psd;
    std::sort(sorted.begin(), sorted.end());
    const double offset0 = sorted[m / 4];
    std::vector<double> dev;
    for (std::size_t i = 0; i < m / 2; ++i) dev.push_back(std::abs(sorted[i] - offset0));
    std::sort(dev.begin(), dev.end());
    const double noise = std::max(1.4826 * dev[dev.size() / 2], 1e-300);
    const double height0 = trace.psd[peak] - offset0;

    SidebandFit out;
    out.snr = height0 / noise;
    if (out.snr < 3.0)
        throw ValidationError("mech_sideband_fit: peak SNR below 3");

    // half-width estimate from half-maximum crossings
    const double half = offset0 + height0 / 2.0;
    double f_lo = trace.freq_hz.front(), f_hi = trace.freq_hz.back();
    for (std::size_t i = peak; i-- > 0;)
        if (trace.psd[i] < half) { f_lo = trace.freq_hz[i]; break; }
    for (std::size_t i = peak + 1; i < m; ++i)
        if (trace.psd[i] < half) { f_hi = trace.freq_hz[i]; break; }
    const double fwhm0 = std::max(f_hi - f_lo, 2.0 * std::abs(trace.freq_hz[1] - trace.freq_hz[0]));

    // second-peak scan outside 8 half-widths of the main peak
    for (std::size_t i = 1; i + 1 < m; ++i) {
        if (std::abs(trace.freq_hz[i] - trace.freq_hz[peak]) < 8.0 * fwhm0) continue;
        if (trace.psd[i] > trace.psd[i - 1] && trace.psd[i] > trace.psd[i + 1] &&
            trace.psd[i] > offset0 + 0.5 * height0)
            throw ValidationError("mech_sideband_fit: multiple peaks detected");
    }

    auto resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(m);
        const double hw = p(3) / 2.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double df = trace.freq_hz[i] - p(2);
            r(i) = p(0) + p(1) * hw * hw / (df * df + hw * hw) - trace.psd[i];
        }
        return r;
    };
    Eigen::VectorXd x(4);
    x << offset0, height0, trace.freq_hz[peak], fwhm0;
    Eigen::VectorXd typ(4);
    typ << std::abs(offset0) + noise, height0, fwhm0, fwhm0;
    FeasibleFn pos = [](const Eigen::VectorXd& p) { return p(1) > 0.0 && p(3) > 0.0; };
    const LMResult lm = levenberg_marquardt(resid, x, {}, nullptr, &pos, &typ);
    if (!lm.converged)
        throw ConvergenceError("mech_sideband_fit: did not converge");

    out.offset = lm.params(0);
    out.peak_height = lm.params(1);
    out.omega_m = hz_to_angular(lm.params(2));
    out.gamma_m = hz_to_angular(lm.params(3));
    out.omega_m_err = hz_to_angular(lm.stderrors(2));
    out.gamma_m_err = hz_to_angular(lm.stderrors(3));
    out.chi2 = lm.chi2;
    // area of A hw^2 / ((f-f0)^2 + hw^2) over f, in Hz * psd units
    const double a = lm.params(1), g = lm.params(3);
    out.area = pi * a * g / 2.0;
    const double da = pi * g / 2.0, dg = pi * a / 2.0;
    out.area_err = std::sqrt(da * da * lm.covariance(1, 1) + dg * dg * lm.covariance(3, 3) +
                             2.0 * da * dg * lm.covariance(1, 3));
    return out;
}

// ---------------------------------------------------------------------------
// g0 temperature-ramp calibration
// ---------------------------------------------------------------------------

struct RampPoint {
    double temp_k = 0.0;
    double g0sq_nm = 0.0;   ///< measured g0^2 <n_m>, (rad/s)^2
    double sigma = 0.0;     ///< optional 1-sigma uncertainty, same units
};

struct G0Calibration {
    double g0 = 0.0;        ///< rad/s
    double g0_err = 0.0;
    double slope = 0.0;     ///< (rad/s)^2 per K
    double slope_err = 0.0;
    std::size_t used_points = 0;
    std::vector<std::size_t> excluded;  ///< indices of non-thermalized points
};

/// Weighted straight line through the origin, y = slope * T, over points
/// with T >= t_min_fit; below that the mode does not thermalize and the
/// points are reported but excluded.
inline G0Calibration calibrate_g0(const std::vector<RampPoint>& ramp, double omega_m,
                                  double t_min_fit = 0.250) {
    if (!(omega_m > 0.0))
        throw ValidationError("calibrate_g0: omega_m must be > 0");
    G0Calibration out;
    double swtt = 0.0, swty = 0.0, chi2 = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < ramp.size(); ++i) {
        if (ramp[i].temp_k < t_min_fit) {
            out.excluded.push_back(i);
            continue;
        }
        const double w = ramp[i].sigma > 0.0 ? 1.0 / (ramp[i].sigma * ramp[i].sigma) : 1.0;
        swtt += w * ramp[i].temp_k * ramp[i].temp_k;
        swty += w * ramp[i].temp_k * ramp[i].g0sq_nm;
        ++used;
    }
    if (used < 4)
        throw ValidationError("calibrate_g0: insufficient thermalized points (need >= 4 at or above t_min_fit)");
    const double slope = swty / swtt;
    for (std::size_t i = 0; i < ramp.size(); ++i) {
        if (ramp[i].temp_k < t_min_fit) continue;
        const double w = ramp[i].sigma > 0.0 ? 1.0 / (ramp[i].sigma * ramp[i].sigma) : 1.0;
        const double d = ramp[i].g0sq_nm - slope * ramp[i].temp_k;
        chi2 += w * d * d;
    }
    if (!(slope > 0.0))
        throw ValidationError("calibrate_g0: non-positive slope; ramp is not thermal");
    const double dof = std::max<double>(1.0, double(used) - 1.0);
    out.slope = slope;
    out.slope_err = std::sqrt(std::max(1.0, chi2 / dof) / swtt);
    out.used_points = used;
    out.g0 = std::sqrt(slope * hbar * omega_m / k_boltzmann);
    out.g0_err = out.g0 * out.slope_err / (2.0 * slope);
    return out;
}

/// Effective bath temperature implied by a measured g0^2 <n_m> given a
/// calibrated g0.
inline double bath_temperature(double g0sq_nm, double g0, double omega_m) {
    if (!(g0 > 0.0) || !(omega_m > 0.0))
        throw ValidationError("bath_temperature: g0 and omega_m must be > 0");
    return g0sq_nm / (g0 * g0) * hbar * omega_m / k_boltzmann;
}

// ---------------------------------------------------------------------------
// Relaxation fits
// ---------------------------------------------------------------------------

struct RelaxationSeries {
    std::vector<double> t_s;
    std::vector<double> delta_f_hz;
};

struct RelaxationFit {
    double delta_f0 = 0.0;    ///< Hz
    double tau_relax = 0.0;   ///< s
    double offset = 0.0;      ///< Hz
    double delta_f0_err = 0.0;
    double tau_err = 0.0;
    double residual_norm = 0.0;
    bool tau_identifiable = true;
};

namespace detail {

inline void check_series(const RelaxationSeries& s) {
    if (s.t_s.size() != s.delta_f_hz.size() || s.t_s.size() < 10)
        throw ValidationError("relaxation_fit: need at least 10 samples");
    for (std::size_t i = 1; i < s.t_s.size(); ++i)
        if (!(s.t_s[i] > s.t_s[i - 1]))
            throw ValidationError("relaxation_fit: time axis must be strictly increasing");
}

inline void init_series(const RelaxationSeries& s, double& offset, double& amp, double& tau) {
    const std::size_t m = s.t_s.size();
    const std::size_t tail = std::max<std::size_t>(2, m / 5);
    offset = 0.0;
    for (std::size_t i = m - tail; i < m; ++i) offset += s.delta_f_hz[i];
    offset /= tail;
    amp = s.delta_f_hz.front() - offset;
    // log-linear slope over the usable range
    double sw = 0, st = 0, sl = 0, stl = 0, stt = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double y = (s.delta_f_hz[i] - offset) / (amp != 0.0 ? amp : 1.0);
        if (y <= 0.02) continue;
        const double l = std::log(y);
        sw += 1.0; st += s.t_s[i]; sl += l; stl += s.t_s[i] * l; stt += s.t_s[i] * s.t_s[i];
    }
    const double denom = sw * stt - st * st;
    tau = (sw >= 3 && denom > 0.0 && (sw * stl - st * sl) < 0.0)
              ? -denom / (sw * stl - st * sl)
              : (s.t_s.back() - s.t_s.front()) / 3.0;
}

} // namespace detail

/// Joint exponential fit: one shared time constant, per-trace amplitude and
/// offset. deltaf(t) = offset + delta_f0 exp(-t/tau).
struct JointRelaxationFit {
    double tau = 0.0;
    double tau_err = 0.0;
    std::vector<RelaxationFit> traces;
    double chi2 = 0.0;
    bool tau_identifiable = true;
};

inline JointRelaxationFit relaxation_fit_joint(const std::vector<RelaxationSeries>& series) {
    if (series.empty())
        throw ValidationError("relaxation_fit: no series given");
    for (const auto& s : series) detail::check_series(s);
    const std::size_t nt = series.size();

    // params: tau, then (offset_i, amp_i)
    Eigen::VectorXd x(1 + 2 * nt);
    Eigen::VectorXd typ(1 + 2 * nt);
    double tau0_acc = 0.0;
    for (std::size_t k = 0; k < nt; ++k) {
        double off, amp, tau;
        detail::init_series(series[k], off, amp, tau);
        x(1 + 2 * k) = off;
        x(2 + 2 * k) = amp;
        typ(1 + 2 * k) = std::abs(off) + std::abs(amp) + 1e-12;
        typ(2 + 2 * k) = std::abs(amp) + 1e-12;
        tau0_acc += tau;
    }
    x(0) = tau0_acc / nt;
    typ(0) = x(0);

    std::size_t total = 0;
    for (const auto& s : series) total += s.t_s.size();
    auto resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(total);
        std::size_t at = 0;
        for (std::size_t k = 0; k < nt; ++k) {
            const auto& s = series[k];
            for (std::size_t i = 0; i < s.t_s.size(); ++i)
                r(at++) = p(1 + 2 * k) + p(2 + 2 * k) * std::exp(-s.t_s[i] / p(0)) -
                          s.delta_f_hz[i];
        }
        return r;
    };
    FeasibleFn pos = [](const Eigen::VectorXd& p) { return p(0) > 0.0; };
    const LMResult lm = levenberg_marquardt(resid, x, {}, nullptr, &pos, &typ);
    if (!lm.converged)
        throw ConvergenceError("relaxation_fit: did not converge");

    JointRelaxationFit out;
    out.tau = lm.params(0);
    out.tau_err = lm.stderrors(0);
    out.chi2 = lm.chi2;
    const double res_rms = std::sqrt(lm.chi2 / std::max<std::size_t>(1, total));
    double amp_scale = 0.0;
    for (std::size_t k = 0; k < nt; ++k)
        amp_scale = std::max(amp_scale, std::abs(lm.params(2 + 2 * k)));
    out.tau_identifiable = amp_scale > 3.0 * res_rms && out.tau_err < out.tau;

    for (std::size_t k = 0; k < nt; ++k) {
        RelaxationFit f;
        f.tau_relax = out.tau;
        f.tau_err = out.tau_err;
        f.offset = lm.params(1 + 2 * k);
        f.delta_f0 = lm.params(2 + 2 * k);
        f.delta_f0_err = lm.stderrors(2 + 2 * k);
        f.tau_identifiable = out.tau_identifiable;
        Eigen::VectorXd r = resid(lm.params);
        f.residual_norm = std::sqrt(r.squaredNorm() / r.size());
        out.traces.push_back(f);
    }

    // the data must span at least two decay constants for tau to be trusted
    if (out.tau_identifiable) {
        for (const auto& s : series)
            if (s.t_s.back() - s.t_s.front() < 2.0 * out.tau)
                throw ValidationError(
                    "relaxation_fit: series spans less than two decay constants");
    }
    return out;
}

inline RelaxationFit relaxation_fit(const RelaxationSeries& series) {
    const auto joint = relaxation_fit_joint({series});
    return joint.traces.front();
}

} // namespace kerrmech::fit
