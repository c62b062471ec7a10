#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "kerrmech/errors.hpp"
#include "kerrmech/params.hpp"
#include "kerrmech/spectrum.hpp"
#include "kerrmech/steady_state.hpp"

// Mechanical observables under drive: optical damping, effective linewidth,
// frequency shift, and steady phonon occupation, per detuning and branch.
// Two routes: the scattering (quantum-noise) picture built on S_nn, and the
// eigenvalues of the full 4x4 fluctuation drift matrix. They agree to
// O((g0 sqrt(n_c)/kappa)^2) in weak coupling, which the tests pin at 1%.

namespace kerrmech {

struct BackactionPoint {
    double detuning = 0.0;            ///< rad/s
    BranchLabel branch = BranchLabel::low;
    bool valid = false;
    std::string invalid_reason;       ///< set when !valid; numeric fields stay empty
    std::optional<double> n_c;
    std::optional<double> n_m;
    std::optional<double> gamma_eff;      ///< rad/s
    std::optional<double> delta_omega_m;  ///< rad/s
    std::optional<double> gamma_opt;      ///< rad/s
};

enum class BackactionMethod { quantum_noise, eigenvalue, automatic };

inline const char* to_string(BackactionMethod m) {
    switch (m) {
        case BackactionMethod::quantum_noise: return "quantum-noise";
        case BackactionMethod::eigenvalue: return "eigenvalue";
        default: return "automatic";
    }
}

/// Optomechanically dressed Kerr constant.
inline double effective_kerr(const SystemParams& p) {
    const double wm = p.mech.omega_m;
    const double gm = p.mech.gamma_m;
    return p.cavity.kerr +
           2.0 * p.mech.g0 * p.mech.g0 * wm / (wm * wm + gm * gm / 4.0);
}

/// Scattering-picture backaction on a stable branch.
///   gamma_opt = g0^2 (S_nn[omega_m] - S_nn[-omega_m])
///   n_m = (Gamma_m n_th + g0^2 S_nn[-omega_m]) / gamma_eff
/// The frequency shift is the real part of the optomechanical self-energy
/// at omega_m, the exact Kerr generalization of the optical spring.
inline BackactionPoint backaction_quantum_noise(const SteadyStateBranch& b,
                                                const SystemParams& p) {
    const LinearizedCavity lin = linearize(b, p);
    const MechParams& m = p.mech;
    const double g2 = m.g0 * m.g0;
    const double s_plus = s_nn(lin, +m.omega_m);
    const double s_minus = s_nn(lin, -m.omega_m);
    const double gamma_opt = g2 * (s_plus - s_minus);
    const double gamma_eff = m.gamma_m + gamma_opt;
    if (!(gamma_eff > 0.0)) {
        std::ostringstream os;
        os << "parametric instability: no mechanical steady state (gamma_eff = "
           << gamma_eff << " rad/s at Delta = " << b.detuning << ")";
        throw InstabilityError(os.str());
    }
    const std::complex<double> den = detail::spectrum_denominator(lin, m.omega_m);
    const double spring =
        2.0 * g2 * b.n_c * b.delta_bar * den.real() / std::norm(den);

    BackactionPoint pt;
    pt.detuning = b.detuning;
    pt.branch = b.label;
    pt.valid = true;
    pt.n_c = b.n_c;
    pt.gamma_opt = gamma_opt;
    pt.gamma_eff = gamma_eff;
    pt.n_m = (m.gamma_m * m.n_th + g2 * s_minus) / gamma_eff;
    pt.delta_omega_m = spring;
    return pt;
}

namespace detail {

/// Drift matrix over (d, d^dag, c, c^dag) with G = g0 alpha.
inline Eigen::Matrix4cd drift_matrix_4(const SteadyStateBranch& b, const SystemParams& p) {
    const std::complex<double> i(0.0, 1.0);
    const std::complex<double> lam = p.cavity.kerr * b.alpha * b.alpha;
    const std::complex<double> g = p.mech.g0 * b.alpha;
    const double kappa = p.cavity.kappa();
    const double wm = p.mech.omega_m;
    const double gm = p.mech.gamma_m;

    Eigen::Matrix4cd m = Eigen::Matrix4cd::Zero();
    m(0, 0) = i * b.delta_tilde - kappa / 2.0;
    m(0, 1) = i * lam;
    m(0, 2) = -i * g;
    m(0, 3) = -i * g;
    m(1, 0) = -i * std::conj(lam);
    m(1, 1) = -i * b.delta_tilde - kappa / 2.0;
    m(1, 2) = i * std::conj(g);
    m(1, 3) = i * std::conj(g);
    m(2, 0) = -i * std::conj(g);
    m(2, 1) = -i * g;
    m(2, 2) = -i * wm - gm / 2.0;
    m(3, 0) = i * std::conj(g);
    m(3, 1) = i * g;
    m(3, 3) = i * wm - gm / 2.0;
    return m;
}

} // namespace detail

/// Backaction from the eigenvalues of the full 4x4 fluctuation dynamics.
/// The mechanical pair is identified by maximal eigenvector weight on the
/// (c, c^dag) subspace, which stays well defined near avoided crossings.
inline BackactionPoint backaction_eigenvalue(const SteadyStateBranch& b,
                                             const SystemParams& p) {
    if (!b.stable)
        throw InstabilityError("backaction_eigenvalue: branch is unstable");
    const MechParams& m = p.mech;

    BackactionPoint pt;
    pt.detuning = b.detuning;
    pt.branch = b.label;
    pt.valid = true;
    pt.n_c = b.n_c;

    if (m.g0 == 0.0 || b.n_c == 0.0) {
        pt.gamma_eff = m.gamma_m;
        pt.gamma_opt = 0.0;
        pt.delta_omega_m = 0.0;
        pt.n_m = m.n_th;
        return pt;
    }

    const Eigen::Matrix4cd mat = detail::drift_matrix_4(b, p);
    Eigen::ComplexEigenSolver<Eigen::Matrix4cd> es(mat, /*computeEigenvectors=*/true);
    if (es.info() != Eigen::Success)
        throw ConvergenceError("backaction_eigenvalue: eigensolver failed");

    double weights[4];
    for (int k = 0; k < 4; ++k) {
        const Eigen::Vector4cd v = es.eigenvectors().col(k);
        weights[k] = (std::norm(v(2)) + std::norm(v(3))) / v.squaredNorm();
    }
    for (int k = 0; k < 4; ++k) {
        if (es.eigenvalues()(k).real() > 0.0) {
            std::ostringstream os;
            os << "instability: " << (weights[k] > 0.5 ? "mechanical" : "cavity")
               << "-like mode has eigenvalue " << es.eigenvalues()(k)
               << " at Delta = " << b.detuning;
            throw InstabilityError(os.str());
        }
    }

    // mechanical pair = two largest (c, c^dag) weights; report the member
    // rotating as e^{-i omega t}
    int first = 0, second = 1;
    if (weights[second] > weights[first]) std::swap(first, second);
    for (int k = 2; k < 4; ++k) {
        if (weights[k] > weights[first]) { second = first; first = k; }
        else if (weights[k] > weights[second]) { second = k; }
    }
    std::complex<double> lam_mech = es.eigenvalues()(first);
    const std::complex<double> lam_other = es.eigenvalues()(second);
    if (lam_mech.imag() > 0.0 && lam_other.imag() < 0.0) lam_mech = lam_other;

    const double omega_eff = std::abs(lam_mech.imag());
    const double gamma_eff = -2.0 * lam_mech.real();
    pt.gamma_eff = gamma_eff;
    pt.gamma_opt = gamma_eff - m.gamma_m;
    pt.delta_omega_m = omega_eff - m.omega_m;

    // occupation from the scattering rates with the eigenvalue linewidth
    const LinearizedCavity lin = linearize(b, p);
    const double g2 = m.g0 * m.g0;
    pt.n_m = (m.gamma_m * m.n_th + g2 * s_nn(lin, -m.omega_m)) / gamma_eff;
    return pt;
}

/// Weak-coupling guard: the scattering picture is quantitative while
/// g0 sqrt(n_c) <= kappa/100; beyond it the eigenvalue route takes over.
inline bool weak_coupling(const SteadyStateBranch& b, const SystemParams& p) {
    return p.mech.g0 * std::sqrt(b.n_c) <= p.cavity.kappa() / 100.0;
}

inline BackactionPoint backaction_point(const SteadyStateBranch& b, const SystemParams& p,
                                        BackactionMethod method) {
    switch (method) {
        case BackactionMethod::quantum_noise: return backaction_quantum_noise(b, p);
        case BackactionMethod::eigenvalue: return backaction_eigenvalue(b, p);
        default:
            return weak_coupling(b, p) ? backaction_quantum_noise(b, p)
                                       : backaction_eigenvalue(b, p);
    }
}

enum class BranchPolicy { follow_sweep, low_branch, high_branch };

struct CoolingTrace {
    std::vector<BackactionPoint> points;
    SweepDirection direction = SweepDirection::none;
    double ratio = 0.0;                        ///< n_in / n_bi when Kerr > 0, else 0
    BackactionMethod method = BackactionMethod::automatic;
};

/// Branch-resolved backaction trace over a detuning grid. Points where the
/// requested branch is absent, unstable, or parametrically unstable are
/// flagged invalid, never extrapolated.
inline CoolingTrace cooling_trace(const SystemParams& p, const DriveParams& drive,
                                  const std::vector<double>& grid,
                                  BranchPolicy policy,
                                  BackactionMethod method = BackactionMethod::automatic) {
    if (grid.empty())
        throw ValidationError("cooling_trace: empty detuning grid");

    CoolingTrace trace;
    trace.direction = drive.direction;
    trace.method = method;
    if (p.cavity.kerr > 0.0) trace.ratio = drive_ratio(p, drive);

    std::vector<BranchLabel> identity(grid.size());
    if (policy == BranchPolicy::follow_sweep) {
        const SweepResult sweep = hysteresis_sweep(p, drive, grid);
        identity = sweep.occupied;
    } else {
        std::fill(identity.begin(), identity.end(),
                  policy == BranchPolicy::low_branch ? BranchLabel::low : BranchLabel::high);
    }

    for (std::size_t i = 0; i < grid.size(); ++i) {
        DriveParams d = drive;
        d.detuning = grid[i];
        BackactionPoint pt;
        pt.detuning = grid[i];
        pt.branch = identity[i];
        const std::optional<SteadyStateBranch> br = branch_at(p, d, identity[i]);
        if (!br) {
            pt.invalid_reason = "branch does not exist at this detuning";
        } else if (!br->stable) {
            pt.invalid_reason = "branch is unstable";
        } else {
            try {
                pt = backaction_point(*br, p, method);
                pt.branch = identity[i];
            } catch (const InstabilityError& e) {
                pt.valid = false;
                pt.invalid_reason = e.what();
                pt.n_c.reset(); pt.n_m.reset(); pt.gamma_eff.reset();
                pt.delta_omega_m.reset(); pt.gamma_opt.reset();
            }
        }
        trace.points.push_back(std::move(pt));
    }
    return trace;
}

} // namespace kerrmech
