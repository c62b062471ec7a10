#pragma once

#include <cmath>
#include <vector>

#include "kerrmech/backaction.hpp"
#include "kerrmech/fit.hpp"
#include "kerrmech/steady_state.hpp"

// The headline workflow: fit (r, K) to a low-power phonon-number trace,
// then extrapolate the model to higher input powers by scaling r with the
// known power factor.

namespace kerrmech::pipeline {

struct CoolingTraceData {
    std::vector<double> detuning;   ///< rad/s
    std::vector<double> n_m;        ///< measured phonon occupation
};

struct CoolingFitResult {
    double ratio = 0.0;        ///< n_in / n_bi at the reference power
    double kerr = 0.0;         ///< rad/s per photon
    double ratio_err = 0.0;
    double kerr_err = 0.0;
    double chi2 = 0.0;
    int iterations = 0;
};

/// Model n_m(Delta; r, K) for the occupied low branch.
inline double model_n_m(const SystemParams& base, double ratio, double kerr, double delta,
                        BackactionMethod method) {
    SystemParams p = base;
    p.cavity.kerr = kerr;
    const auto br = branch_at(p, DriveParams::ratio(delta, ratio), BranchLabel::low);
    if (!br || !br->stable)
        throw InstabilityError("cooling-trace model: low branch missing");
    return *backaction_point(*br, p, method).n_m;
}

/// Least squares in log(n_m), which weights the cooling dip and the thermal
/// baseline evenly across their orders of magnitude.
inline CoolingFitResult fit_cooling_trace(const SystemParams& base, const CoolingTraceData& data,
                                          double ratio_init, double kerr_init,
                                          BackactionMethod method = BackactionMethod::quantum_noise) {
    if (data.detuning.size() != data.n_m.size() || data.detuning.size() < 8)
        throw ValidationError("fit_cooling_trace: need at least 8 points");
    for (double v : data.n_m)
        if (!(v > 0.0))
            throw ValidationError("fit_cooling_trace: phonon numbers must be positive");

    auto resid = [&](const Eigen::VectorXd& p) {
        Eigen::VectorXd r(data.detuning.size());
        for (std::size_t i = 0; i < data.detuning.size(); ++i) {
            double model;
            try {
                model = model_n_m(base, p(0), p(1), data.detuning[i], method);
            } catch (const Error&) {
                model = 0.0;  // invalid working point: penalized below
            }
            r(i) = model > 0.0 ? std::log(model) - std::log(data.n_m[i]) : 1e3;
        }
        return r;
    };
    Eigen::VectorXd x0(2);
    x0 << ratio_init, kerr_init;
    Eigen::VectorXd typ(2);
    typ << std::max(ratio_init, 0.1), std::max(std::abs(kerr_init), 1e-5 * base.cavity.kappa());
    fit::FeasibleFn pos = [](const Eigen::VectorXd& p) { return p(0) > 0.0 && p(1) > 0.0; };
    const fit::LMResult lm = fit::levenberg_marquardt(resid, x0, {}, nullptr, &pos, &typ);
    if (!lm.converged)
        throw ConvergenceError("fit_cooling_trace: did not converge");

    CoolingFitResult out;
    out.ratio = lm.params(0);
    out.kerr = lm.params(1);
    out.ratio_err = lm.stderrors(0);
    out.kerr_err = lm.stderrors(1);
    out.chi2 = lm.chi2;
    out.iterations = lm.iterations;
    return out;
}

/// Prediction at a multiple of the reference input power, using the fitted
/// (r, K); everything else comes from the calibrated device record.
inline CoolingTrace predict_trace(const SystemParams& base, const CoolingFitResult& fitres,
                                  double power_factor, const std::vector<double>& grid,
                                  BranchPolicy policy,
                                  SweepDirection direction = SweepDirection::none,
                                  BackactionMethod method = BackactionMethod::quantum_noise) {
    SystemParams p = base;
    p.cavity.kerr = fitres.kerr;
    DriveParams d = DriveParams::ratio(0.0, fitres.ratio * power_factor, direction);
    return cooling_trace(p, d, grid, policy, method);
}

} // namespace kerrmech::pipeline
