#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "kerrmech/errors.hpp"
#include "kerrmech/units.hpp"

// Independent quantum verification of the linearized spectrum: truncated
// Fock-space steady state of the driven Kerr cavity (mechanics dropped) and
// its number-fluctuation spectrum via the quantum regression theorem,
//
//   S_nn[w] = 2 Re Tr[(n - <n>) X],  (i w I + L) X = -(n - <n>) rho_ss.
//
// The oracle is restricted to the monostable regime: in the bistable window
// the true quantum steady state mixes both branches by tunneling and cannot
// validate per-branch linearized spectra. A guard refuses drives with
// r = n_in/n_bi >= 0.8 unless explicitly overridden.

namespace kerrmech::oracle {

using SparseC = Eigen::SparseMatrix<std::complex<double>>;
using VectorC = Eigen::VectorXcd;

/// Driven Kerr cavity in a truncated Fock space, H/hbar =
/// -Delta n - (K/2) n(n-1) + alpha_d (a^dag + a), collapse sqrt(kappa) a.
struct FockProblem {
    int cutoff = 40;                 ///< levels 0..cutoff
    double detuning = 0.0;           ///< rad/s
    double kerr = 0.0;
    double kappa = 1.0;
    double drive_amp = 0.0;          ///< alpha_d, real positive by convention
    int hard_max_cutoff = 400;
    bool allow_strong_drive = false; ///< override the monostable-regime guard
};

/// r = n_in / n_bi implied by the drive amplitude (kappa_c = kappa here).
inline double drive_ratio(const FockProblem& fp) {
    if (!(fp.kerr > 0.0)) return 0.0;
    const double n_in = fp.drive_amp * fp.drive_amp / fp.kappa;
    const double n_bi = fp.kappa * fp.kappa / (3.0 * std::sqrt(3.0) * fp.kerr);
    return n_in / n_bi;
}

namespace detail {

inline void check_guard(const FockProblem& fp) {
    if (!(fp.kappa > 0.0))
        throw ValidationError("oracle: kappa must be > 0");
    const double r = drive_ratio(fp);
    if (r >= 0.8 && !fp.allow_strong_drive) {
        std::ostringstream os;
        os << "oracle is restricted to the monostable regime: r = n_in/n_bi = " << r
           << " >= 0.8; set allow_strong_drive after checking the working point is monostable";
        throw ValidationError(os.str());
    }
}

inline double level_energy(const FockProblem& fp, int n) {
    return -fp.detuning * n - 0.5 * fp.kerr * n * (n - 1.0);
}

} // namespace detail

/// Dense Hamiltonian matrix, used in tests and for Hermiticity checks.
inline Eigen::MatrixXcd fock_hamiltonian(const FockProblem& fp, int cutoff) {
    const int dim = cutoff + 1;
    Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(dim, dim);
    for (int n = 0; n < dim; ++n) {
        h(n, n) = detail::level_energy(fp, n);
        if (n + 1 < dim) {
            const double t = fp.drive_amp * std::sqrt(n + 1.0);
            h(n, n + 1) = t;
            h(n + 1, n) = t;
        }
    }
    return h;
}

/// Sparse Liouvillian over column-stacked rho, index r = i + j (cutoff+1).
inline SparseC liouvillian(const FockProblem& fp, int cutoff) {
    const int dim = cutoff + 1;
    const std::complex<double> im(0.0, 1.0);
    std::vector<Eigen::Triplet<std::complex<double>>> trip;
    trip.reserve(static_cast<std::size_t>(dim) * dim * 6);
    auto idx = [dim](int i, int j) { return i + j * dim; };

    for (int j = 0; j < dim; ++j) {
        for (int i = 0; i < dim; ++i) {
            const int r = idx(i, j);
            const double ei = detail::level_energy(fp, i);
            const double ej = detail::level_energy(fp, j);
            trip.emplace_back(r, r, -im * (ei - ej) - fp.kappa * 0.5 * (i + j));
            // -i H rho: couples i -> i +- 1
            if (i > 0) trip.emplace_back(r, idx(i - 1, j), -im * fp.drive_amp * std::sqrt(double(i)));
            if (i + 1 < dim) trip.emplace_back(r, idx(i + 1, j), -im * fp.drive_amp * std::sqrt(i + 1.0));
            // +i rho H: couples j -> j +- 1
            if (j > 0) trip.emplace_back(r, idx(i, j - 1), im * fp.drive_amp * std::sqrt(double(j)));
            if (j + 1 < dim) trip.emplace_back(r, idx(i, j + 1), im * fp.drive_amp * std::sqrt(j + 1.0));
            // kappa a rho a^dag
            if (i + 1 < dim && j + 1 < dim)
                trip.emplace_back(r, idx(i + 1, j + 1), fp.kappa * std::sqrt((i + 1.0) * (j + 1.0)));
        }
    }
    SparseC l(dim * dim, dim * dim);
    l.setFromTriplets(trip.begin(), trip.end());
    l.makeCompressed();
    return l;
}

inline double inf_norm(const SparseC& m) {
    Eigen::VectorXd row_sums = Eigen::VectorXd::Zero(m.rows());
    for (int k = 0; k < m.outerSize(); ++k)
        for (SparseC::InnerIterator it(m, k); it; ++it)
            row_sums(it.row()) += std::abs(it.value());
    return row_sums.maxCoeff();
}

namespace detail {

inline std::complex<double> vec_trace(const VectorC& x, int dim) {
    std::complex<double> t(0.0, 0.0);
    for (int i = 0; i < dim; ++i) t += x(i + i * dim);
    return t;
}

} // namespace detail

struct SteadyDensity {
    Eigen::MatrixXcd rho;
    int cutoff = 0;              ///< cutoff actually used after auto-growth
    double mean_n = 0.0;
    double var_n = 0.0;
    double residual = 0.0;       ///< ||L rho||_2 / ||L||_inf
    double hermiticity = 0.0;    ///< max |rho - rho^dag| before symmetrization
    double min_eigenvalue = 0.0;
    double top_population = 0.0; ///< population of the top 5 levels
};

namespace detail {

/// Shifted inverse-power iteration for the Liouvillian null vector at a
/// fixed cutoff; trace-normalized each step.
inline SteadyDensity steady_density_fixed(const FockProblem& fp, int cutoff) {
    const int dim = cutoff + 1;
    const SparseC l = liouvillian(fp, cutoff);
    const double norm_l = inf_norm(l);

    SparseC ident(dim * dim, dim * dim);
    ident.setIdentity();

    VectorC x = VectorC::Zero(dim * dim);
    x(0) = 1.0;  // vacuum projector
    double resid = (l * x).norm() / norm_l;

    double sigma = 1e-4 * fp.kappa;
    for (int attempt = 0; attempt < 3 && resid > 1e-12; ++attempt) {
        SparseC shifted = l - std::complex<double>(sigma, 0.0) * ident;
        shifted.makeCompressed();
        Eigen::SparseLU<SparseC> lu;
        lu.compute(shifted);
        if (lu.info() != Eigen::Success)
            throw ConvergenceError("oracle steady state: sparse LU factorization failed");
        double prev = resid;
        for (int it = 0; it < 50; ++it) {
            VectorC y = lu.solve(x);
            const std::complex<double> tr = vec_trace(y, dim);
            if (std::abs(tr) == 0.0)
                throw ConvergenceError("oracle steady state: traceless iterate");
            y /= tr;
            x = y;
            resid = (l * x).norm() / norm_l;
            if (resid <= 1e-13) break;
            if (resid > 0.9 * prev && it > 2) break;  // stalled at this shift
            prev = resid;
        }
        sigma *= 1e-2;
    }
    if (!(resid <= 1e-10)) {
        std::ostringstream os;
        os << "oracle steady state did not converge: residual " << resid
           << " at cutoff " << cutoff;
        throw ConvergenceError(os.str());
    }

    SteadyDensity sd;
    sd.cutoff = cutoff;
    sd.residual = resid;
    Eigen::MatrixXcd rho = Eigen::Map<Eigen::MatrixXcd>(x.data(), dim, dim);
    sd.hermiticity = (rho - rho.adjoint()).cwiseAbs().maxCoeff();
    rho = 0.5 * (rho + rho.adjoint().eval());
    rho /= rho.trace().real();
    sd.rho = rho;

    for (int n = 0; n < dim; ++n) {
        const double pn = rho(n, n).real();
        sd.mean_n += n * pn;
        sd.var_n += double(n) * n * pn;
    }
    sd.var_n -= sd.mean_n * sd.mean_n;
    for (int n = std::max(0, dim - 5); n < dim; ++n) sd.top_population += rho(n, n).real();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(rho, Eigen::EigenvaluesOnly);
    sd.min_eigenvalue = es.eigenvalues().minCoeff();
    return sd;
}

} // namespace detail

/// Steady state with cutoff-adequacy control: grows the truncation until
/// the top five Fock levels hold less than 1e-8 of the population.
inline SteadyDensity steady_density(const FockProblem& fp) {
    detail::check_guard(fp);
    int cutoff = std::max(fp.cutoff, 5);
    for (;;) {
        if (cutoff > fp.hard_max_cutoff) {
            std::ostringstream os;
            os << "oracle steady state: cutoff growth beyond the hard maximum "
               << fp.hard_max_cutoff;
            throw ConvergenceError(os.str());
        }
        SteadyDensity sd = detail::steady_density_fixed(fp, cutoff);
        if (sd.top_population < 1e-8) return sd;
        cutoff += std::max(10, cutoff / 3);
    }
}

namespace detail {

inline double regression_point(const SparseC& l, const SparseC& ident, const VectorC& b,
                               const VectorC& rho_vec, double mean_n, int dim, double kappa,
                               double omega) {
    const std::complex<double> im(0.0, 1.0);
    SparseC a = l + im * omega * ident;
    a.makeCompressed();

    VectorC x;
    double resid = 1e300;
    const double bnorm = b.norm();

    Eigen::SparseLU<SparseC> lu;
    lu.compute(a);
    if (lu.info() == Eigen::Success) {
        x = lu.solve(-b);
        x -= vec_trace(x, dim) * rho_vec;  // remove the null-space component
        resid = (a * x + b).norm() / bnorm;
    }

    if (!(resid <= 1e-8)) {
        // near the Liouvillian kernel (omega ~ 0): regularize and refine
        const double eps = 1e-6 * kappa;
        SparseC m = a + std::complex<double>(eps, 0.0) * ident;
        m.makeCompressed();
        Eigen::SparseLU<SparseC> lu2;
        lu2.compute(m);
        if (lu2.info() != Eigen::Success)
            throw ConvergenceError("oracle_s_nn: regularized factorization failed");
        x = lu2.solve(-b);
        for (int it = 0; it < 10; ++it) {
            x -= vec_trace(x, dim) * rho_vec;
            const VectorC r = -b - a * x;
            if (r.norm() / bnorm <= 1e-10) break;
            x += lu2.solve(r);
        }
        x -= vec_trace(x, dim) * rho_vec;
        resid = (a * x + b).norm() / bnorm;
        if (!(resid <= 1e-8)) {
            std::ostringstream os;
            os << "oracle_s_nn: linear solve did not converge at omega = " << omega
               << " (residual " << resid << ")";
            throw ConvergenceError(os.str());
        }
    }

    std::complex<double> acc(0.0, 0.0);
    for (int i = 0; i < dim; ++i) acc += (double(i) - mean_n) * x(i + i * dim);
    return 2.0 * acc.real();
}

} // namespace detail

/// Quantum-regression spectrum on an arbitrary frequency grid (rad/s,
/// rotating frame). Per-point solves are independent; `jobs` > 1 runs them
/// on a thread pool with indexed writes, so output is order-independent.
inline std::vector<double> oracle_s_nn(const FockProblem& fp, const SteadyDensity& sd,
                                       const std::vector<double>& omega, int jobs = 1) {
    detail::check_guard(fp);
    const int dim = sd.cutoff + 1;
    const SparseC l = liouvillian(fp, sd.cutoff);
    SparseC ident(dim * dim, dim * dim);
    ident.setIdentity();

    VectorC rho_vec(dim * dim);
    for (int j = 0; j < dim; ++j)
        for (int i = 0; i < dim; ++i) rho_vec(i + j * dim) = sd.rho(i, j);

    VectorC b(dim * dim);
    for (int j = 0; j < dim; ++j)
        for (int i = 0; i < dim; ++i) b(i + j * dim) = (double(i) - sd.mean_n) * sd.rho(i, j);

    std::vector<double> out(omega.size(), 0.0);
    if (b.norm() == 0.0) return out;  // number eigenstate: no fluctuations
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(omega.size())));
    if (workers == 1) {
        for (std::size_t k = 0; k < omega.size(); ++k)
            out[k] = detail::regression_point(l, ident, b, rho_vec, sd.mean_n, dim,
                                              fp.kappa, omega[k]);
        return out;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::mutex err_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t k = w; k < omega.size(); k += workers)
                    out[k] = detail::regression_point(l, ident, b, rho_vec, sd.mean_n,
                                                      dim, fp.kappa, omega[k]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return out;
}

/// Truncation-convergence report: re-solves at three cutoffs and tracks the
/// change in <n> and in S_nn at five probe frequencies.
struct ConvergenceReport {
    std::array<int, 3> cutoffs{};
    std::array<double, 5> probe_omega{};
    double max_rel_change_mean_n = 0.0;
    double max_rel_change_s_nn = 0.0;
    bool converged = false;   ///< both changes below 0.1%
    std::array<double, 3> mean_n{};

    std::string text() const {
        std::ostringstream os;
        os << "oracle convergence sweep\n";
        os << "  cutoffs: " << cutoffs[0] << " " << cutoffs[1] << " " << cutoffs[2] << "\n";
        os << "  mean_n: " << mean_n[0] << " " << mean_n[1] << " " << mean_n[2] << "\n";
        os << "  max rel change mean_n: " << max_rel_change_mean_n << "\n";
        os << "  max rel change s_nn:   " << max_rel_change_s_nn << "\n";
        os << "  converged (0.1%): " << (converged ? "yes" : "NO") << "\n";
        return os.str();
    }
};

inline ConvergenceReport convergence_sweep(const FockProblem& fp) {
    detail::check_guard(fp);
    ConvergenceReport rep;
    rep.cutoffs = {fp.cutoff, fp.cutoff + 10, fp.cutoff + 20};
    rep.probe_omega = {-2.0 * fp.kappa, -fp.kappa, 0.0, fp.kappa, 2.0 * fp.kappa};

    std::array<std::array<double, 5>, 3> spectra{};
    for (int c = 0; c < 3; ++c) {
        const SteadyDensity sd = detail::steady_density_fixed(fp, rep.cutoffs[c]);
        rep.mean_n[c] = sd.mean_n;
        const std::vector<double> grid(rep.probe_omega.begin(), rep.probe_omega.end());
        const auto s = oracle_s_nn(fp, sd, grid);
        for (int k = 0; k < 5; ++k) spectra[c][k] = s[k];
    }
    auto relchange = [](double a, double bb) {
        return std::abs(a - bb) / std::max({std::abs(a), std::abs(bb), 1e-12});
    };
    for (int c = 1; c < 3; ++c) {
        rep.max_rel_change_mean_n =
            std::max(rep.max_rel_change_mean_n, relchange(rep.mean_n[c], rep.mean_n[c - 1]));
        for (int k = 0; k < 5; ++k)
            rep.max_rel_change_s_nn =
                std::max(rep.max_rel_change_s_nn, relchange(spectra[c][k], spectra[c - 1][k]));
    }
    rep.converged = rep.max_rel_change_mean_n < 1e-3 && rep.max_rel_change_s_nn < 1e-3;
    return rep;
}

} // namespace kerrmech::oracle
