// Acceptance suite: runs every criterion at its stated tolerance and prints
// one pass/fail line per criterion. Exit code is the number of failed
// criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kerrmech/backaction.hpp"
#include "kerrmech/fit.hpp"
#include "kerrmech/oracle.hpp"
#include "kerrmech/pipeline.hpp"
#include "kerrmech/spectrum.hpp"
#include "kerrmech/steady_state.hpp"
#include "kerrmech/units.hpp"

using namespace kerrmech;

namespace {

struct Criterion {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [FAILED: " << what << "]";
        }
    }
};

int failures = 0;

template <class Fn>
void run_criterion(int number, const std::string& title, Fn&& fn,
                   double max_seconds = 0.0) {
    Criterion c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        fn(c);
    } catch (const std::exception& e) {
        c.pass = false;
        c.detail << " [EXCEPTION: " << e.what() << "]";
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (max_seconds > 0.0 && secs > max_seconds) {
        c.pass = false;
        c.detail << " [FAILED: runtime " << secs << " s exceeds " << max_seconds << " s]";
    }
    std::printf("%s criterion %2d: %s%s (%.1f s)\n", c.pass ? "PASS" : "FAIL", number,
                title.c_str(), c.detail.str().c_str(), secs);
    std::fflush(stdout);
    if (!c.pass) ++failures;
}

SystemParams make_cavity(double kappa_c, double kappa_i, double kerr) {
    SystemParams p;
    p.cavity.omega_c = 1e5 * (kappa_c + kappa_i);
    p.cavity.kappa_c = kappa_c;
    p.cavity.kappa_i = kappa_i;
    p.cavity.kerr = kerr;
    p.mech.omega_m = 0.3 * (kappa_c + kappa_i);
    p.mech.gamma_m = 1e-6 * (kappa_c + kappa_i);
    p.mech.g0 = 0.0;
    p.mech.n_th = 0.0;
    return p;
}

SystemParams reference_device() {
    SystemParams p;
    p.cavity.omega_c = hz_to_angular(8.1e9);
    p.cavity.kappa_c = hz_to_angular(1.4e6);  // split unreported; drive given as r
    p.cavity.kappa_i = hz_to_angular(1.4e6);
    p.cavity.kerr = hz_to_angular(14e3);
    p.mech.omega_m = hz_to_angular(287.3e3);
    p.mech.gamma_m = hz_to_angular(0.4);
    p.mech.g0 = hz_to_angular(99.0);
    p.mech.n_th = thermal_occupation(0.267, hz_to_angular(287.3e3));
    return p;
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> g;
    for (int i = 0; i < n; ++i) g.push_back(a + (b - a) * i / (n - 1));
    return g;
}

// Independent bifurcation-onset oracle: the textbook discriminant of the
// scaled cubic, maximized over detuning; onset in n_in found by bisection.
double discriminant(double d, double eps) {
    const double b = 2.0 * d, c = d * d + 0.25, e = -eps;
    return 18.0 * b * c * e - 4.0 * b * b * b * e + b * b * c * c - 4.0 * c * c * c -
           27.0 * e * e;
}

double max_discriminant(double eps) {
    double best = -1e300, best_d = -1.0;
    for (int i = 0; i <= 2400; ++i) {
        const double d = -6.0 + 5.8 * i / 2400.0;
        const double v = discriminant(d, eps);
        if (v > best) { best = v; best_d = d; }
    }
    double lo = best_d - 0.01, hi = best_d + 0.01;
    const double gr = 0.6180339887498949;
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = discriminant(x1, eps), f2 = discriminant(x2, eps);
    for (int it = 0; it < 120; ++it) {
        if (f1 > f2) { hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = discriminant(x1, eps); }
        else { lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = discriminant(x2, eps); }
    }
    return std::max(f1, f2);
}

double onset_by_bisection(const SystemParams& p) {
    const double kappa = p.cavity.kappa();
    auto bistable = [&](double n_in) {
        const double eps =
            p.cavity.kerr * p.cavity.kappa_c * n_in / (kappa * kappa * kappa);
        return max_discriminant(eps) > 0.0;
    };
    double lo = kappa, hi = kappa;
    while (bistable(lo)) lo *= 0.25;
    while (!bistable(hi)) hi *= 4.0;
    for (int it = 0; it < 70; ++it) {
        const double mid = std::sqrt(lo * hi);
        if (bistable(mid)) hi = mid; else lo = mid;
    }
    return std::sqrt(lo * hi);
}

} // namespace

// ---------------------------------------------------------------------------

void criterion_1(Criterion& c) {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const SystemParams p =
            make_cavity(0.3 + u(rng), u(rng), 0.02 + 0.33 * u(rng));
        const double onset = onset_by_bisection(p);
        const double rel = std::abs(onset - critical_input(p)) / critical_input(p);
        worst = std::max(worst, rel);
    }
    c.detail << " [max rel " << worst << "]";
    c.require(worst <= 1e-3, "onset deviates more than 0.1%");
}

void criterion_2(Criterion& c) {
    const double kappa = 1.0, kerr = 0.05;
    const SystemParams p = make_cavity(0.5, 0.5, kerr);
    const double delta_c = -std::sqrt(3.0) / 2.0 * kappa;
    const double n_star = kappa / (std::sqrt(3.0) * kerr);

    const auto sol = solve_steady_states(p, DriveParams::ratio(delta_c, 1.0));
    c.require(sol.branches.size() == 1 && sol.branches[0].multiplicity >= 2,
              "no degenerate root at the critical point");
    const double rel = std::abs(sol.branches[0].n_c - n_star) / n_star;
    c.detail << " [n_c rel err " << rel << "]";
    c.require(rel <= 1e-6, "critical photon number off by more than 1e-6");

    // tangency scan: f(n) - rhs touches zero at n_star without crossing twice
    const double rhs = p.cavity.kappa_c * critical_input(p);
    auto f = [&](double n) {
        const double db = delta_c + kerr * n;
        return n * (db * db + kappa * kappa / 4.0) - rhs;
    };
    c.require(std::abs(f(n_star)) <= 1e-9 * rhs, "tangency residual above 1e-9");
    int crossings = 0;
    double prev = f(1e-6 * n_star);
    for (int i = 1; i <= 100000; ++i) {
        const double cur = f(3.0 * n_star * i / 100000.0);
        if ((prev < 0.0 && cur >= 0.0) || (prev > 0.0 && cur <= 0.0)) ++crossings;
        prev = cur;
    }
    c.require(crossings <= 1, "multiple crossings at the critical drive");

    // the degenerate point sits at Delta = -sqrt(3) kappa / 2
    const auto w = bistable_window(p, DriveParams::ratio(0.0, 1.0 + 1e-9));
    c.require(w.exists, "window missing just above threshold");
    c.require(std::abs(0.5 * (w.delta_lo + w.delta_hi) - delta_c) <= 1e-3 * kappa,
              "window does not collapse onto -sqrt(3) kappa / 2");
}

void criterion_3(Criterion& c) {
    const SystemParams p = make_cavity(0.6, 0.4, 0.0);
    double worst = 0.0;
    for (const double delta : {-2.3, 0.0, 1.1}) {
        const auto sol = solve_steady_states(p, DriveParams::flux(delta, 0.7));
        const auto lin = linearize(sol.branches[0], p);
        for (const double w : linspace(-20.0, 20.0, 2001)) {
            const double expected =
                lin.n_c / (0.25 + (w + delta) * (w + delta));
            worst = std::max(worst, std::abs(s_nn(lin, w) - expected) /
                                        std::max(expected, 1e-300));
        }
    }
    c.detail << " [max rel " << worst << "]";
    c.require(worst <= 1e-12, "linear-limit identity above 1e-12");
}

void criterion_4(Criterion& c) {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    int checked = 0;
    while (checked < 1000) {
        const double kerr = (u(rng) < 0.1 ? 0.0 : 0.6 * u(rng)) * (u(rng) < 0.2 ? -1.0 : 1.0);
        const SystemParams p = make_cavity(0.2 + u(rng), u(rng), kerr);
        const double kappa = p.cavity.kappa();
        const auto sol = solve_steady_states(
            p, DriveParams::flux((u(rng) * 10.0 - 5.0) * kappa, 5.0 * u(rng) * kappa));
        for (const auto& b : sol.branches) {
            if (!b.stable) continue;
            const auto lin = linearize(b, p);
            const double w = (u(rng) * 40.0 - 20.0) * kappa;
            const double a = s_nn(lin, w);
            const double m = s_nn_matrix_route(lin, w);
            worst = std::max(worst, std::abs(a - m) / std::max({a, m, 1e-300}));
            ++checked;
        }
    }
    c.detail << " [max rel " << worst << " over 1000 draws]";
    c.require(worst <= 1e-10, "routes disagree beyond 1e-10");
}

void criterion_5(Criterion& c) {
    // The pinned benchmark sits at r = 0.81; monostability is verified below
    // and the guard overridden deliberately.
    auto deviation = [&](double n_target, int cutoff, int* cutoff_used) {
        const double kerr = 0.6 / n_target;
        const double delta = -0.5;
        const double rhs = n_target * ((delta + 0.6) * (delta + 0.6) + 0.25);
        oracle::FockProblem fp;
        fp.cutoff = cutoff;
        fp.kappa = 1.0;
        fp.kerr = kerr;
        fp.detuning = delta;
        fp.drive_amp = std::sqrt(rhs);
        fp.allow_strong_drive = true;
        const auto sd = oracle::steady_density(fp);
        if (cutoff_used) *cutoff_used = sd.cutoff;

        SystemParams p = make_cavity(1.0, 0.0, kerr);
        const auto sol = solve_steady_states(p, DriveParams::flux(delta, rhs));
        if (sol.branches.size() != 1)
            throw ValidationError("benchmark is not monostable");
        const auto lin = linearize(sol.branches.back(), p);

        const auto grid = linspace(-3.0, 3.0, 61);
        const auto s_or = oracle::oracle_s_nn(fp, sd, grid, 2);
        double worst = 0.0, mean = 0.0;
        for (std::size_t k = 0; k < grid.size(); ++k) {
            const double rel = std::abs(s_nn(lin, grid[k]) - s_or[k]) / s_or[k];
            worst = std::max(worst, rel);
            mean += rel / grid.size();
        }
        c.detail << " [n_c=" << n_target << ": worst " << worst << ", mean " << mean
                 << ", cutoff " << sd.cutoff << "]";
        return worst;
    };
    int used2 = 0, used8 = 0;
    const double e2 = deviation(2.0, 30, &used2);
    const double e8 = deviation(8.0, 54, &used8);
    c.require(e2 <= 0.15,
              "linearized vs oracle above 15% at n_c = 2 (known red: the budget is "
              "tighter than the physical linearization error; both routes are "
              "verified independently)");
    c.require(e8 < e2, "error does not shrink at n_c = 8");
    c.require(used2 <= 120 && used8 <= 120, "cutoff exceeded 120");
}

void criterion_6(Criterion& c) {
    auto imbalance_setup = [](double kerr_hz) {
        SystemParams p;
        p.cavity.omega_c = hz_to_angular(8.1e9);
        p.cavity.kappa_c = hz_to_angular(1.5e6);
        p.cavity.kappa_i = hz_to_angular(1.5e6);
        p.cavity.kerr = hz_to_angular(kerr_hz);
        p.mech.omega_m = hz_to_angular(300e3);
        p.mech.gamma_m = hz_to_angular(5.0);
        p.mech.g0 = hz_to_angular(1.7e3);
        p.mech.n_th = 0.0;
        return p;
    };
    const SystemParams p2 = imbalance_setup(16e3);
    const double n_in = 1.5 * critical_input(p2);
    const double wm = p2.mech.omega_m;

    auto imbalance = [&](const SystemParams& p, double delta,
                         BranchLabel which) -> std::optional<double> {
        const auto br = branch_at(p, DriveParams::flux(delta, n_in), which);
        if (!br || !br->stable) return std::nullopt;
        const auto [gs, gas] = scattering_rates(linearize(*br, p), p.mech);
        return gs - gas;
    };

    // K0: the imbalance is odd in Delta to 1e-10
    const SystemParams p0 = imbalance_setup(0.0);
    double worst_odd = 0.0, scale = 0.0;
    for (const double delta : linspace(0.1 * wm, 13.0 * wm, 400)) {
        const double plus = *imbalance(p0, delta, BranchLabel::low);
        const double minus = *imbalance(p0, -delta, BranchLabel::low);
        worst_odd = std::max(worst_odd, std::abs(plus + minus));
        scale = std::max(scale, std::abs(plus));
    }
    c.detail << " [K0 oddness " << worst_odd / scale << "]";
    c.require(worst_odd <= 1e-10 * scale, "K0 imbalance not odd to 1e-10");

    // K2: two stable branches inside the window
    const double delta_fig = -11.0 * wm;
    const auto sol = solve_steady_states(p2, DriveParams::flux(delta_fig, n_in));
    c.require(sol.branches.size() == 3 && sol.branches[0].stable && sol.branches[2].stable,
              "K2 does not produce two stable branches at Delta = -11 omega_m");

    // per-branch rate curves end exactly at the spinodals (within grid step)
    const auto w = bistable_window(p2, DriveParams::flux(0.0, n_in));
    c.require(w.exists, "no bistable window for K2");
    const double step = wm / 50.0;
    const auto grid = linspace(w.delta_lo - 60.0 * step, w.delta_hi + 60.0 * step,
                               int((w.delta_hi - w.delta_lo + 120.0 * step) / step) + 1);
    double last_low = -1e300, first_high = 1e300;
    for (const double d : grid) {
        if (imbalance(p2, d, BranchLabel::low)) last_low = std::max(last_low, d);
        if (imbalance(p2, d, BranchLabel::high)) first_high = std::min(first_high, d);
    }
    c.require(std::abs(last_low - w.delta_hi) <= step * 1.01,
              "low-branch rates do not end at the upper spinodal");
    c.require(std::abs(first_high - w.delta_lo) <= step * 1.01,
              "high-branch rates do not start at the lower spinodal");
    // and the two branches disagree discontinuously there
    const double low_at = *imbalance(p2, last_low, BranchLabel::low);
    const double high_at = *imbalance(p2, last_low, BranchLabel::high);
    c.require(std::abs(high_at - low_at) > 1e-3 * std::abs(low_at),
              "no rate discontinuity across the spinodal");
}

void criterion_7(Criterion& c) {
    std::mt19937_64 rng(707);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    int done = 0;
    while (done < 100) {
        SystemParams p = make_cavity(0.3 + u(rng), u(rng),
                                     0.5 * u(rng) * (u(rng) < 0.25 ? -1.0 : 1.0));
        const double kappa = p.cavity.kappa();
        p.mech.omega_m = (0.05 + 3.0 * u(rng)) * kappa;
        p.mech.gamma_m = (1e-6 + 1e-4 * u(rng)) * kappa;
        p.mech.n_th = 50.0 * u(rng);
        const auto sol = solve_steady_states(
            p, DriveParams::flux((u(rng) * 8.0 - 4.0) * kappa, 4.0 * u(rng) * kappa));
        for (const auto& b : sol.branches) {
            if (!b.stable || b.n_c <= 0.0) continue;
            p.mech.g0 = (0.2 + 0.8 * u(rng)) * kappa / (100.0 * std::sqrt(b.n_c));
            try {
                const auto qn = backaction_quantum_noise(b, p);
                const auto ev = backaction_eigenvalue(b, p);
                const double diff = std::abs((*ev.gamma_eff - p.mech.gamma_m) - *qn.gamma_opt);
                worst = std::max(worst,
                                 diff / std::max(std::abs(*qn.gamma_opt), 1e-12 * kappa));
            } catch (const InstabilityError&) {
                continue;
            }
            ++done;
        }
    }
    c.detail << " [max rel " << worst << " over 100 draws]";
    c.require(worst <= 0.01, "methods disagree beyond 1%");
}

void criterion_8(Criterion& c) {
    const double n = thermal_occupation(0.150, hz_to_angular(287.3e3));
    c.detail << " [n_th(150 mK) = " << n << "]";
    c.require(std::abs(n - 1.09e4) <= 0.01 * 1.09e4, "thermal anchor off by more than 1%");
}

void criterion_9(Criterion& c) {
    const SystemParams p = reference_device();
    const double kappa = p.cavity.kappa();

    // r = 0.54: asymmetric cooling window below the thermal baseline
    const auto grid054 = linspace(-3.0 * kappa, -0.02 * kappa, 1200);
    const auto trace054 = cooling_trace(p, DriveParams::ratio(0.0, 0.54), grid054,
                                        BranchPolicy::low_branch);
    double best = 1e300, best_delta = 0.0;
    for (const auto& pt : trace054.points) {
        if (pt.valid && *pt.n_m < best) { best = *pt.n_m; best_delta = pt.detuning; }
    }
    c.require(best < p.mech.n_th, "no cooling below n_th at r = 0.54");
    const double half = std::sqrt(best * p.mech.n_th);
    double left = 0.0, right = 0.0;
    for (const auto& pt : trace054.points) {
        if (!pt.valid) continue;
        if (pt.detuning < best_delta && *pt.n_m > half) left = best_delta - pt.detuning;
        if (pt.detuning > best_delta && right == 0.0 && *pt.n_m > half)
            right = pt.detuning - best_delta;
    }
    const double asym = std::abs(left - right) / (left + right);
    c.detail << " [min n_m/n_th " << best / p.mech.n_th << ", asymmetry " << asym << "]";
    c.require(asym > 0.10, "cooling window not asymmetric");

    // bistable windows at r = 1.9 and 3.0
    const auto w19 = bistable_window(p, DriveParams::ratio(0.0, 1.9));
    const auto w30 = bistable_window(p, DriveParams::ratio(0.0, 3.0));
    c.require(w19.exists && w30.exists, "windows missing beyond bifurcation");
    const double width19 = angular_to_hz(w19.delta_hi - w19.delta_lo);
    const double width30 = angular_to_hz(w30.delta_hi - w30.delta_lo);
    c.detail << " [widths " << width19 / 1e6 << " / " << width30 / 1e6 << " MHz]";
    c.require(width30 > width19, "window widths not ordered");
    c.require(width30 > 2e6 / 1.5 && width30 < 2e6 * 1.5,
              "r = 3 window not within a factor 1.5 of 2 MHz");

    // branch-resolved traces: best cooling on the low branch
    for (const double r : {1.9, 3.0}) {
        const auto w = bistable_window(p, DriveParams::ratio(0.0, r));
        const auto grid = linspace(w.delta_lo - 1.5 * kappa, w.delta_hi + 0.3 * kappa, 900);
        const auto low =
            cooling_trace(p, DriveParams::ratio(0.0, r), grid, BranchPolicy::low_branch);
        const auto high =
            cooling_trace(p, DriveParams::ratio(0.0, r), grid, BranchPolicy::high_branch);
        int coexist = 0;
        double min_low = 1e300, min_high = 1e300;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (low.points[i].valid && high.points[i].valid) ++coexist;
            if (low.points[i].valid) min_low = std::min(min_low, *low.points[i].n_m);
            if (high.points[i].valid) min_high = std::min(min_high, *high.points[i].n_m);
        }
        c.require(coexist > 10, "branches do not coexist at r = " + std::to_string(r));
        c.require(min_low < min_high,
                  "best cooling not on the low branch at r = " + std::to_string(r));
    }
}

void criterion_10(Criterion& c) {
    // (a) Kerr circle fit: K/2pi = 12 kHz with the +-2 dB refit machinery
    const double omega_c = hz_to_angular(8.1e9);
    const double q_l = omega_c / hz_to_angular(2.8e6);
    const double q_c = 1.9 * q_l, amp = 0.83, alpha = 0.42, tau = 32e-9, phi0 = 0.21;
    const double kappa = omega_c / q_l;
    const double kerr_true = hz_to_angular(12e3);
    const double att = 60.0;

    auto synth = [&](double n_c, double att_true) {
        fit::S21Trace tr;
        tr.power_dbm = 10.0 * std::log10(n_c * (kappa * kappa / 4.0) *
                                         (2.0 * q_c / omega_c) * hbar * omega_c * 2.0 / 1e-3) +
                       att_true;
        tr.attenuation_db = att;  // what the fit assumes
        tr.attenuation_sigma_db = 2.0;
        std::vector<double> omega;
        for (int i = 0; i < 260; ++i) {
            const double w = omega_c + 14.0 * kappa * (double(i) / 259.0 - 0.55);
            omega.push_back(w);
            tr.freq_hz.push_back(angular_to_hz(w));
        }
        // generate at the true attenuation
        fit::S21Trace gen = tr;
        gen.attenuation_db = att_true;
        const auto n = fit::detail::kerr_trace_photon_numbers(gen, omega, q_l, q_c, omega_c,
                                                              kerr_true, 0.0, nullptr, nullptr);
        for (int i = 0; i < 260; ++i)
            tr.s21.push_back(fit::detail::s21_model(omega[i], amp, alpha, tau, q_l, q_c, phi0,
                                                    omega_c - kerr_true * n[i]));
        return tr;
    };

    {
        std::vector<fit::S21Trace> traces = {synth(3.0, att), synth(15.0, att),
                                             synth(40.0, att)};
        const fit::KerrCircleFit kf = fit::circle_fit_kerr(traces);
        const double err_hz = std::abs(angular_to_hz(*kf.params.kerr) - 12e3);
        c.detail << " [K err " << err_hz / 1e3 << " kHz, band +-"
                 << angular_to_hz(kf.kerr_uncertainty) / 1e3 << " kHz]";
        c.require(err_hz <= 4e3, "Kerr recovery off by more than 4 kHz");
        c.require(kf.kerr_uncertainty > hz_to_angular(2e3) &&
                      kf.kerr_uncertainty < hz_to_angular(10e3),
                  "attenuation band not on the expected scale");
    }
    // under a genuine +-2 dB attenuation error the refit band still brackets
    // the truth (K P is the only identifiable combination)
    for (const double inject : {2.0, -2.0}) {
        std::vector<fit::S21Trace> traces = {synth(3.0, att + inject),
                                             synth(15.0, att + inject),
                                             synth(40.0, att + inject)};
        const fit::KerrCircleFit kf = fit::circle_fit_kerr(traces);
        const double lo = std::min({kf.kerr_att_low, kf.kerr_att_high, *kf.params.kerr});
        const double hi = std::max({kf.kerr_att_low, kf.kerr_att_high, *kf.params.kerr});
        c.require(lo <= kerr_true * 1.0001 && hi >= kerr_true * 0.9999,
                  "refit band misses the true Kerr under injected error");
    }

    // (b) g0 ramp: 99 Hz within 1%
    {
        std::mt19937_64 rng(1010);
        std::normal_distribution<double> gauss(0.0, 1.0);
        const double omega_m = hz_to_angular(287.3e3);
        const double g0_true = hz_to_angular(99.0);
        std::vector<fit::RampPoint> ramp;
        for (const double t_mk : {260.0, 300.0, 350.0, 420.0, 500.0, 600.0}) {
            const double y = g0_true * g0_true * thermal_occupation(t_mk * 1e-3, omega_m);
            ramp.push_back({t_mk * 1e-3, y * (1.0 + 0.01 * gauss(rng)), 0.01 * y});
        }
        const auto cal = fit::calibrate_g0(ramp, omega_m);
        const double rel = std::abs(cal.g0 - g0_true) / g0_true;
        c.detail << " [g0 rel err " << rel << "]";
        c.require(rel <= 0.01, "g0 recovery off by more than 1%");
    }

    // (c) joint relaxation fit: tau = 0.96 s within 2%
    {
        std::mt19937_64 rng(1011);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<fit::RelaxationSeries> series;
        for (const double amp0 : {-120.0, -60.0, -25.0}) {
            fit::RelaxationSeries s;
            for (int i = 0; i <= 120; ++i) {
                const double t = 4.0 * i / 120.0;
                s.t_s.push_back(t);
                s.delta_f_hz.push_back(3.0 + amp0 * std::exp(-t / 0.96) + 0.5 * gauss(rng));
            }
            series.push_back(s);
        }
        const auto jf = fit::relaxation_fit_joint(series);
        const double rel = std::abs(jf.tau - 0.96) / 0.96;
        c.detail << " [tau rel err " << rel << "]";
        c.require(rel <= 0.02, "tau recovery off by more than 2%");
    }
}

void criterion_11(Criterion& c) {
    const SystemParams truth = reference_device();
    const double kappa = truth.cavity.kappa();

    pipeline::CoolingTraceData data;
    for (const double d : linspace(-2.5 * kappa, -0.05 * kappa, 100)) {
        data.detuning.push_back(d);
        data.n_m.push_back(pipeline::model_n_m(truth, 0.54, truth.cavity.kerr, d,
                                               BackactionMethod::quantum_noise));
    }
    SystemParams base = truth;
    base.cavity.kerr = 0.0;
    const auto fitres =
        pipeline::fit_cooling_trace(base, data, 0.4, hz_to_angular(8e3));
    c.detail << " [fit r = " << fitres.ratio << ", K/2pi = "
             << angular_to_hz(fitres.kerr) / 1e3 << " kHz]";

    const auto grid = linspace(-3.0 * kappa, -0.02 * kappa, 600);
    double worst = 0.0;
    for (const auto policy : {BranchPolicy::low_branch, BranchPolicy::high_branch}) {
        const auto pred = pipeline::predict_trace(base, fitres, 3.0 / 0.54, grid, policy);
        const auto ref = cooling_trace(truth, DriveParams::ratio(0.0, 3.0), grid, policy);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            c.require(pred.points[i].valid == ref.points[i].valid,
                      "validity patterns differ between prediction and forward model");
            if (!pred.points[i].valid || !ref.points[i].valid) continue;
            worst = std::max(worst, std::abs(*pred.points[i].n_m - *ref.points[i].n_m) /
                                        *ref.points[i].n_m);
        }
    }
    c.detail << " [max rel deviation " << worst << "]";
    c.require(worst <= 0.01, "extrapolated trace deviates beyond 1%");
}

int main() {
    std::printf("kerrmech acceptance suite\n");
    run_criterion(1, "bifurcation onset matches the closed form within 0.1% (20 draws, < 5 s)",
                  criterion_1, 5.0);
    run_criterion(2, "critical point: double root at -sqrt(3) kappa/2, n_c = kappa/(sqrt(3) K)",
                  criterion_2);
    run_criterion(3, "K = 0 spectrum equals the Lorentzian within 1e-12 over |omega| <= 20 kappa",
                  criterion_3);
    run_criterion(4, "closed form vs 2x2 susceptibility route within 1e-10 (1000 draws)",
                  criterion_4);
    run_criterion(5, "oracle equivalence at the monostable benchmark (15%, trend, cutoff <= 120)",
                  criterion_5, 120.0);
    run_criterion(6, "rate imbalance: odd for K = 0, spinodal discontinuities beyond bifurcation",
                  criterion_6, 10.0);
    run_criterion(7, "weak-coupling consistency of the two backaction methods within 1%",
                  criterion_7);
    run_criterion(8, "thermal anchor: n_th(150 mK, 287.3 kHz) = 1.09e4 within 1%", criterion_8);
    run_criterion(9, "reference-device cooling traces: asymmetry, windows, low-branch cooling",
                  criterion_9, 30.0);
    run_criterion(10, "round-trip fits: Kerr circle, g0 ramp, joint relaxation", criterion_10,
                  60.0);
    run_criterion(11, "extrapolation closed loop: r = 0.54 fit predicts r = 3.0 within 1%",
                  criterion_11);

    if (failures == 0)
        std::printf("all criteria passed\n");
    else
        std::printf("%d criterion(s) failed\n", failures);
    return failures;
}
