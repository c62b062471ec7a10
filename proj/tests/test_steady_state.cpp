#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "kerrmech/steady_state.hpp"
#include "kerrmech/units.hpp"

using namespace kerrmech;

namespace {

SystemParams make_params(double kappa_c, double kappa_i, double kerr,
                         double omega_m = 1.0, double gamma_m = 1e-3, double g0 = 0.0) {
    SystemParams p;
    p.cavity.omega_c = 1e4 * (kappa_c + kappa_i);
    p.cavity.kappa_c = kappa_c;
    p.cavity.kappa_i = kappa_i;
    p.cavity.kerr = kerr;
    p.mech.omega_m = omega_m;
    p.mech.gamma_m = gamma_m;
    p.mech.g0 = g0;
    p.mech.n_th = 0.0;
    return p;
}

// Independent root-count oracle: sign of the cubic discriminant of
//   m^3 + 2 d m^2 + (d^2 + 1/4) m - eps
// as a function of the scaled detuning d. Three distinct positive roots
// exist for some detuning iff max_d disc(d) > 0. Uses only the textbook
// discriminant formula, never the library's bifurcation analysis.
double cubic_discriminant(double d, double eps) {
    const double a = 1.0, b = 2.0 * d, c = d * d + 0.25, e = -eps;
    return 18.0 * a * b * c * e - 4.0 * b * b * b * e + b * b * c * c -
           4.0 * a * c * c * c - 27.0 * a * a * e * e;
}

double max_discriminant_over_detuning(double eps) {
    double best = -1e300, best_d = -1.0;
    for (int i = 0; i <= 2400; ++i) {
        const double d = -6.0 + 5.8 * i / 2400.0;  // scan d in [-6, -0.2]
        const double v = cubic_discriminant(d, eps);
        if (v > best) { best = v; best_d = d; }
    }
    // golden-section refinement around the grid maximum
    double lo = best_d - 0.01, hi = best_d + 0.01;
    const double gr = 0.6180339887498949;
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = cubic_discriminant(x1, eps), f2 = cubic_discriminant(x2, eps);
    for (int it = 0; it < 120; ++it) {
        if (f1 > f2) { hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = cubic_discriminant(x1, eps); }
        else { lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = cubic_discriminant(x2, eps); }
    }
    return std::max(f1, f2);
}

bool oracle_bistable(const SystemParams& p, double n_in) {
    const double kappa = p.cavity.kappa();
    const double eps = p.cavity.kerr * p.cavity.kappa_c * n_in / (kappa * kappa * kappa);
    return max_discriminant_over_detuning(eps) > 0.0;
}

// Bisection for the smallest n_in with a three-root detuning window.
double oracle_bifurcation_onset(const SystemParams& p) {
    double lo = 1.0, hi = 1.0;
    while (oracle_bistable(p, lo)) lo *= 0.25;
    while (!oracle_bistable(p, hi)) hi *= 4.0;
    for (int it = 0; it < 80; ++it) {
        const double mid = std::sqrt(lo * hi);
        if (oracle_bistable(p, mid)) hi = mid; else lo = mid;
    }
    return std::sqrt(lo * hi);
}

// Brute-force root count by sign changes of f(n) - rhs on a dense n grid.
int dense_root_count(const SystemParams& p, double delta, double rhs, double n_max) {
    const double kappa = p.cavity.kappa();
    auto f = [&](double n) {
        const double db = delta + p.cavity.kerr * n;
        return n * (db * db + kappa * kappa / 4.0) - rhs;
    };
    int count = 0;
    const int grid = 200000;
    double prev = f(0.0);
    for (int i = 1; i <= grid; ++i) {
        const double cur = f(n_max * i / grid);
        if ((prev < 0.0 && cur >= 0.0) || (prev > 0.0 && cur <= 0.0)) ++count;
        prev = cur;
    }
    return count;
}

} // namespace

TEST_CASE("K = 0 on resonance: the Lorentzian value") {
    const SystemParams p = make_params(0.6, 0.4, 0.0);
    const auto sol = solve_steady_states(p, DriveParams::flux(0.0, 2.5));
    REQUIRE(sol.branches.size() == 1);
    const double kappa = 1.0;
    CHECK(sol.branches[0].n_c ==
          doctest::Approx(4.0 * 0.6 * 2.5 / (kappa * kappa)).epsilon(1e-12));
    CHECK(sol.branches[0].stable);
    CHECK(sol.branches[0].label == BranchLabel::low);
}

TEST_CASE("zero drive gives the vacuum") {
    const SystemParams p = make_params(0.5, 0.5, 0.2);
    const auto sol = solve_steady_states(p, DriveParams::flux(-1.0, 0.0));
    REQUIRE(sol.branches.size() == 1);
    CHECK(sol.branches[0].n_c == 0.0);
    CHECK(sol.branches[0].alpha == std::complex<double>(0.0, 0.0));
    CHECK(sol.branches[0].stable);
}

TEST_CASE("critical point: triple root at Delta = -sqrt(3) kappa / 2, r = 1") {
    const double kappa = 1.0, kerr = 0.05;
    const SystemParams p = make_params(0.5, 0.5, kerr);
    const double delta_c = -std::sqrt(3.0) / 2.0 * kappa;
    const double n_star = kappa / (std::sqrt(3.0) * kerr);

    const auto sol = solve_steady_states(p, DriveParams::ratio(delta_c, 1.0));
    REQUIRE(sol.branches.size() == 1);
    CHECK(sol.branches[0].multiplicity == 3);
    CHECK(sol.branches[0].n_c == doctest::Approx(n_star).epsilon(1e-6));

    // tangency oracle: dense scan of f(n) - rhs shows a single touching
    // crossing at n_star
    const double rhs = critical_input(p) * p.cavity.kappa_c;
    auto f = [&](double n) {
        const double db = delta_c + kerr * n;
        return n * (db * db + kappa * kappa / 4.0) - rhs;
    };
    CHECK(std::abs(f(n_star)) <= 1e-9 * rhs);
    CHECK(dense_root_count(p, delta_c, rhs, 3.0 * n_star) <= 1);
    // cubic flatness at the triple root: f grows only as K^2 (n - n_star)^3
    const double h = 1e-3 * n_star;
    CHECK(std::abs(f(n_star + h)) <= 10.0 * kerr * kerr * h * h * h + 1e-6 * rhs);
}

TEST_CASE("reference bistable working point: three real positive roots, outer two stable") {
    SystemParams p;
    p.cavity.omega_c = hz_to_angular(8.1e9);
    p.cavity.kappa_c = hz_to_angular(1.5e6);
    p.cavity.kappa_i = hz_to_angular(1.5e6);
    p.cavity.kerr = hz_to_angular(16e3);
    p.mech.omega_m = hz_to_angular(300e3);
    p.mech.gamma_m = hz_to_angular(10.0);
    p.mech.g0 = hz_to_angular(1.7e3);
    p.mech.n_th = 0.0;
    const double delta = -11.0 * p.mech.omega_m;

    const auto sol = solve_steady_states(p, DriveParams::ratio(delta, 1.5));
    REQUIRE(sol.branches.size() == 3);
    CHECK(sol.branches[0].label == BranchLabel::low);
    CHECK(sol.branches[1].label == BranchLabel::middle);
    CHECK(sol.branches[2].label == BranchLabel::high);
    CHECK(sol.branches[0].stable);
    CHECK(!sol.branches[1].stable);
    CHECK(sol.branches[2].stable);
    CHECK(sol.branches[0].n_c < sol.branches[1].n_c);
    CHECK(sol.branches[1].n_c < sol.branches[2].n_c);
}

TEST_CASE("roots satisfy the residual contract and |alpha|^2 = n_c") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        const double kappa_c = 0.2 + 1.5 * u(rng);
        const double kappa_i = 1.5 * u(rng);
        const double kerr = (u(rng) < 0.15 ? 0.0 : 0.01 + 0.5 * u(rng)) *
                            (u(rng) < 0.2 ? -1.0 : 1.0);
        const SystemParams p = make_params(kappa_c, kappa_i, kerr);
        const double kappa = p.cavity.kappa();
        const double delta = (u(rng) * 10.0 - 5.0) * kappa;
        const double n_in = u(rng) * 10.0 * kappa;
        const auto sol = solve_steady_states(p, DriveParams::flux(delta, n_in));
        REQUIRE(!sol.branches.empty());
        CHECK((sol.branches.size() == 1 || sol.branches.size() == 3 ||
               sol.branches.size() == 2));
        for (const auto& b : sol.branches) {
            const double db = delta + kerr * b.n_c;
            const double resid =
                b.n_c * (db * db + kappa * kappa / 4.0) - kappa_c * n_in;
            CHECK(std::abs(resid) <= 1e-10 * std::max(1.0, b.n_c * kappa * kappa));
            if (b.n_c > 0.0)
                CHECK(std::norm(b.alpha) == doctest::Approx(b.n_c).epsilon(1e-12));
            // stability flag against the slope of the cubic, an independent rule
            const double slope = db * db + kappa * kappa / 4.0 + 2.0 * kerr * b.n_c * db;
            if (std::abs(slope) > 1e-9 * kappa * kappa)
                CHECK(b.stable == (slope > 0.0));
        }
        for (std::size_t k = 1; k < sol.branches.size(); ++k)
            CHECK(sol.branches[k - 1].n_c <= sol.branches[k].n_c);
    }
}

TEST_CASE("critical_input: direct evaluation, Kerr scaling, rescaling invariance") {
    SystemParams p = make_params(hz_to_angular(2.8e6), 0.0, hz_to_angular(14e3));
    CHECK(critical_input(p) == doctest::Approx(6.7714e8).epsilon(1e-3));

    // doubling K halves n_bi
    SystemParams p2 = p;
    p2.cavity.kerr *= 2.0;
    CHECK(critical_input(p2) == doctest::Approx(critical_input(p) / 2.0).epsilon(1e-15));

    // joint rescaling invariance
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.1, 10.0);
    for (int i = 0; i < 100; ++i) {
        const SystemParams q = make_params(u(rng), u(rng), u(rng));
        const double s = u(rng);
        SystemParams qs = q;
        qs.cavity.kappa_c *= s;
        qs.cavity.kappa_i *= s;
        qs.cavity.kerr *= s;
        CHECK(critical_input(qs) == doctest::Approx(s * critical_input(q)).epsilon(1e-12));
    }

    SystemParams lin = p;
    lin.cavity.kerr = 0.0;
    CHECK_THROWS_AS(critical_input(lin), ValidationError);
    lin.cavity.kerr = -1.0;
    CHECK_THROWS_AS(critical_input(lin), ValidationError);
}

TEST_CASE("numeric bifurcation onset matches the closed form within 0.1%") {
    std::mt19937_64 rng(31415);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 5; ++i) {
        const double kappa_c = 0.3 + u(rng);
        const double kappa_i = u(rng);
        const double kerr = 0.02 + 0.3 * u(rng);
        const SystemParams p = make_params(kappa_c, kappa_i, kerr);
        const double onset = oracle_bifurcation_onset(p);
        CHECK(onset == doctest::Approx(critical_input(p)).epsilon(1e-3));
    }
}

TEST_CASE("bistable_window: threshold cases") {
    const SystemParams p = make_params(0.5, 0.5, 0.08);
    const double n_bi = critical_input(p);

    CHECK(!bistable_window(p, DriveParams::ratio(0.0, 1.0)).exists);
    CHECK(!bistable_window(p, DriveParams::ratio(0.0, 0.9)).exists);

    const auto w = bistable_window(p, DriveParams::ratio(0.0, 1.0001));
    REQUIRE(w.exists);
    CHECK(w.delta_lo < w.delta_hi);
    const double delta_c = -std::sqrt(3.0) / 2.0;
    CHECK(w.delta_lo == doctest::Approx(delta_c).epsilon(0.05));
    CHECK(w.delta_hi == doctest::Approx(delta_c).epsilon(0.05));

    // verified by dense root counting: 3 roots strictly inside, 1 outside
    const double rhs = 1.0001 * n_bi * p.cavity.kappa_c;
    const double mid = 0.5 * (w.delta_lo + w.delta_hi);
    CHECK(dense_root_count(p, mid, rhs, 40.0) == 3);
    const double width = w.delta_hi - w.delta_lo;
    CHECK(dense_root_count(p, w.delta_lo - 0.2 * width, rhs, 40.0) == 1);
    CHECK(dense_root_count(p, w.delta_hi + 0.2 * width, rhs, 40.0) == 1);

    // spinodal polish: tangency residual below 1e-9 relative
    for (const double ds : {w.delta_lo, w.delta_hi}) {
        const auto t = kerrmech::detail::tangents(ds);
        REQUIRE(t.exist);
        const double eps = kerrmech::detail::cubic_eps(p.cavity, DriveParams::ratio(0.0, 1.0001));
        const double res_max = std::abs(kerrmech::detail::f_scaled(t.m_max, ds) - eps);
        const double res_min = std::abs(kerrmech::detail::f_scaled(t.m_min, ds) - eps);
        CHECK(std::min(res_max, res_min) <= 1e-9 * eps);
    }
}

TEST_CASE("bistable_window of the reference device: the r = 3 window is about 2 MHz wide") {
    SystemParams p = make_params(hz_to_angular(1.4e6), hz_to_angular(1.4e6),
                                 hz_to_angular(14e3));
    const auto w = bistable_window(p, DriveParams::ratio(0.0, 3.0));
    REQUIRE(w.exists);
    const double width_hz = angular_to_hz(w.delta_hi - w.delta_lo);
    CHECK(width_hz > 2e6 / 1.5);
    CHECK(width_hz < 2e6 * 1.5);
}

TEST_CASE("negative Kerr mirrors the window to positive detunings") {
    const SystemParams pos = make_params(0.5, 0.5, 0.08);
    SystemParams neg = pos;
    neg.cavity.kerr = -pos.cavity.kerr;
    const double n_in = 1.5 * critical_input(pos);
    const auto wp = bistable_window(pos, n_in);
    const auto wn = bistable_window(neg, n_in);
    REQUIRE(wp.exists);
    REQUIRE(wn.exists);
    CHECK(wn.delta_lo == doctest::Approx(-wp.delta_hi).epsilon(1e-12));
    CHECK(wn.delta_hi == doctest::Approx(-wp.delta_lo).epsilon(1e-12));
    // and the roots really are mirrored
    const auto sp = solve_steady_states(pos, DriveParams::flux(0.5 * (wp.delta_lo + wp.delta_hi), n_in));
    const auto sn = solve_steady_states(neg, DriveParams::flux(-0.5 * (wp.delta_lo + wp.delta_hi), n_in));
    REQUIRE(sp.branches.size() == 3);
    REQUIRE(sn.branches.size() == 3);
    for (int k = 0; k < 3; ++k)
        CHECK(sn.branches[k].n_c == doctest::Approx(sp.branches[k].n_c).epsilon(1e-10));
}

TEST_CASE("hysteresis: monostable drive sweeps have no jumps") {
    const SystemParams p = make_params(0.5, 0.5, 0.08);
    std::vector<double> grid;
    for (int i = 0; i <= 400; ++i) grid.push_back(-4.0 + 5.0 * i / 400.0);

    const auto up = hysteresis_sweep(p, DriveParams::ratio(0.0, 0.5, SweepDirection::up), grid);
    CHECK(up.jump_indices.empty());

    std::vector<double> rgrid(grid.rbegin(), grid.rend());
    const auto down = hysteresis_sweep(p, DriveParams::ratio(0.0, 0.5, SweepDirection::down), rgrid);
    CHECK(down.jump_indices.empty());
}

TEST_CASE("hysteresis: one jump per direction at the spinodals") {
    const SystemParams p = make_params(0.5, 0.5, 0.08);
    const DriveParams drv = DriveParams::ratio(0.0, 1.5);
    const auto w = bistable_window(p, drv);
    REQUIRE(w.exists);

    std::vector<double> grid;
    const int npts = 2000;
    for (int i = 0; i <= npts; ++i) grid.push_back(-4.0 + 5.0 * i / npts);
    const double step = grid[1] - grid[0];

    DriveParams up = drv;
    up.direction = SweepDirection::up;
    const auto sweep_up = hysteresis_sweep(p, up, grid);
    REQUIRE(sweep_up.jump_indices.size() == 1);
    const double jump_up = grid[sweep_up.jump_indices[0]];
    CHECK(std::abs(jump_up - w.delta_hi) <= step * 1.000001);

    std::vector<double> rgrid(grid.rbegin(), grid.rend());
    DriveParams down = drv;
    down.direction = SweepDirection::down;
    const auto sweep_down = hysteresis_sweep(p, down, rgrid);
    REQUIRE(sweep_down.jump_indices.size() == 1);
    const double jump_down = rgrid[sweep_down.jump_indices[0]];
    CHECK(std::abs(jump_down - w.delta_lo) <= step * 1.000001);

    // the up sweep rides the low branch through the window, the down sweep
    // the high branch; traces differ only strictly inside the window
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double d = grid[i];
        const double up_n = sweep_up.n_c[i];
        const double down_n = sweep_down.n_c[rgrid.size() - 1 - i];
        if (d < w.delta_lo - step || d > w.delta_hi + step) {
            CHECK(up_n == doctest::Approx(down_n).epsilon(1e-9));
        } else if (d > w.delta_lo + step && d < w.delta_hi - step) {
            CHECK(up_n < down_n);
            CHECK(sweep_up.occupied[i] == BranchLabel::low);
            CHECK(sweep_down.occupied[rgrid.size() - 1 - i] == BranchLabel::high);
        }
    }
}

TEST_CASE("hysteresis input validation") {
    const SystemParams p = make_params(0.5, 0.5, 0.08);
    CHECK_THROWS_AS(hysteresis_sweep(p, DriveParams::ratio(0.0, 0.5, SweepDirection::up), {}),
                    ValidationError);
    CHECK_THROWS_AS(hysteresis_sweep(p, DriveParams::ratio(0.0, 0.5), {0.0, 1.0}),
                    ValidationError);
    CHECK_THROWS_AS(
        hysteresis_sweep(p, DriveParams::ratio(0.0, 0.5, SweepDirection::up), {0.0, -1.0}),
        ValidationError);
}

TEST_CASE("static displacement bookkeeping and the back-shift guard") {
    SystemParams p = make_params(0.5, 0.5, 0.0, /*omega_m=*/0.1, 1e-4, /*g0=*/0.0);
    auto quiet = solve_steady_states(p, DriveParams::flux(0.0, 1.0));
    CHECK(quiet.warnings.empty());
    CHECK(quiet.branches[0].beta == 0.0);

    p.mech.g0 = 0.05;  // strong enough that 2 g0^2 n_c / omega_m > kappa/1000
    auto loud = solve_steady_states(p, DriveParams::flux(0.0, 1.0));
    const auto& b = loud.branches[0];
    CHECK(b.beta == doctest::Approx(-p.mech.g0 * b.n_c / p.mech.omega_m));
    CHECK(b.back_shift > p.cavity.kappa() / 1000.0);
    REQUIRE(!loud.warnings.empty());
    CHECK(loud.warnings[0].find("back-shift") != std::string::npos);
}

TEST_CASE("branch_at resolves identity against the window regions") {
    const SystemParams p = make_params(0.5, 0.5, 0.08);
    const DriveParams drv = DriveParams::ratio(0.0, 1.5);
    const auto w = bistable_window(p, drv);
    REQUIRE(w.exists);
    const double mid = 0.5 * (w.delta_lo + w.delta_hi);

    DriveParams at = drv;
    at.detuning = mid;
    const auto low = branch_at(p, at, BranchLabel::low);
    const auto high = branch_at(p, at, BranchLabel::high);
    REQUIRE(low);
    REQUIRE(high);
    CHECK(low->n_c < high->n_c);

    at.detuning = w.delta_hi + 0.5;
    CHECK(!branch_at(p, at, BranchLabel::low));
    CHECK(branch_at(p, at, BranchLabel::high));

    at.detuning = w.delta_lo - 0.5;
    CHECK(branch_at(p, at, BranchLabel::low));
    CHECK(!branch_at(p, at, BranchLabel::high));
}
