#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "kerrmech/backaction.hpp"
#include "kerrmech/config.hpp"
#include "kerrmech/csv.hpp"
#include "kerrmech/errors.hpp"
#include "kerrmech/fit.hpp"
#include "kerrmech/oracle.hpp"
#include "kerrmech/pipeline.hpp"
#include "kerrmech/spectrum.hpp"
#include "kerrmech/steady_state.hpp"
#include "kerrmech/units.hpp"
#include "kerrmech/version.hpp"

// Batch front end. Subcommands: steady | spectrum | rates | cooling-trace |
// fit | oracle | calibrate. Every output CSV embeds the resolved config and
// the artifact version; identical config + seed give identical bytes, and
// --jobs never changes them (grid points are written into indexed slots).
//
// Exit codes: 0 success, 1 usage/config, 2 validation, 3 convergence,
// 4 instability.

namespace kerrmech::cli {

struct GlobalOptions {
    std::string config_path;
    std::string out_dir = ".";
    long seed = 0;
    int jobs = 1;
    std::string format = "csv";
    std::vector<std::string> overrides;  // key=value defaults; config file wins
};

namespace detail {

inline ConfigMap load_config(const GlobalOptions& g, std::ostream& err) {
    ConfigMap cfg = ConfigMap::parse_file(g.config_path);
    for (const auto& ov : g.overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + ov + "'");
        const std::string key = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        if (cfg.has(key)) {
            err << "warning: config file wins for key '" << key << "'; ignoring --set\n";
        } else {
            cfg.set_string(key, value);
        }
    }
    return cfg;
}

inline void emit_header(CsvWriter& w, const ConfigMap& cfg, const GlobalOptions& g,
                        const std::string& command) {
    w.comment(std::string("kerrmech ") + version_string);
    w.comment("command = " + command);
    w.comment("seed = " + std::to_string(g.seed));
    std::istringstream lines(cfg.dump());
    std::string line;
    while (std::getline(lines, line)) w.comment(line);
}

inline std::string out_path(const GlobalOptions& g, const std::string& name) {
    std::filesystem::create_directories(g.out_dir);
    return (std::filesystem::path(g.out_dir) / name).string();
}

inline std::vector<double> detuning_grid(const ConfigMap& cfg, bool descending) {
    const double lo = hz_to_angular(cfg.get_double("grid.min_hz"));
    const double hi = hz_to_angular(cfg.get_double("grid.max_hz"));
    const long n = cfg.get_int("grid.points");
    if (n < 2 || !(hi > lo))
        throw ConfigError("grid requires grid.min_hz < grid.max_hz and grid.points >= 2");
    std::vector<double> g(n);
    for (long i = 0; i < n; ++i) g[i] = lo + (hi - lo) * double(i) / double(n - 1);
    if (descending) std::reverse(g.begin(), g.end());
    return g;
}

inline ValidatedParams device_from(const ConfigMap& cfg, std::ostream& err) {
    const ValidatedParams vp = validate(system_params_from_config(cfg));
    for (const auto& w : vp.warnings) err << "warning: " << w << "\n";
    return vp;
}

inline BackactionMethod method_from(const ConfigMap& cfg, const std::string& key) {
    const std::string m = cfg.get_string_or(key, "auto");
    if (m == "auto") return BackactionMethod::automatic;
    if (m == "quantum-noise") return BackactionMethod::quantum_noise;
    if (m == "eigenvalue") return BackactionMethod::eigenvalue;
    throw ConfigError("key '" + key + "': expected auto|quantum-noise|eigenvalue, got '" + m + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        while (!item.empty() && item.front() == ' ') item.erase(item.begin());
        while (!item.empty() && item.back() == ' ') item.pop_back();
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class Fn>
inline void parallel_for(std::size_t count, int jobs, Fn&& fn) {
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr first = nullptr;
    std::mutex mu;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first) first = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

inline void cmd_steady(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    const SystemParams p = device_from(cfg, err).params;

    // one drive per run, or a power axis via drive.r_list / drive.n_in_list
    std::vector<std::pair<std::string, DriveParams>> drives;
    if (cfg.has("drive.r_list") || cfg.has("drive.n_in_list")) {
        const bool ratio = cfg.has("drive.r_list");
        const std::string dir = cfg.get_string_or("drive.direction", "none");
        for (const auto& s :
             split_list(cfg.get_string(ratio ? "drive.r_list" : "drive.n_in_list"))) {
            const double v = std::strtod(s.c_str(), nullptr);
            DriveParams d = ratio ? DriveParams::ratio(0.0, v) : DriveParams::flux(0.0, v);
            if (dir == "up") d.direction = SweepDirection::up;
            else if (dir == "down") d.direction = SweepDirection::down;
            drives.emplace_back(s, d);
        }
    } else {
        drives.emplace_back("", drive_from_config(cfg));
    }

    const bool sweeping = drives.front().second.direction != SweepDirection::none;
    if (!sweeping) {
        const auto grid = detuning_grid(cfg, false);
        CsvWriter w(out_path(g, "steady_branches.csv"));
        emit_header(w, cfg, g, "steady");
        w.header({"detuning_hz", "drive", "branch", "n_c", "stable"});
        for (const auto& [label, drive] : drives) {
            const std::string tag = label.empty() ? CsvWriter::cell(drive.strength) : label;
            std::vector<std::string> chunks(grid.size());
            parallel_for(grid.size(), g.jobs, [&](std::size_t i) {
                DriveParams d = drive;
                d.detuning = grid[i];
                std::ostringstream os;
                for (const auto& b : solve_steady_states(p, d).branches)
                    os << CsvWriter::cell(angular_to_hz(grid[i])) << "," << tag << ","
                       << to_string(b.label) << "," << CsvWriter::cell(b.n_c) << ","
                       << (b.stable ? 1 : 0) << "\n";
                chunks[i] = os.str();
            });
            for (const auto& c : chunks) w.raw(c);
        }
    } else {
        for (const auto& [label, drive] : drives) {
            const auto grid = detuning_grid(cfg, drive.direction == SweepDirection::down);
            const SweepResult sweep = hysteresis_sweep(p, drive, grid);
            const std::string name =
                label.empty() ? "steady_sweep.csv" : "steady_sweep_" + label + ".csv";
            CsvWriter w(out_path(g, name));
            emit_header(w, cfg, g, "steady");
            w.header({"detuning_hz", "n_c", "branch", "jumped"});
            for (std::size_t i = 0; i < grid.size(); ++i)
                w.row({CsvWriter::cell(angular_to_hz(sweep.detuning[i])),
                       CsvWriter::cell(sweep.n_c[i]), to_string(sweep.occupied[i]),
                       std::to_string(int(sweep.jumped[i]))});
        }
    }
}

inline void cmd_spectrum(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    const SystemParams p = device_from(cfg, err).params;
    const DriveParams drive = drive_from_config(cfg);

    const double wlo = hz_to_angular(cfg.get_double("spectrum.omega_min_hz"));
    const double whi = hz_to_angular(cfg.get_double("spectrum.omega_max_hz"));
    const long n = cfg.get_int("spectrum.points");
    if (n < 2 || !(whi > wlo))
        throw ConfigError("spectrum grid requires omega_min_hz < omega_max_hz and points >= 2");
    std::vector<double> grid(n);
    for (long i = 0; i < n; ++i) grid[i] = wlo + (whi - wlo) * double(i) / double(n - 1);

    SpectrumOptions sopts;
    sopts.cross_check = cfg.get_bool_or("spectrum.cross_check", true);
    sopts.lab_frame = cfg.get_bool_or("spectrum.lab_frame", false);
    const std::string which = cfg.get_string_or("spectrum.branch", "all");
    if (which != "all" && which != "low" && which != "middle" && which != "high")
        throw ConfigError("spectrum.branch: expected all|low|middle|high, got '" + which + "'");

    const auto sol = solve_steady_states(p, drive);
    int emitted = 0;
    for (const auto& b : sol.branches) {
        if (which != "all" && which != to_string(b.label)) continue;
        if (which == "all" && !b.stable) continue;
        const auto lin = linearize(b, p);
        const SpectrumResult res = spectrum_trace(lin, p, grid, sopts);
        CsvWriter w(out_path(g, std::string("spectrum_") + to_string(b.label) + ".csv"));
        emit_header(w, cfg, g, "spectrum");
        w.comment(std::string("branch = ") + to_string(b.label));
        w.comment("n_c = " + CsvWriter::cell(b.n_c));
        w.comment("gamma_s_hz = " + CsvWriter::cell(angular_to_hz(res.gamma_s)));
        w.comment("gamma_as_hz = " + CsvWriter::cell(angular_to_hz(res.gamma_as)));
        if (sopts.lab_frame) {
            w.header({"omega_hz", "omega_lab_hz", "s_nn"});
            for (std::size_t i = 0; i < grid.size(); ++i)
                w.row({CsvWriter::cell(angular_to_hz(grid[i])),
                       CsvWriter::cell(angular_to_hz((*res.omega_lab)[i])),
                       CsvWriter::cell(res.s_nn[i])});
        } else {
            w.header({"omega_hz", "s_nn"});
            for (std::size_t i = 0; i < grid.size(); ++i)
                w.row({CsvWriter::cell(angular_to_hz(grid[i])), CsvWriter::cell(res.s_nn[i])});
        }
        ++emitted;
    }
    if (emitted == 0)
        throw InstabilityError("spectrum: no " + (which == "all" ? "stable" : which) +
                               " branch at the requested detuning");
}

inline void cmd_rates(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    const SystemParams p = device_from(cfg, err).params;
    const DriveParams drive = drive_from_config(cfg);
    const auto grid = detuning_grid(cfg, false);

    CsvWriter w(out_path(g, "rates.csv"));
    emit_header(w, cfg, g, "rates");
    w.header({"detuning_hz", "branch", "gamma_s_hz", "gamma_as_hz", "imbalance_hz"});
    std::vector<std::string> chunks(grid.size());
    parallel_for(grid.size(), g.jobs, [&](std::size_t i) {
        DriveParams d = drive;
        d.detuning = grid[i];
        std::ostringstream os;
        for (const BranchLabel which : {BranchLabel::low, BranchLabel::high}) {
            const auto br = branch_at(p, d, which);
            if (!br || !br->stable) continue;
            const auto [gs, gas] = scattering_rates(linearize(*br, p), p.mech);
            os << CsvWriter::cell(angular_to_hz(grid[i])) << "," << to_string(which) << ","
               << CsvWriter::cell(angular_to_hz(gs)) << "," << CsvWriter::cell(angular_to_hz(gas))
               << "," << CsvWriter::cell(angular_to_hz(gs - gas)) << "\n";
        }
        chunks[i] = os.str();
    });
    for (const auto& c : chunks) w.raw(c);
}

inline void write_cooling_csv(CsvWriter& w, const CoolingTrace& trace) {
    w.header({"detuning_hz", "branch", "n_c", "n_m", "gamma_eff_hz", "delta_omega_m_hz",
              "valid"});
    for (const auto& pt : trace.points) {
        auto opt = [](const std::optional<double>& v, bool hz) {
            return v ? CsvWriter::cell(hz ? angular_to_hz(*v) : *v) : std::string();
        };
        w.row({CsvWriter::cell(angular_to_hz(pt.detuning)), to_string(pt.branch),
               opt(pt.n_c, false), opt(pt.n_m, false), opt(pt.gamma_eff, true),
               opt(pt.delta_omega_m, true), pt.valid ? "1" : "0"});
    }
}

inline void cmd_cooling_trace(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    const SystemParams p = device_from(cfg, err).params;
    const BackactionMethod method = method_from(cfg, "cooling.method");
    const auto r_items = split_list(cfg.get_string("cooling.r_list"));
    if (r_items.empty())
        throw ConfigError("cooling.r_list: expected a comma-separated list of ratios");

    for (const auto& r_str : r_items) {
        const double r = std::strtod(r_str.c_str(), nullptr);
        if (!(r > 0.0))
            throw ConfigError("cooling.r_list: ratios must be > 0, got '" + r_str + "'");
        for (const SweepDirection dir : {SweepDirection::up, SweepDirection::down}) {
            const auto grid = detuning_grid(cfg, dir == SweepDirection::down);
            const DriveParams drive = DriveParams::ratio(0.0, r, dir);
            const CoolingTrace trace = cooling_trace(p, drive, grid, BranchPolicy::follow_sweep,
                                                     method);
            CsvWriter w(out_path(g, "cooling_r" + r_str + "_" + to_string(dir) + ".csv"));
            emit_header(w, cfg, g, "cooling-trace");
            w.comment("r = " + r_str);
            w.comment(std::string("direction = ") + to_string(dir));
            w.comment(std::string("method = ") + to_string(method));
            write_cooling_csv(w, trace);
        }
    }
}

// -- fit reports -------------------------------------------------------------

struct ReportRow {
    std::string parameter;
    double value;
    double stderr_;
    std::string unit;
};

inline void write_report(const GlobalOptions& g, const ConfigMap& cfg,
                         const std::string& name, const std::vector<ReportRow>& rows,
                         const std::vector<std::string>& notes = {}) {
    CsvWriter w(out_path(g, name));
    emit_header(w, cfg, g, "fit");
    for (const auto& n : notes) w.comment("note: " + n);
    w.header({"parameter", "value", "stderr", "unit"});
    for (const auto& r : rows)
        w.row({r.parameter, CsvWriter::cell(r.value), CsvWriter::cell(r.stderr_), r.unit});
}

inline fit::S21Trace s21_trace_from_csv(const std::string& path) {
    const CsvData data = read_csv(path);
    fit::S21Trace tr;
    tr.freq_hz = data.numeric_column("freq_hz");
    const auto re = data.numeric_column("re_s21");
    const auto im = data.numeric_column("im_s21");
    for (std::size_t i = 0; i < re.size(); ++i) tr.s21.emplace_back(re[i], im[i]);
    tr.power_dbm = data.meta_double_or("power_dbm", -120.0);
    tr.attenuation_db = data.meta_double_or("attenuation_db", 0.0);
    tr.attenuation_sigma_db = data.meta_double_or("attenuation_sigma_db", 2.0);
    const std::string dir = data.meta_or("direction", "none");
    tr.direction = dir == "up" ? SweepDirection::up
                               : (dir == "down" ? SweepDirection::down : SweepDirection::none);
    return tr;
}

inline void cmd_fit(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    const std::string kind = cfg.get_string("fit.kind");

    if (kind == "circle") {
        const fit::S21Trace tr = s21_trace_from_csv(cfg.get_string("fit.input"));
        const fit::CircleFitParams f = fit::circle_fit_linear(tr);
        write_report(g, cfg, "fit_report.csv",
                     {{"amplitude", f.amplitude, f.stderrors(0), "1"},
                      {"alpha_env", f.alpha_env, f.stderrors(1), "rad"},
                      {"tau_delay", f.tau_delay, f.stderrors(2), "s"},
                      {"q_l", f.q_l, f.stderrors(3), "1"},
                      {"q_c_mag", f.q_c_mag, f.stderrors(4), "1"},
                      {"phi_0", f.phi_0, f.stderrors(5), "rad"},
                      {"freq_c_hz", angular_to_hz(f.omega_c), angular_to_hz(f.stderrors(6)), "Hz"}});
        CsvWriter w(out_path(g, "fit_residuals.csv"));
        emit_header(w, cfg, g, "fit");
        w.header({"freq_hz", "re_resid", "im_resid"});
        for (std::size_t i = 0; i < tr.freq_hz.size(); ++i) {
            const std::complex<double> model = fit::detail::s21_model(
                hz_to_angular(tr.freq_hz[i]), f.amplitude, f.alpha_env, f.tau_delay, f.q_l,
                f.q_c_mag, f.phi_0, f.omega_c);
            const std::complex<double> d = model - tr.s21[i];
            w.row({CsvWriter::cell(tr.freq_hz[i]), CsvWriter::cell(d.real()),
                   CsvWriter::cell(d.imag())});
        }
        return;
    }

    if (kind == "kerr-circle") {
        std::vector<fit::S21Trace> traces;
        for (const auto& path : split_list(cfg.get_string("fit.inputs")))
            traces.push_back(s21_trace_from_csv(path));
        const fit::KerrCircleFit kf = fit::circle_fit_kerr(traces);
        const auto& f = kf.params;
        write_report(
            g, cfg, "fit_report.csv",
            {{"amplitude", f.amplitude, f.stderrors(0), "1"},
             {"alpha_env", f.alpha_env, f.stderrors(1), "rad"},
             {"tau_delay", f.tau_delay, f.stderrors(2), "s"},
             {"q_l", f.q_l, f.stderrors(3), "1"},
             {"q_c_mag", f.q_c_mag, f.stderrors(4), "1"},
             {"phi_0", f.phi_0, f.stderrors(5), "rad"},
             {"freq_c_hz", angular_to_hz(f.omega_c), angular_to_hz(f.stderrors(6)), "Hz"},
             {"kerr_hz", angular_to_hz(*f.kerr), angular_to_hz(f.stderrors(7)), "Hz"},
             {"kerr_attenuation_band_hz", angular_to_hz(*f.kerr),
              angular_to_hz(kf.kerr_uncertainty), "Hz"}},
            f.notes);
        return;
    }

    if (kind == "mech") {
        const CsvData data = read_csv(cfg.get_string("fit.input"));
        fit::PsdTrace tr;
        tr.freq_hz = data.numeric_column("freq_hz");
        tr.psd = data.numeric_column("psd");
        const fit::SidebandFit f = fit::mech_sideband_fit(tr);
        write_report(g, cfg, "fit_report.csv",
                     {{"area", f.area, f.area_err, "Hz*psd"},
                      {"freq_m_hz", angular_to_hz(f.omega_m), angular_to_hz(f.omega_m_err), "Hz"},
                      {"gamma_m_hz", angular_to_hz(f.gamma_m), angular_to_hz(f.gamma_m_err), "Hz"},
                      {"offset", f.offset, 0.0, "psd"},
                      {"snr", f.snr, 0.0, "1"}});
        return;
    }

    if (kind == "g0-ramp") {
        const CsvData data = read_csv(cfg.get_string("fit.input"));
        const auto temp_mk = data.numeric_column("temp_mk");
        const auto y_hz2 = data.numeric_column("g0sq_nm_hz2");
        const double omega_m = hz_to_angular(cfg.get_double("mech.freq_hz"));
        std::vector<fit::RampPoint> ramp;
        const double to_rad2 = std::pow(2.0 * pi, 2);
        for (std::size_t i = 0; i < temp_mk.size(); ++i)
            ramp.push_back({temp_mk[i] * 1e-3, y_hz2[i] * to_rad2, 0.0});
        const double t_min = cfg.get_double_or("fit.t_min_mk", 250.0) * 1e-3;
        const fit::G0Calibration cal = fit::calibrate_g0(ramp, omega_m, t_min);
        std::vector<ReportRow> rows = {
            {"g0_hz", angular_to_hz(cal.g0), angular_to_hz(cal.g0_err), "Hz"},
            {"used_points", double(cal.used_points), 0.0, "1"}};
        if (cfg.has("fit.base_g0sq_nm_hz2")) {
            const double y_base = cfg.get_double("fit.base_g0sq_nm_hz2") * to_rad2;
            rows.push_back({"t_eff_mk",
                            fit::bath_temperature(y_base, cal.g0, omega_m) * 1e3, 0.0, "mK"});
        }
        write_report(g, cfg, "fit_report.csv", rows);
        return;
    }

    if (kind == "relaxation") {
        std::vector<fit::RelaxationSeries> series;
        for (const auto& path : split_list(cfg.get_string("fit.inputs"))) {
            const CsvData data = read_csv(path);
            fit::RelaxationSeries s;
            s.t_s = data.numeric_column("t_s");
            s.delta_f_hz = data.numeric_column("delta_f_hz");
            series.push_back(std::move(s));
        }
        const fit::JointRelaxationFit jf = fit::relaxation_fit_joint(series);
        std::vector<ReportRow> rows = {{"tau_relax", jf.tau, jf.tau_err, "s"}};
        for (std::size_t k = 0; k < jf.traces.size(); ++k) {
            rows.push_back({"delta_f0_" + std::to_string(k), jf.traces[k].delta_f0,
                            jf.traces[k].delta_f0_err, "Hz"});
            rows.push_back({"offset_" + std::to_string(k), jf.traces[k].offset, 0.0, "Hz"});
        }
        write_report(g, cfg, "fit_report.csv", rows,
                     jf.tau_identifiable ? std::vector<std::string>{}
                                         : std::vector<std::string>{"tau is unidentifiable"});
        return;
    }

    if (kind == "cooling-extrapolate") {
        const SystemParams base = device_from(cfg, err).params;
        const CsvData data = read_csv(cfg.get_string("fit.input"));
        pipeline::CoolingTraceData trace;
        for (double d : data.numeric_column("detuning_hz"))
            trace.detuning.push_back(hz_to_angular(d));
        trace.n_m = data.numeric_column("n_m");

        const double r0 = cfg.get_double_or("fit.ratio_init", 0.5);
        const double k0 = hz_to_angular(cfg.get_double_or("fit.kerr_init_hz", 10e3));
        const BackactionMethod method = method_from(cfg, "fit.method");
        const pipeline::CoolingFitResult fr =
            pipeline::fit_cooling_trace(base, trace, r0, k0, method);
        write_report(g, cfg, "fit_report.csv",
                     {{"ratio", fr.ratio, fr.ratio_err, "1"},
                      {"kerr_hz", angular_to_hz(fr.kerr), angular_to_hz(fr.kerr_err), "Hz"}});

        if (cfg.has("fit.predict_power_factors")) {
            const auto grid = detuning_grid(cfg, false);
            for (const auto& f_str : split_list(cfg.get_string("fit.predict_power_factors"))) {
                const double factor = std::strtod(f_str.c_str(), nullptr);
                for (const auto policy : {BranchPolicy::low_branch, BranchPolicy::high_branch}) {
                    const CoolingTrace pred = pipeline::predict_trace(
                        base, fr, factor, grid, policy, SweepDirection::none, method);
                    const std::string which =
                        policy == BranchPolicy::low_branch ? "low" : "high";
                    CsvWriter w(out_path(g, "predicted_x" + f_str + "_" + which + ".csv"));
                    emit_header(w, cfg, g, "fit");
                    w.comment("power_factor = " + f_str);
                    write_cooling_csv(w, pred);
                }
            }
        }
        return;
    }

    throw ConfigError("fit.kind: expected circle|kerr-circle|mech|g0-ramp|relaxation|"
                      "cooling-extrapolate, got '" + kind + "'");
}

inline void cmd_oracle(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    oracle::FockProblem fp;
    fp.kappa = cfg.get_double_or("oracle.kappa", 1.0);
    fp.kerr = cfg.get_double_or("oracle.kerr", 0.0);
    fp.detuning = cfg.get_double("oracle.detuning");
    fp.cutoff = static_cast<int>(cfg.get_int_or("oracle.cutoff", 40));
    fp.hard_max_cutoff = static_cast<int>(cfg.get_int_or("oracle.hard_max_cutoff", 400));
    fp.allow_strong_drive = cfg.get_bool_or("oracle.override_guard", false);
    if (cfg.has("oracle.drive_amp")) {
        fp.drive_amp = cfg.get_double("oracle.drive_amp");
    } else {
        // convenience: drive chosen so the classical photon number hits a target
        const double n_c = cfg.get_double("oracle.n_c_target");
        const double db = fp.detuning + fp.kerr * n_c;
        fp.drive_amp = std::sqrt(n_c * (db * db + fp.kappa * fp.kappa / 4.0));
    }

    const auto sd = oracle::steady_density(fp);

    const double wmax = cfg.get_double_or("oracle.omega_max", 3.0) * fp.kappa;
    const long n = cfg.get_int_or("oracle.points", 61);
    std::vector<double> grid(n);
    for (long i = 0; i < n; ++i) grid[i] = -wmax + 2.0 * wmax * double(i) / double(n - 1);

    const auto s_or = oracle::oracle_s_nn(fp, sd, grid, g.jobs);

    SystemParams p;
    p.cavity.omega_c = 1e6 * fp.kappa;
    p.cavity.kappa_c = fp.kappa;
    p.cavity.kappa_i = 0.0;
    p.cavity.kerr = fp.kerr;
    p.mech = MechParams{0.3 * fp.kappa, 1e-6 * fp.kappa, 0.0, 0.0};
    const auto sol =
        solve_steady_states(p, DriveParams::flux(fp.detuning, fp.drive_amp * fp.drive_amp / fp.kappa));
    const auto lin = linearize(sol.branches.back(), p);

    double max_dev = 0.0, mean_dev = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double rel = std::abs(s_nn(lin, grid[i]) - s_or[i]) / std::max(s_or[i], 1e-300);
        max_dev = std::max(max_dev, rel);
        mean_dev += rel / grid.size();
    }

    auto write_spectrum = [&](const std::string& name, const std::vector<double>& vals) {
        CsvWriter w(out_path(g, name));
        emit_header(w, cfg, g, "oracle");
        w.comment("mean_n = " + CsvWriter::cell(sd.mean_n));
        w.comment("cutoff = " + std::to_string(sd.cutoff));
        w.header({"omega_hz", "s_nn"});
        for (std::size_t i = 0; i < grid.size(); ++i)
            w.row({CsvWriter::cell(angular_to_hz(grid[i])), CsvWriter::cell(vals[i])});
    };
    write_spectrum("oracle_s_nn.csv", s_or);
    std::vector<double> s_lin(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) s_lin[i] = s_nn(lin, grid[i]);
    write_spectrum("linearized_s_nn.csv", s_lin);

    std::ofstream rep(out_path(g, "oracle_report.txt"));
    rep << "kerrmech " << version_string << " oracle comparison\n";
    rep << "cutoff used: " << sd.cutoff << "\n";
    rep << "steady-state residual: " << sd.residual << "\n";
    rep << "mean photon number: " << sd.mean_n << " (variance " << sd.var_n << ")\n";
    rep << "classical photon number: " << sol.branches.back().n_c << "\n";
    rep << "max relative deviation |omega| <= " << wmax / fp.kappa << " kappa: " << max_dev << "\n";
    rep << "mean relative deviation: " << mean_dev << "\n";
    if (cfg.get_bool_or("oracle.convergence_sweep", false)) {
        const auto conv = oracle::convergence_sweep(fp);
        rep << conv.text();
        if (!conv.converged) err << "warning: oracle truncation not converged to 0.1%\n";
    }
}

inline void cmd_calibrate(const ConfigMap& cfg, const GlobalOptions& g, std::ostream& err) {
    (void)err;
    const CsvData data = read_csv(cfg.get_string("calibrate.input"));
    const auto temp_mk = data.numeric_column("temp_mk");
    const auto y_hz2 = data.numeric_column("g0sq_nm_hz2");
    const double omega_m = hz_to_angular(cfg.get_double("mech.freq_hz"));
    const double to_rad2 = std::pow(2.0 * pi, 2);
    std::vector<fit::RampPoint> ramp;
    for (std::size_t i = 0; i < temp_mk.size(); ++i)
        ramp.push_back({temp_mk[i] * 1e-3, y_hz2[i] * to_rad2, 0.0});
    const double t_min = cfg.get_double_or("calibrate.t_min_mk", 250.0) * 1e-3;
    const fit::G0Calibration cal = fit::calibrate_g0(ramp, omega_m, t_min);

    std::vector<ReportRow> rows = {
        {"g0_hz", angular_to_hz(cal.g0), angular_to_hz(cal.g0_err), "Hz"},
        {"used_points", double(cal.used_points), 0.0, "1"},
        {"excluded_points", double(cal.excluded.size()), 0.0, "1"}};
    if (cfg.has("calibrate.base_g0sq_nm_hz2")) {
        const double y_base = cfg.get_double("calibrate.base_g0sq_nm_hz2") * to_rad2;
        rows.push_back(
            {"t_eff_mk", fit::bath_temperature(y_base, cal.g0, omega_m) * 1e3, 0.0, "mK"});
    }
    write_report(g, cfg, "calibrate_report.csv", rows);
}

} // namespace detail

/// Entry point shared by the binary and the in-process CLI tests.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"driven Kerr-cavity optomechanics toolkit"};
    app.require_subcommand(1);

    GlobalOptions g;
    std::string command;
    for (const char* name : {"steady", "spectrum", "rates", "cooling-trace", "fit", "oracle",
                             "calibrate"}) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", g.config_path, "config file")->required();
        sub->add_option("--out", g.out_dir, "output directory");
        sub->add_option("--seed", g.seed, "random seed recorded in outputs");
        sub->add_option("--jobs", g.jobs, "worker threads (never changes output bytes)");
        sub->add_option("--format", g.format, "output format (csv)");
        sub->add_option("--set", g.overrides, "key=value default; the config file wins on conflict");
        sub->callback([&command, name]() { command = name; });
    }

    std::vector<const char*> argv;
    argv.push_back("kerrmech");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        const ConfigMap cfg = detail::load_config(g, err);
        if (g.format != "csv")
            throw ConfigError("--format: only 'csv' is supported");
        if (command == "steady") detail::cmd_steady(cfg, g, err);
        else if (command == "spectrum") detail::cmd_spectrum(cfg, g, err);
        else if (command == "rates") detail::cmd_rates(cfg, g, err);
        else if (command == "cooling-trace") detail::cmd_cooling_trace(cfg, g, err);
        else if (command == "fit") detail::cmd_fit(cfg, g, err);
        else if (command == "oracle") detail::cmd_oracle(cfg, g, err);
        else if (command == "calibrate") detail::cmd_calibrate(cfg, g, err);
        return 0;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const ConvergenceError& e) {
        err << "convergence error: " << e.what() << "\n";
        return 3;
    } catch (const InstabilityError& e) {
        err << "instability: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace kerrmech::cli
