#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kerrmech/errors.hpp"
#include "kerrmech/params.hpp"
#include "kerrmech/units.hpp"

// Key = value config files: '#' comments, dotted keys, one entry per line.
// Parse errors cite the line number and key. Doubles are serialized at 17
// significant digits, which round-trips bit-exactly.

namespace kerrmech {

class ConfigMap {
public:
    struct Entry {
        std::string value;
        int line = 0;
    };

    static ConfigMap parse(const std::string& text) {
        ConfigMap cfg;
        std::istringstream in(text);
        std::string raw;
        int line_no = 0;
        while (std::getline(in, raw)) {
            ++line_no;
            const std::string line = trim(raw);
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                std::ostringstream os;
                os << "config line " << line_no << ": expected 'key = value', got '" << line << "'";
                throw ConfigError(os.str());
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty() || !valid_key(key)) {
                std::ostringstream os;
                os << "config line " << line_no << ": invalid key '" << key << "'";
                throw ConfigError(os.str());
            }
            if (cfg.entries_.count(key)) {
                std::ostringstream os;
                os << "config line " << line_no << ": duplicate key '" << key
                   << "' (first defined on line " << cfg.entries_[key].line << ")";
                throw ConfigError(os.str());
            }
            cfg.entries_[key] = Entry{value, line_no};
            cfg.order_.push_back(key);
        }
        return cfg;
    }

    static ConfigMap parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in)
            throw ConfigError("cannot open config file '" + path + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse(buf.str());
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    std::string get_string(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end())
            throw ConfigError("missing required key '" + key + "'");
        return it->second.value;
    }

    double get_double(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end())
            throw ConfigError("missing required key '" + key + "'");
        const std::string& v = it->second.value;
        char* end = nullptr;
        const double x = std::strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0') {
            std::ostringstream os;
            os << "config line " << it->second.line << ": key '" << key
               << "': not a number: '" << v << "'";
            throw ConfigError(os.str());
        }
        return x;
    }

    long get_int(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end())
            throw ConfigError("missing required key '" + key + "'");
        const std::string& v = it->second.value;
        char* end = nullptr;
        const long x = std::strtol(v.c_str(), &end, 10);
        if (end == v.c_str() || *end != '\0') {
            std::ostringstream os;
            os << "config line " << it->second.line << ": key '" << key
               << "': not an integer: '" << v << "'";
            throw ConfigError(os.str());
        }
        return x;
    }

    bool get_bool(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end())
            throw ConfigError("missing required key '" + key + "'");
        const std::string& v = it->second.value;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        std::ostringstream os;
        os << "config line " << it->second.line << ": key '" << key
           << "': not a boolean: '" << v << "'";
        throw ConfigError(os.str());
    }

    std::string get_string_or(const std::string& key, const std::string& dflt) const {
        return has(key) ? get_string(key) : dflt;
    }
    double get_double_or(const std::string& key, double dflt) const {
        return has(key) ? get_double(key) : dflt;
    }
    long get_int_or(const std::string& key, long dflt) const {
        return has(key) ? get_int(key) : dflt;
    }
    bool get_bool_or(const std::string& key, bool dflt) const {
        return has(key) ? get_bool(key) : dflt;
    }

    int line_of(const std::string& key) const {
        const auto it = entries_.find(key);
        return it == entries_.end() ? 0 : it->second.line;
    }

    void set_string(const std::string& key, const std::string& value) {
        if (!entries_.count(key)) order_.push_back(key);
        entries_[key] = Entry{value, 0};
    }

    void set_double(const std::string& key, double value) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", value);
        set_string(key, buf);
    }

    /// Serialization in insertion order; parse(dump()) round-trips exactly.
    std::string dump() const {
        std::ostringstream os;
        for (const auto& key : order_)
            os << key << " = " << entries_.at(key).value << "\n";
        return os.str();
    }

    const std::vector<std::string>& keys() const { return order_; }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }
    static bool valid_key(const std::string& k) {
        for (char c : k)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-'))
                return false;
        return true;
    }

    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
};

/// Device parameters from the documented config keys; bath occupation comes
/// either directly (bath.n_th) or through a temperature (bath.temp_mk).
inline SystemParams system_params_from_config(const ConfigMap& cfg) {
    SystemParams p;
    p.cavity.omega_c = hz_to_angular(cfg.get_double("cavity.freq_hz"));
    p.cavity.kappa_c = hz_to_angular(cfg.get_double("cavity.kappa_c_hz"));
    p.cavity.kappa_i = hz_to_angular(cfg.get_double("cavity.kappa_i_hz"));
    p.cavity.kerr = hz_to_angular(cfg.get_double("cavity.kerr_hz"));
    p.mech.omega_m = hz_to_angular(cfg.get_double("mech.freq_hz"));
    p.mech.gamma_m = hz_to_angular(cfg.get_double("mech.gamma_hz"));
    p.mech.g0 = hz_to_angular(cfg.get_double("mech.g0_hz"));

    const bool has_nth = cfg.has("bath.n_th");
    const bool has_temp = cfg.has("bath.temp_mk");
    if (has_nth && has_temp) {
        std::ostringstream os;
        os << "config line " << cfg.line_of("bath.temp_mk")
           << ": key 'bath.temp_mk': conflicts with 'bath.n_th' (line "
           << cfg.line_of("bath.n_th") << "); give exactly one";
        throw ConfigError(os.str());
    }
    if (!has_nth && !has_temp)
        throw ConfigError("missing required key 'bath.n_th' (or 'bath.temp_mk')");
    p.mech.n_th = has_nth ? cfg.get_double("bath.n_th")
                          : thermal_occupation(cfg.get_double("bath.temp_mk") * 1e-3,
                                               p.mech.omega_m);
    return p;
}

namespace detail {

/// Hz value whose conversion back to rad/s reproduces w bit-exactly. Any
/// parameter that ever entered through the Hz boundary has such a preimage
/// within one ulp of the plain division.
inline double hz_exact_preimage(double w) {
    const double f0 = angular_to_hz(w);
    if (hz_to_angular(f0) == w) return f0;
    for (const double f : {std::nextafter(f0, 2.0 * f0 + 1.0),
                           std::nextafter(f0, -2.0 * std::abs(f0) - 1.0)})
        if (hz_to_angular(f) == w) return f;
    return f0;
}

} // namespace detail

/// The inverse mapping, 17-significant-digit lossless: a params -> config ->
/// params round trip is bit-exact.
inline ConfigMap system_params_to_config(const SystemParams& p) {
    ConfigMap cfg;
    cfg.set_double("cavity.freq_hz", detail::hz_exact_preimage(p.cavity.omega_c));
    cfg.set_double("cavity.kappa_c_hz", detail::hz_exact_preimage(p.cavity.kappa_c));
    cfg.set_double("cavity.kappa_i_hz", detail::hz_exact_preimage(p.cavity.kappa_i));
    cfg.set_double("cavity.kerr_hz", detail::hz_exact_preimage(p.cavity.kerr));
    cfg.set_double("mech.freq_hz", detail::hz_exact_preimage(p.mech.omega_m));
    cfg.set_double("mech.gamma_hz", detail::hz_exact_preimage(p.mech.gamma_m));
    cfg.set_double("mech.g0_hz", detail::hz_exact_preimage(p.mech.g0));
    cfg.set_double("bath.n_th", p.mech.n_th);
    return cfg;
}

/// Drive block: drive.detuning_hz plus exactly one of drive.r and
/// drive.n_in_per_s, with an optional drive.direction.
inline DriveParams drive_from_config(const ConfigMap& cfg) {
    DriveParams d;
    d.detuning = hz_to_angular(cfg.get_double_or("drive.detuning_hz", 0.0));
    const bool has_r = cfg.has("drive.r");
    const bool has_flux = cfg.has("drive.n_in_per_s");
    if (has_r == has_flux)
        throw ConfigError("drive needs exactly one of 'drive.r' and 'drive.n_in_per_s'");
    d.kind = has_r ? DriveKind::ratio : DriveKind::photon_flux;
    d.strength = has_r ? cfg.get_double("drive.r") : cfg.get_double("drive.n_in_per_s");
    const std::string dir = cfg.get_string_or("drive.direction", "none");
    if (dir == "up") d.direction = SweepDirection::up;
    else if (dir == "down") d.direction = SweepDirection::down;
    else if (dir == "none") d.direction = SweepDirection::none;
    else {
        std::ostringstream os;
        os << "config line " << cfg.line_of("drive.direction")
           << ": key 'drive.direction': expected up|down|none, got '" << dir << "'";
        throw ConfigError(os.str());
    }
    return d;
}

} // namespace kerrmech
