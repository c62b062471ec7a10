#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kerrmech/errors.hpp"

// CSV with a '#'-prefixed comment block: the writer embeds the resolved run
// configuration, the reader hands the comments back for metadata lookup.
// Numbers are written at 17 significant digits.

namespace kerrmech {

class CsvWriter {
public:
    explicit CsvWriter(const std::string& path) : out_(path) {
        if (!out_)
            throw Error("cannot open output file '" + path + "'");
    }

    void comment(const std::string& line) { out_ << "# " << line << "\n"; }

    void header(const std::vector<std::string>& cols) {
        for (std::size_t i = 0; i < cols.size(); ++i)
            out_ << cols[i] << (i + 1 < cols.size() ? "," : "\n");
    }

    /// One row of mixed cells; use cell() to format numbers.
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            out_ << cells[i] << (i + 1 < cells.size() ? "," : "\n");
    }

    /// Pre-formatted rows (already comma-joined, newline-terminated).
    void raw(const std::string& lines) { out_ << lines; }

    static std::string cell(double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

private:
    std::ofstream out_;
};

struct CsvData {
    std::vector<std::string> comments;           ///< without the leading '# '
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> cells; ///< row-major

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw Error("CSV is missing required column '" + name + "'");
    }

    std::vector<double> numeric_column(const std::string& name) const {
        const std::size_t ix = column_index(name);
        std::vector<double> out;
        out.reserve(cells.size());
        for (std::size_t r = 0; r < cells.size(); ++r) {
            const std::string& v = cells[r][ix];
            char* end = nullptr;
            const double x = std::strtod(v.c_str(), &end);
            if (end == v.c_str() || *end != '\0') {
                std::ostringstream os;
                os << "CSV column '" << name << "', row " << r + 1 << ": not a number: '"
                   << v << "'";
                throw Error(os.str());
            }
            out.push_back(x);
        }
        return out;
    }

    /// Metadata lookup from '# key = value' comment lines.
    std::string meta_or(const std::string& key, const std::string& dflt) const {
        for (const auto& c : comments) {
            const auto eq = c.find('=');
            if (eq == std::string::npos) continue;
            std::string k = c.substr(0, eq);
            while (!k.empty() && k.back() == ' ') k.pop_back();
            if (k == key) {
                std::string v = c.substr(eq + 1);
                std::size_t a = 0;
                while (a < v.size() && v[a] == ' ') ++a;
                return v.substr(a);
            }
        }
        return dflt;
    }

    double meta_double_or(const std::string& key, double dflt) const {
        const std::string v = meta_or(key, "");
        if (v.empty()) return dflt;
        char* end = nullptr;
        const double x = std::strtod(v.c_str(), &end);
        if (end == v.c_str())
            throw Error("CSV metadata '" + key + "': not a number: '" + v + "'");
        return x;
    }
};

inline CsvData read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open input file '" + path + "'");
    CsvData data;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t a = 1;
            while (a < line.size() && line[a] == ' ') ++a;
            data.comments.push_back(line.substr(a));
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!have_header) {
            data.columns = cells;
            have_header = true;
        } else {
            if (cells.size() != data.columns.size())
                throw Error("CSV '" + path + "': ragged row with " +
                            std::to_string(cells.size()) + " cells");
            data.cells.push_back(std::move(cells));
        }
    }
    if (!have_header)
        throw Error("CSV '" + path + "': no header row");
    return data;
}

} // namespace kerrmech
