#include "chaosrl/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "chaosrl/common.hpp"

namespace chaosrl {

std::string format_g17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

int CsvTable::col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

double CsvTable::at(std::size_t r, const std::string& name) const {
    const int c = col(name);
    if (c < 0) throw ConfigError("csv: no column named '" + name + "'");
    if (r >= rows.size() || static_cast<std::size_t>(c) >= rows[r].size())
        throw ConfigError("csv: row " + std::to_string(r) + " has no column '" + name + "'");
    return rows[r][static_cast<std::size_t>(c)];
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path, std::ios::binary);  // binary: no platform newline translation
    if (!os) throw ConfigError("csv: cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) os << ',';
        os << header[i];
    }
    os << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) os << ',';
            os << format_g17(row[i]);
        }
        os << '\n';
    }
    if (!os) throw ConfigError("csv: write failed for '" + path + "'");
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

CsvTable read_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("csv: cannot open '" + path + "' for reading");
    CsvTable table;
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("csv: '" + path + "' is empty");
    table.header = split_line(line);
    while (std::getline(is, line)) {
        if (line.empty() || line == "\r") continue;
        std::vector<double> row;
        for (const std::string& cell : split_line(line)) {
            const char* begin = cell.c_str();
            char* end = nullptr;
            const double v = std::strtod(begin, &end);
            if (end == begin || *end != '\0')
                throw ConfigError("csv: non-numeric cell '" + cell + "' in '" + path + "'");
            row.push_back(v);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace chaosrl
