// Numeric CSV tables with a header row.  All floats are written with 17
// significant digits so that write -> read round-trips bit-exactly.
#pragma once

#include <string>
#include <vector>

namespace chaosrl {

// printf "%.17g" formatting used for every float artifact.
std::string format_g17(double x);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    // Column index of the named header, or -1.
    int col(const std::string& name) const;
    // Value of the named column in row r; throws ConfigError if absent.
    double at(std::size_t r, const std::string& name) const;
};

// Writes a header row followed by numeric rows.  Rows may have differing
// lengths (matrix files are rectangular by construction; readers check).
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

// Parses a header line plus numeric rows.  Non-numeric cells, empty files
// and I/O failures raise ConfigError.
CsvTable read_csv(const std::string& path);

}  // namespace chaosrl
