#ifndef STICA_IO_HPP
#define STICA_IO_HPP

// Headered CSV files for maps and matrices, scalar text files.
// Numbers are written in shortest round-trip form so reruns are byte-identical.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace stica::io {

inline std::string format_double(double x)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw IoError("cannot parse number '" + std::string(s) + "' in " + where);
    return v;
}

inline void ensure_dir(const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::vector<std::string> default_header(Eigen::Index cols, const std::string& prefix)
{
    std::vector<std::string> h;
    h.reserve(static_cast<std::size_t>(cols));
    for (Eigen::Index c = 0; c < cols; ++c) h.push_back(prefix + std::to_string(c));
    return h;
}

inline void write_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m, const std::vector<std::string>& header)
{
    if (static_cast<Eigen::Index>(header.size()) != m.cols()) throw DimensionMismatch("CSV header width differs from matrix columns");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    std::string line;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (c) line += ',';
        line += header[c];
    }
    f << line << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        line.clear();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) line += ',';
            line += format_double(m(r, c));
        }
        f << line << '\n';
    }
    if (!f) throw IoError("write failed for " + path.string());
}

/// Reads a CSV with one header row; every other row must be numeric and have
/// the same width.
inline Eigen::MatrixXd read_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty CSV " + path.string());
    if (header) {
        header->clear();
        std::stringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) header->push_back(cell);
    }
    std::vector<double> vals;
    Eigen::Index cols = -1, rows = 0;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        Eigen::Index n = 0;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            const std::string_view cell(line.data() + start, (comma == std::string::npos ? line.size() : comma) - start);
            vals.push_back(parse_double(cell, path.string() + " row " + std::to_string(rows + 1)));
            ++n;
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cols < 0) cols = n;
        else if (n != cols) throw IoError("ragged CSV row " + std::to_string(rows + 1) + " in " + path.string());
        ++rows;
    }
    if (cols < 0) cols = header ? static_cast<Eigen::Index>(header->size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = vals[static_cast<std::size_t>(r * cols + c)];
    return m;
}

/// A map is a single column with header "value".
inline void write_map(const std::filesystem::path& path, const Eigen::VectorXd& v)
{
    write_csv(path, v, {"value"});
}

inline Eigen::VectorXd read_map(const std::filesystem::path& path)
{
    const Eigen::MatrixXd m = read_csv(path);
    if (m.cols() != 1) throw IoError(path.string() + " is not a single-column map");
    return m.col(0);
}

/// Matrix with generic column names c0, c1, ...
inline void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m, const std::string& prefix = "c")
{
    write_csv(path, m, default_header(m.cols(), prefix));
}

inline Eigen::MatrixXd read_matrix(const std::filesystem::path& path) { return read_csv(path); }

inline void write_scalars(const std::filesystem::path& path, const std::vector<double>& xs)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    for (double x : xs) f << format_double(x) << '\n';
}

inline std::vector<double> read_scalars(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<double> xs;
    std::string line;
    while (std::getline(f, line))
        if (line.find_first_not_of(" \t\r") != std::string::npos) xs.push_back(parse_double(line, path.string()));
    if (xs.empty()) throw IoError("no values in " + path.string());
    return xs;
}

/// Stacks per-IC maps <dir>/<stem>_<l>.csv (l = 1..L) into the rows of an L x V matrix.
inline Eigen::MatrixXd read_map_set(const std::filesystem::path& dir, const std::string& stem)
{
    std::vector<Eigen::VectorXd> maps;
    for (int l = 1;; ++l) {
        const auto p = dir / (stem + "_" + std::to_string(l) + ".csv");
        if (!std::filesystem::exists(p)) break;
        maps.push_back(read_map(p));
        if (maps.back().size() != maps.front().size()) throw IoError("maps in " + dir.string() + " differ in length");
    }
    if (maps.empty()) throw IoError("no " + stem + "_<l>.csv maps in " + dir.string());
    Eigen::MatrixXd m(static_cast<Eigen::Index>(maps.size()), maps.front().size());
    for (std::size_t l = 0; l < maps.size(); ++l) m.row(static_cast<Eigen::Index>(l)) = maps[l].transpose();
    return m;
}

inline void write_map_set(const std::filesystem::path& dir, const std::string& stem, const Eigen::MatrixXd& maps)
{
    ensure_dir(dir);
    for (Eigen::Index l = 0; l < maps.rows(); ++l)
        write_map(dir / (stem + "_" + std::to_string(l + 1) + ".csv"), maps.row(l).transpose());
}

} // namespace stica::io

#endif
