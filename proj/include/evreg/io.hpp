#pragma once

// Deterministic file emission and parsing. Doubles are written as %.17g so
// values round-trip exactly; JSON objects keep insertion order; nothing here
// writes timestamps, so identical inputs produce byte-identical files.

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evreg/matrix.hpp"
#include "evreg/nn.hpp"

namespace evreg {

using ordered_json = nlohmann::ordered_json;

inline std::string format_g17(double v) {
    char buffer[40];
    std::snprintf(buffer, sizeof(buffer), "%.17g", v);
    return buffer;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << contents;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Comment lines are emitted as `# line`, then the header row, then data.
inline std::string render_csv(const std::vector<std::string>& comments,
                              const std::vector<std::string>& columns,
                              const std::vector<std::vector<double>>& rows) {
    std::ostringstream out;
    for (const auto& c : comments) out << "# " << c << "\n";
    for (std::size_t j = 0; j < columns.size(); ++j)
        out << columns[j] << (j + 1 < columns.size() ? "," : "\n");
    for (const auto& row : rows) {
        if (row.size() != columns.size())
            throw std::invalid_argument("render_csv: row width does not match header");
        for (std::size_t j = 0; j < row.size(); ++j)
            out << format_g17(row[j]) << (j + 1 < row.size() ? "," : "\n");
    }
    return out.str();
}

inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& comments,
                      const std::vector<std::string>& columns,
                      const std::vector<std::vector<double>>& rows) {
    write_text_file(path, render_csv(comments, columns, rows));
}

/// Reads a numeric CSV, skipping `#` comments and one optional header row.
/// Malformed rows are reported with their 1-based line number.
inline std::vector<std::vector<double>> read_csv(const std::filesystem::path& path,
                                                 std::size_t expected_columns) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_number = 0;
    bool header_allowed = true;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        std::vector<double> row;
        row.reserve(cells.size());
        bool numeric = true;
        for (const auto& c : cells) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(c, &used));
                while (used < c.size() && std::isspace(static_cast<unsigned char>(c[used])))
                    ++used;
                if (used != c.size()) numeric = false;
            } catch (const std::exception&) {
                numeric = false;
            }
            if (!numeric) break;
        }
        if (!numeric && header_allowed) {
            header_allowed = false;  // one non-numeric row accepted as header
            continue;
        }
        header_allowed = false;
        if (!numeric)
            throw std::runtime_error(path.string() + ": malformed CSV row at line " +
                                     std::to_string(line_number));
        if (row.size() != expected_columns)
            throw std::runtime_error(path.string() + ": expected " +
                                     std::to_string(expected_columns) + " columns at line " +
                                     std::to_string(line_number) + ", got " +
                                     std::to_string(row.size()));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline constexpr int kCheckpointVersion = 1;

/// `{"format":"evreg-checkpoint","version":1,"params":[{name,rows,cols,values}]}`
inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<NamedParam>& params) {
    ordered_json doc;
    doc["format"] = "evreg-checkpoint";
    doc["version"] = kCheckpointVersion;
    doc["params"] = ordered_json::array();
    for (const auto& p : params) {
        ordered_json entry;
        entry["name"] = p.name;
        entry["rows"] = p.value.rows;
        entry["cols"] = p.value.cols;
        entry["values"] = p.value.data;
        doc["params"].push_back(std::move(entry));
    }
    write_text_file(path, doc.dump(2) + "\n");
}

inline std::vector<NamedParam> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    ordered_json doc;
    in >> doc;
    if (doc.value("format", "") != "evreg-checkpoint")
        throw std::runtime_error(path.string() + ": not a checkpoint file");
    if (doc.value("version", -1) != kCheckpointVersion)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version");
    std::vector<NamedParam> params;
    for (const auto& entry : doc.at("params")) {
        const std::size_t rows = entry.at("rows").get<std::size_t>();
        const std::size_t cols = entry.at("cols").get<std::size_t>();
        auto values = entry.at("values").get<std::vector<double>>();
        if (values.size() != rows * cols)
            throw std::runtime_error(path.string() + ": checkpoint shape mismatch for " +
                                     entry.at("name").get<std::string>());
        params.push_back({entry.at("name").get<std::string>(),
                          Matrix(rows, cols, std::move(values))});
    }
    return params;
}

/// Minimal standalone SVG documents (no external plotting dependency).
namespace svg {

inline std::string header(int width, int height) {
    return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" "
           "width=\"" +
           std::to_string(width) + "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " +
           std::to_string(width) + " " + std::to_string(height) + "\">\n";
}

/// Arrow field over [0,1]^2 points with a vertical component per point.
inline std::string quiver(const std::vector<std::array<double, 3>>& points, int size = 480) {
    const double margin = 40.0;
    const double span = size - 2.0 * margin;
    double max_mag = 1e-12;
    for (const auto& p : points) max_mag = std::max(max_mag, std::abs(p[2]));
    const double unit = 0.45 * span / std::max<double>(1.0, std::sqrt(points.size())) / max_mag;
    std::string out = header(size, size);
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (const auto& p : points) {
        const double x = margin + p[0] * span;
        const double y = size - margin - p[1] * span;
        const double dy = -p[2] * unit;
        out += "<line x1=\"" + format_g17(x) + "\" y1=\"" + format_g17(y) + "\" x2=\"" +
               format_g17(x) + "\" y2=\"" + format_g17(y + dy) +
               "\" stroke=\"black\" stroke-width=\"1\"/>\n";
        out += "<circle cx=\"" + format_g17(x) + "\" cy=\"" + format_g17(y) +
               "\" r=\"1.5\" fill=\"steelblue\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

/// Scatter of (x, y) pairs in [0,1]^2.
inline std::string scatter(const std::vector<std::pair<double, double>>& points, int size = 480) {
    const double margin = 40.0;
    const double span = size - 2.0 * margin;
    std::string out = header(size, size);
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (const auto& [px, py] : points) {
        out += "<circle cx=\"" + format_g17(margin + px * span) + "\" cy=\"" +
               format_g17(size - margin - py * span) + "\" r=\"2\" fill=\"crimson\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace svg

}  // namespace evreg
