#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dgsc {

inline constexpr int kCsvMajor = 1;
inline constexpr int kCsvMinor = 0;

/// CSV with a leading version line "# dgsc-csv <major>.<minor> <schema>".
struct CsvTable {
  std::string schema;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  double number(std::size_t row, const std::string& col) const;
};

void write_csv(const std::filesystem::path& path, const CsvTable& table);
/// Rejects unknown major versions and, when given, a different schema.
CsvTable read_csv(const std::filesystem::path& path,
                  const std::optional<std::string>& expected_schema = std::nullopt);

/// Shortest text that parses back to the same double; "nan"/"inf"/"-inf".
std::string format_double(double v);
double parse_double(const std::string& s);

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::vector<double> vlines;  // vertical markers, in data units
};

/// Minimal standalone SVG line chart; non-finite points are skipped.
void write_svg_plot(const std::filesystem::path& path, const PlotSpec& spec,
                    const std::vector<PlotSeries>& series);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dgsc
