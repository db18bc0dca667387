#include "dgsc/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dgsc/errors.hpp"

namespace dgsc {

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw IoError("CSV schema " + schema + " has no column '" + name + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

double CsvTable::number(std::size_t row, const std::string& col) const {
  return parse_double(rows.at(row).at(column(col)));
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
  if (s == "nan") return NAN;
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw IoError("cannot parse number '" + s + "'");
  }
  return v;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_csv(const std::filesystem::path& path, const CsvTable& t) {
  std::ostringstream s;
  s << "# dgsc-csv " << kCsvMajor << "." << kCsvMinor << " " << t.schema << "\n";
  for (std::size_t i = 0; i < t.columns.size(); ++i) s << (i ? "," : "") << t.columns[i];
  s << "\n";
  for (const auto& row : t.rows) {
    if (row.size() != t.columns.size()) throw IoError("CSV row width does not match header");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i].find_first_of(",\n") != std::string::npos) {
        throw IoError("CSV field contains a separator: '" + row[i] + "'");
      }
      s << (i ? "," : "") << row[i];
    }
    s << "\n";
  }
  write_text(path, s.str());
}

CsvTable read_csv(const std::filesystem::path& path, const std::optional<std::string>& expected) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty CSV");
  int major = 0, minor = 0;
  char schema[256] = {0};
  if (std::sscanf(line.c_str(), "# dgsc-csv %d.%d %255s", &major, &minor, schema) != 3) {
    throw IoError(path.string() + ": missing dgsc-csv version header");
  }
  if (major != kCsvMajor) {
    throw CompatibilityError(path.string() + ": unsupported CSV major version " + std::to_string(major));
  }
  CsvTable t;
  t.schema = schema;
  if (expected && t.schema != *expected) {
    throw CompatibilityError(path.string() + ": expected CSV schema " + *expected + ", found " + t.schema);
  }
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing CSV column header");
  t.columns = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.columns.size()) throw IoError(path.string() + ": ragged CSV row");
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace {

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      default: o += c;
    }
  }
  return o;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

void write_svg_plot(const std::filesystem::path& path, const PlotSpec& spec,
                    const std::vector<PlotSeries>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const double W = 720, H = 440, L = 70, R = 160, T = 40, B = 50;
  auto tx = [&](double x) { return spec.log_x ? std::log10(x) : x; };
  auto ty = [&](double y) { return spec.log_y ? std::log10(y) : y; };
  auto usable = [&](double x, double y) {
    return std::isfinite(tx(x)) && std::isfinite(ty(y)) && (!spec.log_x || x > 0) &&
           (!spec.log_y || y > 0);
  };
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << esc(spec.title) << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\""
    << H - T - B << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double vx = spec.log_x ? std::pow(10.0, fx) : fx;
    const double vy = spec.log_y ? std::pow(10.0, fy) : fy;
    s << "<text x=\"" << num(px(vx)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
      << tick(vx) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << num(py(vy) + 4) << "\" text-anchor=\"end\">"
      << tick(vy) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
    << esc(spec.x_label) << "</text>\n";
  s << "<text transform=\"translate(16," << (T + H - B) / 2
    << ") rotate(-90)\" text-anchor=\"middle\">" << esc(spec.y_label) << "</text>\n";
  for (double v : spec.vlines) {
    if (spec.log_x && v <= 0) continue;
    s << "<line x1=\"" << num(px(v)) << "\" x2=\"" << num(px(v)) << "\" y1=\"" << T << "\" y2=\""
      << H - B << "\" stroke=\"#999\" stroke-dasharray=\"4,3\"/>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    const char* color = colors[k % 10];
    std::ostringstream pts;
    for (std::size_t i = 0; i < std::min(sr.x.size(), sr.y.size()); ++i) {
      if (!usable(sr.x[i], sr.y[i])) continue;
      pts << num(px(sr.x[i])) << "," << num(py(sr.y[i])) << " ";
    }
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
      << pts.str() << "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    s << "<line x1=\"" << W - R + 10 << "\" x2=\"" << W - R + 30 << "\" y1=\"" << ly << "\" y2=\""
      << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R + 35 << "\" y=\"" << ly + 4 << "\">" << esc(sr.name) << "</text>\n";
  }
  s << "</svg>\n";
  write_text(path, s.str());
}

}  // namespace dgsc
