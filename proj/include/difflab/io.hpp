// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "difflab/core.hpp"

namespace difflab {

using json = nlohmann::ordered_json;

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Minimal CSV table with full-precision numeric cells.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(const std::vector<double>& row) {
    if (row.size() != header_.size()) throw std::invalid_argument("csv row width does not match the header");
    rows_.push_back(row);
  }

  std::string str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < header_.size(); ++i) os << (i ? "," : "") << header_[i];
    os << '\n';
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << format_double(r[i]);
      os << '\n';
    }
    return os.str();
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<double>>& rows() const { return rows_; }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<double>> rows_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON.

inline json to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Mat mat_from_json(const json& j) {
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j.at(static_cast<std::size_t>(i)).size()) != cols) throw std::invalid_argument("ragged matrix");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
  }
  return m;
}

inline json to_json(const NoiseSchedule& s) {
  json j;
  j["gamma0"] = s.gamma0();
  j["gamma1"] = s.gamma1();
  std::visit(
      [&](const auto& shape) {
        using S = std::decay_t<decltype(shape)>;
        if constexpr (std::is_same_v<S, LinearShape>) {
          j["shape"] = "linear";
        } else if constexpr (std::is_same_v<S, PiecewiseLinearShape>) {
          j["shape"] = "piecewise";
          j["raw"] = shape.raw();
        } else {
          j["shape"] = "tabulated";
          j["u"] = shape.curve().knots();
          j["t"] = shape.curve().values();
          j["slopes"] = shape.curve().slopes();
        }
      },
      s.shape());
  return j;
}

inline NoiseSchedule schedule_from_json(const json& j) {
  const double g0 = j.value("gamma0", -6.0), g1 = j.value("gamma1", 6.0);
  const std::string kind = j.value("shape", "linear");
  if (kind == "linear") return NoiseSchedule(g0, g1, LinearShape{});
  if (kind == "piecewise") return NoiseSchedule(g0, g1, PiecewiseLinearShape(j.at("raw").get<std::vector<double>>()));
  if (kind == "tabulated")
    return NoiseSchedule(g0, g1, TabulatedShape(MonotoneHermite(j.at("u").get<std::vector<double>>(), j.at("t").get<std::vector<double>>(),
                                                                j.at("slopes").get<std::vector<double>>())));
  throw std::invalid_argument("schedule.shape: unknown shape '" + kind + "'");
}

inline json to_json(const DataDistribution& d) {
  json j;
  j["kind"] = d.kind() == DataKind::joint ? "joint" : "factorized";
  j["vocab"] = d.vocab();
  j["length"] = d.length();
  if (d.kind() == DataKind::joint) j["table"] = d.joint_table();
  else j["marginals"] = d.factor_tables();
  return j;
}

inline DataDistribution data_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "joint")
    return DataDistribution::joint(j.at("vocab").get<int>(), j.at("length").get<int>(), j.at("table").get<std::vector<double>>());
  if (kind == "factorized")
    return DataDistribution::factorized(j.at("vocab").get<int>(), j.at("marginals").get<std::vector<std::vector<double>>>());
  throw std::invalid_argument("data.kind: expected 'joint' or 'factorized'");
}

inline json to_json(const Instance& inst) {
  json j;
  j["name"] = inst.name;
  j["seed"] = inst.seed;
  j["V"] = inst.V();
  j["L"] = inst.L();
  j["d_e"] = inst.dim();
  j["labels"] = inst.vocab.labels();
  j["embeddings"] = to_json(inst.E());
  j["data"] = to_json(inst.data);
  j["schedule"] = to_json(inst.schedule);
  return j;
}

inline Instance instance_from_json(const json& j) {
  Instance inst;
  inst.name = j.value("name", "instance");
  inst.seed = j.value("seed", std::uint64_t{0});
  inst.vocab = Vocabulary(j.at("labels").get<std::vector<std::string>>());
  inst.embeddings = EmbeddingTable(mat_from_json(j.at("embeddings")));
  inst.data = data_from_json(j.at("data"));
  inst.schedule = j.contains("schedule") ? schedule_from_json(j.at("schedule")) : NoiseSchedule();
  inst.validate();
  return inst;
}

// ---------------------------------------------------------------------------
// SVG line charts.

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Standalone SVG line chart with markers at every data point.
inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                  const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  const double W = 640, H = 400, ml = 70, mr = 20, mt = 40, mb = 50;
  auto px = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << format_double(std::round(xv * 1e4) / 1e4) << "</text>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
       << format_double(std::round(yv * 1e4) / 1e4) << "</text>\n";
  }
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 " << H / 2
     << ")\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      if (std::isfinite(series[s].y[i])) os << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      if (std::isfinite(series[s].y[i]))
        os << "<circle cx=\"" << px(series[s].x[i]) << "\" cy=\"" << py(series[s].y[i]) << "\" r=\"2\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << W - mr - 4 << "\" y=\"" << mt + 14 * (s + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << c
       << "\">" << series[s].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace difflab
