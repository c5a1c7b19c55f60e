// SPDX-License-Identifier: Apache-2.0
#include "percept/report.hpp"

#include "percept/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace percept {

namespace fs = std::filesystem;

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return int(i);
  return -1;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

bool numeric(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end && *end == '\0';
}

constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("read_csv: cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("read_csv: empty file " + path.string());
  t.header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto r = split(line);
    r.resize(t.header.size());
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::string render_svg(const PlotSpec& spec, const std::vector<Series>& series) {
  const double W = 640, H = 420, L = 70, R = 150, T = 40, B = 50;
  auto tx = [&](double v) { return spec.logx ? std::log10(v) : v; };
  auto ty = [&](double v) { return spec.logy ? std::log10(v) : v; };
  auto ok = [&](const std::pair<double, double>& p) {
    return std::isfinite(p.first) && std::isfinite(p.second) && (!spec.logx || p.first > 0) && (!spec.logy || p.second > 0);
  };
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (const auto& p : s.points)
      if (ok(p)) {
        x0 = std::min(x0, tx(p.first));
        x1 = std::max(x1, tx(p.first));
        y0 = std::min(y0, ty(p.second));
        y1 = std::max(y1, ty(p.second));
      }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double py = 0.05 * (y1 - y0);
  y0 -= py;
  y1 += py;
  auto sx = [&](double v) { return L + (tx(v) - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (ty(v) - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(spec.title) << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    const double vx = spec.logx ? std::pow(10.0, fx) : fx, vy = spec.logy ? std::pow(10.0, fy) : fy;
    const double px = L + (W - L - R) * i / 4.0, pyy = H - B - (H - T - B) * i / 4.0;
    os << "<line x1=\"" << px << "\" y1=\"" << H - B << "\" x2=\"" << px << "\" y2=\"" << H - B + 5 << "\" stroke=\"black\"/>";
    os << "<text x=\"" << px << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << num(vx) << "</text>\n";
    os << "<line x1=\"" << L - 5 << "\" y1=\"" << pyy << "\" x2=\"" << L << "\" y2=\"" << pyy << "\" stroke=\"black\"/>";
    os << "<text x=\"" << L - 8 << "\" y=\"" << pyy + 4 << "\" text-anchor=\"end\">" << num(vy) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << esc(spec.xlabel)
     << (spec.logx ? " (log)" : "") << "</text>\n";
  os << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << esc(spec.ylabel)
     << (spec.logy ? " (log)" : "") << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* col = kColors[k % 8];
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : series[k].points)
      if (ok(p)) pts.push_back(p);
    std::sort(pts.begin(), pts.end());
    if (!pts.empty()) {
      os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : pts) os << sx(p.first) << "," << sy(p.second) << " ";
      os << "\"/>\n";
      for (const auto& p : pts) os << "<circle cx=\"" << sx(p.first) << "\" cy=\"" << sy(p.second) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    }
    const double ly = T + 14 + 18.0 * double(k);
    os << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly - 9 << "\" width=\"10\" height=\"10\" fill=\"" << col << "\"/>";
    os << "<text x=\"" << W - R + 28 << "\" y=\"" << ly << "\">" << esc(series[k].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<fs::path> render_report(const fs::path& csv, const fs::path& out) {
  const CsvTable t = read_csv(csv);
  fs::create_directories(out);
  std::vector<fs::path> written;
  auto write = [&](const std::string& name, const std::string& svg) {
    const fs::path p = out / (name + ".svg");
    std::ofstream(p) << svg;
    written.push_back(p);
  };
  const int plan_col = t.column("plan");
  if (plan_col >= 0) {
    std::map<std::string, std::vector<const std::vector<std::string>*>> by_plan;
    for (const auto& r : t.rows) by_plan[r[plan_col]].push_back(&r);
    const int set_col = t.column("setting");
    for (const auto& [plan, rows] : by_plan) {
      bool all_numeric = true;
      double v;
      for (const auto* r : rows) all_numeric = all_numeric && numeric((*r)[set_col], v);
      for (const char* metric : {"loss", "absrel", "delta1", "epe", "miou"}) {
        const int mc = t.column(metric);
        Series s{metric, {}};
        std::vector<std::string> labels;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          double y;
          if (!numeric((*rows[i])[mc], y)) continue;
          double x;
          if (all_numeric) numeric((*rows[i])[set_col], x);
          else if (!numeric((*rows[i])[t.column("compute_macs_train")], x)) continue;
          s.points.emplace_back(x, y);
        }
        if (s.points.empty()) continue;
        PlotSpec ps;
        ps.title = plan + ": " + metric;
        ps.xlabel = all_numeric ? "setting" : "training MACs";
        ps.ylabel = metric;
        ps.logx = true;
        ps.logy = std::string(metric) == "loss" || std::string(metric) == "absrel" || std::string(metric) == "epe";
        std::vector<Series> ss{s};
        if (!all_numeric) {
          ss.clear();
          for (std::size_t i = 0; i < rows.size(); ++i) {
            double x, y;
            if (numeric((*rows[i])[mc], y) && numeric((*rows[i])[t.column("compute_macs_train")], x))
              ss.push_back({(*rows[i])[set_col], {{x, y}}});
          }
        }
        write(plan + "_" + metric, render_svg(ps, ss));
      }
    }
    return written;
  }
  const int cc = t.column("compute_macs"), lc = t.column("loss"), mc = t.column("model_id");
  if (cc < 0 || lc < 0) throw ValidationError("report: " + csv.string() + " is neither a sweep nor a run CSV");
  std::map<std::string, Series> by_model;
  for (const auto& r : t.rows) {
    double x, y;
    if (!numeric(r[cc], x) || !numeric(r[lc], y)) continue;
    const std::string id = mc >= 0 ? r[mc] : "run";
    by_model[id].name = id;
    by_model[id].points.emplace_back(x, y);
  }
  std::vector<Series> ss;
  for (auto& [id, s] : by_model) ss.push_back(std::move(s));
  write(csv.stem().string() + "_loss_vs_compute", render_svg({"training loss vs compute", "training MACs", "loss", true, true}, ss));
  return written;
}

}  // namespace percept
