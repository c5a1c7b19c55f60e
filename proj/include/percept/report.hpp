// SPDX-License-Identifier: Apache-2.0
#pragma once

// Static SVG line plots from run and sweep CSVs.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace percept {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
  std::string title, xlabel, ylabel;
  bool logx = false, logy = false;
};

/// Nonpositive values are dropped from log axes.
std::string render_svg(const PlotSpec& spec, const std::vector<Series>& series);

/// Generic CSV table: header names and string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int column(const std::string& name) const;  // -1 if absent
};

CsvTable read_csv(const std::filesystem::path& path);

/// Writes one SVG per plan (sweep CSV) or one loss-vs-compute plot (run
/// CSV) into `out`. Returns the written files.
std::vector<std::filesystem::path> render_report(const std::filesystem::path& csv, const std::filesystem::path& out);

}  // namespace percept
