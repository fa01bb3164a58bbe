#pragma once

// Per-structure volumetry: absolute volume, share of the intracranial
// volume, left/right asymmetry, optional Dice against a reference and
// optional population-bounds flags from fitted age/volume curves.

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "evalstats.hpp"
#include "taxonomy.hpp"
#include "volgrid.hpp"

namespace lseg {

inline constexpr LabelId kWholeRow = 0;  // label column value of the whole-cerebellum row

enum class Bounds { unknown, inside, outside };

inline const char* to_string(Bounds b) {
  return b == Bounds::inside ? "inside" : b == Bounds::outside ? "outside" : "";
}

struct VolumeRow {
  LabelId label = kWholeRow;
  std::string name;
  std::size_t voxels = 0;
  double volume_cm3 = 0.0;
  std::optional<double> percent_icv;
  std::optional<double> dice;
  Bounds bounds = Bounds::unknown;

  friend bool operator==(const VolumeRow&, const VolumeRow&) = default;
};

struct AsymmetryRow {
  int cls = 1;  // structure class 1..13
  std::string name;
  double left_cm3 = 0.0, right_cm3 = 0.0;
  double index = 0.0;  // 200 (R - L) / (R + L), 0 when both are empty

  friend bool operator==(const AsymmetryRow&, const AsymmetryRow&) = default;
};

struct Report {
  std::vector<VolumeRow> volumes;  // 26 structures, then the whole cerebellum
  std::vector<AsymmetryRow> asymmetry;
  std::optional<double> icv_cm3;
  std::optional<double> age;
  std::vector<std::string> warnings;

  const VolumeRow& whole() const { return volumes.back(); }
  const VolumeRow& row(LabelId id) const { return volumes.at(id - 1); }

  friend bool operator==(const Report& a, const Report& b) {
    return a.volumes == b.volumes && a.asymmetry == b.asymmetry && a.icv_cm3 == b.icv_cm3 && a.age == b.age;
  }
};

/// Age/volume curve per structure (cm^3). Key kWholeRow is the whole
/// cerebellum.
using PopulationModel = std::map<LabelId, PolyFit>;

inline double asymmetry_index(double left, double right) {
  const double s = left + right;
  return s == 0.0 ? 0.0 : 200.0 * (right - left) / s;
}

/// Inside when |v - f(age)| <= 2 * residual_std.
inline Bounds population_bounds(const PolyFit& fit, double age, double volume) {
  return std::fabs(volume - fit.evaluate(age)) <= 2.0 * fit.residual_std ? Bounds::inside : Bounds::outside;
}

struct ReportInputs {
  const LabelGrid* labels = nullptr;
  const LabelGrid* icv = nullptr;        // nonzero = inside
  const LabelGrid* reference = nullptr;  // ground truth for Dice
  std::optional<double> age;
  const PopulationModel* population = nullptr;
};

inline Report make_report(const ReportInputs& in) {
  if (!in.labels) throw ArgumentError("report: no segmentation");
  const LabelGrid& seg = *in.labels;
  const auto& sp = seg.geometry().spacing_mm;
  const double voxel_cm3 = static_cast<double>(sp[0]) * sp[1] * sp[2] / 1000.0;
  std::array<std::size_t, kNumLabels + 1> counts{};
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (seg[i] > kNumLabels) throw ArgumentError("report: label id outside the taxonomy");
    ++counts[seg[i]];
  }
  Report r;
  if (in.icv) {
    require_same_lattice(seg, *in.icv, "report");
    std::size_t n = 0;
    for (std::size_t i = 0; i < in.icv->size(); ++i) n += (*in.icv)[i] != 0;
    if (n > 0) r.icv_cm3 = static_cast<double>(n) * voxel_cm3;
  }
  std::optional<DiceTable> dice;
  if (in.reference) dice = aggregate_dice(seg, *in.reference);
  r.age = in.age;
  if (in.age && !in.population) r.warnings.push_back("age given without a population model; bounds omitted");

  const LabelTaxonomy tax;
  auto finish = [&](VolumeRow& row) {
    row.volume_cm3 = static_cast<double>(row.voxels) * voxel_cm3;
    if (r.icv_cm3) row.percent_icv = 100.0 * row.volume_cm3 / *r.icv_cm3;
    if (in.age && in.population) {
      const auto it = in.population->find(row.label);
      if (it != in.population->end()) row.bounds = population_bounds(it->second, *in.age, row.volume_cm3);
    }
  };
  std::size_t fg = 0;
  for (LabelId id = 1; id <= kNumLabels; ++id) {
    VolumeRow row;
    row.label = id;
    row.name = tax.entry(id).name;
    row.voxels = counts[id];
    fg += counts[id];
    if (dice) row.dice = dice->label(id);
    finish(row);
    r.volumes.push_back(row);
  }
  VolumeRow whole;
  whole.label = kWholeRow;
  whole.name = "Whole cerebellum";
  whole.voxels = fg;
  if (dice) whole.dice = dice->whole;
  finish(whole);
  r.volumes.push_back(whole);

  for (int c = 1; c <= kNumClasses; ++c) {
    AsymmetryRow a;
    a.cls = c;
    a.name = std::string(kClassNames[c - 1]);
    a.left_cm3 = r.row(LabelTaxonomy::lookup(1, c)).volume_cm3;
    a.right_cm3 = r.row(LabelTaxonomy::lookup(2, c)).volume_cm3;
    a.index = asymmetry_index(a.left_cm3, a.right_cm3);
    r.asymmetry.push_back(a);
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV: one table, `kind` selects the row type. Numbers use %.17g so the
// file parses back to identical doubles.
//   kind,label,name,voxels,volume_cm3,percent_icv,dice,bounds,left_cm3,right_cm3,asymmetry
// `meta` rows carry icv_cm3 and age in the volume_cm3 column.

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace detail

inline constexpr const char* kReportCsvHeader =
    "kind,label,name,voxels,volume_cm3,percent_icv,dice,bounds,left_cm3,right_cm3,asymmetry";

inline std::string report_csv(const Report& r) {
  using detail::num;
  using detail::opt_num;
  std::ostringstream os;
  os << kReportCsvHeader << '\n';
  if (r.icv_cm3) os << "meta,,icv_cm3,," << num(*r.icv_cm3) << ",,,,,,\n";
  if (r.age) os << "meta,,age,," << num(*r.age) << ",,,,,,\n";
  for (const auto& v : r.volumes)
    os << "volume," << int(v.label) << ',' << detail::quote(v.name) << ',' << v.voxels << ',' << num(v.volume_cm3)
       << ',' << opt_num(v.percent_icv) << ',' << opt_num(v.dice) << ',' << to_string(v.bounds) << ",,,\n";
  for (const auto& a : r.asymmetry)
    os << "asymmetry," << a.cls << ',' << detail::quote(a.name) << ",,,,,," << num(a.left_cm3) << ','
       << num(a.right_cm3) << ',' << num(a.index) << '\n';
  return os.str();
}

inline Report parse_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kReportCsvHeader) throw ArgumentError("report csv: unexpected header");
  Report r;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 11) throw ArgumentError("report csv: line " + std::to_string(lineno) + " has wrong field count");
    try {
      if (f[0] == "meta") {
        if (f[2] == "icv_cm3") r.icv_cm3 = std::stod(f[4]);
        else if (f[2] == "age") r.age = std::stod(f[4]);
      } else if (f[0] == "volume") {
        VolumeRow v;
        v.label = static_cast<LabelId>(std::stoi(f[1]));
        v.name = f[2];
        v.voxels = static_cast<std::size_t>(std::stoull(f[3]));
        v.volume_cm3 = std::stod(f[4]);
        v.percent_icv = detail::parse_opt(f[5]);
        v.dice = detail::parse_opt(f[6]);
        v.bounds = f[7] == "inside" ? Bounds::inside : f[7] == "outside" ? Bounds::outside : Bounds::unknown;
        r.volumes.push_back(v);
      } else if (f[0] == "asymmetry") {
        AsymmetryRow a;
        a.cls = std::stoi(f[1]);
        a.name = f[2];
        a.left_cm3 = std::stod(f[8]);
        a.right_cm3 = std::stod(f[9]);
        a.index = std::stod(f[10]);
        r.asymmetry.push_back(a);
      } else {
        throw ArgumentError("report csv: unknown row kind '" + f[0] + "'");
      }
    } catch (const std::logic_error&) {
      throw ArgumentError("report csv: malformed number on line " + std::to_string(lineno));
    }
  }
  return r;
}

inline std::string report_text(const Report& r) {
  std::ostringstream os;
  char buf[160];
  os << "Cerebellum volumetry\n";
  if (r.icv_cm3) {
    std::snprintf(buf, sizeof buf, "ICV: %.2f cm3\n", *r.icv_cm3);
    os << buf;
  }
  if (r.age) {
    std::snprintf(buf, sizeof buf, "Age: %.1f years\n", *r.age);
    os << buf;
  }
  os << '\n';
  std::snprintf(buf, sizeof buf, "%-26s %10s %8s %7s  %s\n", "Structure", "cm3", "%ICV", "Dice", "Population");
  os << buf;
  for (const auto& v : r.volumes) {
    const std::string icv = v.percent_icv ? [&] {
      char b[16];
      std::snprintf(b, sizeof b, "%.3f", *v.percent_icv);
      return std::string(b);
    }() : std::string("-");
    const std::string dice = v.dice ? [&] {
      char b[16];
      std::snprintf(b, sizeof b, "%.4f", *v.dice);
      return std::string(b);
    }() : std::string("-");
    std::snprintf(buf, sizeof buf, "%-26s %10.3f %8s %7s  %s\n", v.name.c_str(), v.volume_cm3, icv.c_str(),
                  dice.c_str(), v.bounds == Bounds::unknown ? "-" : to_string(v.bounds));
    os << buf;
  }
  os << "\nAsymmetry index, 200 (R - L) / (R + L)\n";
  for (const auto& a : r.asymmetry) {
    std::snprintf(buf, sizeof buf, "%-26s %8.2f\n", a.name.c_str(), a.index);
    os << buf;
  }
  for (const auto& w : r.warnings) os << "warning: " << w << '\n';
  return os.str();
}

}  // namespace lseg
