#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "waveinst/mask.hpp"

namespace waveinst {

struct MeasurementError : Error {
  using Error::Error;
};
struct FitError : Error {
  using Error::Error;
};

struct TrunkMeasurement {
  double pixel_height = 0;  // rows spanned
  double pixel_width = 0;   // median row width in the breast-height band
  std::string tag;          // capture-distance id
};

/// Largest 8-connected component; ties go to the component found first in
/// row-major order.
inline BinaryMask largest_component(const BinaryMask& m) {
  cv::Mat src(m.height, m.width, CV_8UC1, const_cast<std::uint8_t*>(m.data.data()));
  cv::Mat labels, stats, centroids;
  const int n = cv::connectedComponentsWithStats(src, labels, stats, centroids, 8, CV_32S);
  int best = 0, best_area = 0;
  for (int l = 1; l < n; ++l)
    if (stats.at<int>(l, cv::CC_STAT_AREA) > best_area) best = l, best_area = stats.at<int>(l, cv::CC_STAT_AREA);
  BinaryMask out(m.height, m.width);
  if (best == 0) return out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = labels.at<int>(y, x) == best;
  return out;
}

/// Height is the occupied row extent. Width is the median pixel count of
/// the occupied rows lying floor(0.2 h) to floor(0.4 h) rows above the
/// bottom row, a breast-height proxy.
inline TrunkMeasurement measure_mask(const BinaryMask& mask, bool keep_largest_component = true,
                                     const std::string& tag = {}) {
  if (mask.empty()) throw MeasurementError("measure_mask: mask is empty");
  const BinaryMask m = keep_largest_component ? largest_component(mask) : mask;
  std::vector<int> row_count(m.height, 0);
  int top = m.height, bottom = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) row_count[y] += m.at(y, x);
    if (row_count[y]) top = std::min(top, y), bottom = std::max(bottom, y);
  }
  const int h = bottom - top + 1;
  std::vector<int> band;
  for (int r = static_cast<int>(std::floor(0.2 * h)); r <= static_cast<int>(std::floor(0.4 * h)); ++r)
    if (row_count[bottom - r]) band.push_back(row_count[bottom - r]);
  if (band.empty()) throw MeasurementError("measure_mask: no occupied rows in the measurement band");
  std::sort(band.begin(), band.end());
  const std::size_t k = band.size();
  const double width = k % 2 ? band[k / 2] : 0.5 * (band[k / 2 - 1] + band[k / 2]);
  return {static_cast<double>(h), width, tag};
}

struct LinearFit {
  double slope = 0, intercept = 0;
  double r2 = 0;  // 1 - SS_res / SS_tot; 0 when SS_tot is 0
  int samples = 0;

  double operator()(double x) const { return slope * x + intercept; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LinearFit, slope, intercept, r2, samples)

/// Ordinary least squares y = a x + b.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw FitError("fit_line: x and y differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw FitError("fit_line: need at least 2 samples, got " + std::to_string(n));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw FitError("fit_line: regressor has zero variance");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.samples = static_cast<int>(n);
  double ss_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (y[i] - my) - f.slope * (x[i] - mx);
    ss_res += r * r;
  }
  f.r2 = syy == 0 ? 0.0 : std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  return f;
}

/// One field observation: pixel measurements with measured DBH (cm) and
/// tree height (m).
struct GrowthSample {
  std::string tag;
  double pixel_width = 0, pixel_height = 0;
  double dbh_cm = 0, height_m = 0;
};

/// Per-distance-tag regressions: DBH on pixel width, height on pixel height.
struct GrowthModel {
  struct PerTag {
    LinearFit dbh, height;
  };
  std::map<std::string, PerTag> tags;

  const PerTag& at(const std::string& tag) const {
    const auto it = tags.find(tag);
    if (it == tags.end()) {
      std::string known;
      for (const auto& [t, _] : tags) known += (known.empty() ? "" : ", ") + t;
      throw InputError("no growth model for distance tag '" + tag + "' (fitted: " + known + ")");
    }
    return it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& [tag, m] : tags)
      j.push_back({{"tag", tag},
                   {"dbh", {{"slope", m.dbh.slope}, {"intercept", m.dbh.intercept}, {"r2", m.dbh.r2}, {"samples", m.dbh.samples}}},
                   {"height",
                    {{"slope", m.height.slope}, {"intercept", m.height.intercept}, {"r2", m.height.r2}, {"samples", m.height.samples}}}});
    return {{"models", j}};
  }

  static GrowthModel from_json(const nlohmann::json& j) {
    GrowthModel g;
    try {
      for (const auto& e : j.at("models")) g.tags[e.at("tag").get<std::string>()] = {e.at("dbh").get<LinearFit>(), e.at("height").get<LinearFit>()};
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("growth model: ") + e.what());
    }
    return g;
  }
};

inline GrowthModel fit_growth(const std::vector<GrowthSample>& samples) {
  std::map<std::string, std::vector<const GrowthSample*>> by_tag;
  for (const auto& s : samples) by_tag[s.tag].push_back(&s);
  if (by_tag.empty()) throw FitError("fit_growth: no samples");
  GrowthModel g;
  for (const auto& [tag, list] : by_tag) {
    std::vector<double> w, h, d, t;
    for (const auto* s : list) {
      w.push_back(s->pixel_width);
      h.push_back(s->pixel_height);
      d.push_back(s->dbh_cm);
      t.push_back(s->height_m);
    }
    try {
      g.tags[tag] = {fit_line(w, d), fit_line(h, t)};
    } catch (const FitError& e) {
      throw FitError("tag '" + tag + "': " + e.what());
    }
  }
  return g;
}

struct GrowthPrediction {
  int instance = 0;  // index into the detection list
  double score = 0;
  TrunkMeasurement measurement;
  double dbh_cm = 0, height_m = 0;
};

/// Applies the tag's regressions to every trunk detection. An unseen tag is
/// refused even when there is nothing to measure.
inline std::vector<GrowthPrediction> predict_growth(const std::vector<Detection>& detections, const GrowthModel& model,
                                                    const std::string& tag, int trunk_category = 0) {
  const auto& m = model.at(tag);
  std::vector<GrowthPrediction> out;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    if (d.category != trunk_category || d.mask.empty()) continue;
    const auto meas = measure_mask(d.mask, true, tag);
    out.push_back({static_cast<int>(i), d.score, meas, m.dbh(meas.pixel_width), m.height(meas.pixel_height)});
  }
  return out;
}

// ---- CSV ----

struct MeasurementRow {
  int image_id = 0, instance_id = 0;
  TrunkMeasurement m;
  std::optional<double> dbh_cm, height_m;  // ground truth, when known
};

inline std::string measurements_csv(const std::vector<MeasurementRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  const bool truth = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.dbh_cm.has_value(); });
  os << "image_id,instance_id,pixel_width,pixel_height,tag" << (truth ? ",dbh_cm,height_m" : "") << '\n';
  for (const auto& r : rows) {
    os << r.image_id << ',' << r.instance_id << ',' << r.m.pixel_width << ',' << r.m.pixel_height << ',' << r.m.tag;
    if (truth) {
      os << ',';
      if (r.dbh_cm) os << *r.dbh_cm;
      os << ',';
      if (r.height_m) os << *r.height_m;
    }
    os << '\n';
  }
  return os.str();
}

/// Reads rows written by measurements_csv (header required, no quoting).
inline std::vector<MeasurementRow> parse_measurements_csv(std::istream& in) {
  auto split = [](const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    return f;
  };
  std::string line;
  if (!std::getline(in, line)) throw InputError("measurements CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"image_id", "instance_id", "pixel_width", "pixel_height", "tag"})
    if (!col.count(need)) throw InputError(std::string("measurements CSV: missing column '") + need + "'");
  std::vector<MeasurementRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size())
      throw InputError("measurements CSV line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    try {
      MeasurementRow r;
      r.image_id = std::stoi(f[col["image_id"]]);
      r.instance_id = std::stoi(f[col["instance_id"]]);
      r.m.pixel_width = std::stod(f[col["pixel_width"]]);
      r.m.pixel_height = std::stod(f[col["pixel_height"]]);
      r.m.tag = f[col["tag"]];
      if (col.count("dbh_cm") && !f[col["dbh_cm"]].empty()) r.dbh_cm = std::stod(f[col["dbh_cm"]]);
      if (col.count("height_m") && !f[col["height_m"]].empty()) r.height_m = std::stod(f[col["height_m"]]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw InputError("measurements CSV line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

/// Rows with both ground-truth columns become fitting samples.
inline std::vector<GrowthSample> samples_from_rows(const std::vector<MeasurementRow>& rows) {
  std::vector<GrowthSample> s;
  for (const auto& r : rows)
    if (r.dbh_cm && r.height_m) s.push_back({r.m.tag, r.m.pixel_width, r.m.pixel_height, *r.dbh_cm, *r.height_m});
  return s;
}

}  // namespace waveinst
