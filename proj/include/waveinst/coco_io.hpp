#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "waveinst/image_io.hpp"
#include "waveinst/scene.hpp"

namespace waveinst {

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t offset) : Error(what), byte_offset(offset) {}
  std::size_t byte_offset;
};

/// Counts of annotations skipped while loading, with one message each.
struct LoadReport {
  int degenerate = 0;  // polygons with fewer than 3 points and nothing else
  int empty = 0;       // rasterised to zero pixels
  int crowd = 0;       // iscrowd annotations are not instances
  std::vector<std::string> messages;

  int warnings() const { return degenerate + empty + crowd; }
};

struct CocoLoad {
  Dataset dataset;
  LoadReport report;
};

// ---- RLE (column-major runs, first run counts zeros) ----

inline std::vector<std::uint32_t> rle_encode(const BinaryMask& m) {
  std::vector<std::uint32_t> counts;
  std::uint8_t cur = 0;
  std::uint32_t run = 0;
  for (int x = 0; x < m.width; ++x)
    for (int y = 0; y < m.height; ++y) {
      const std::uint8_t v = m.at(y, x) ? 1 : 0;
      if (v != cur) {
        counts.push_back(run);
        run = 0;
        cur = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

inline BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, int h, int w) {
  BinaryMask m(h, w);
  const std::size_t total = static_cast<std::size_t>(h) * w;
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (auto c : counts) {
    if (pos + c > total) throw InputError("RLE runs exceed mask size " + std::to_string(h) + "x" + std::to_string(w));
    if (v)
      for (std::size_t i = pos; i < pos + c; ++i) m.at(static_cast<int>(i % h), static_cast<int>(i / h)) = 1;
    pos += c;
    v ^= 1;
  }
  if (pos != total) throw InputError("RLE runs cover " + std::to_string(pos) + " of " + std::to_string(total) + " pixels");
  return m;
}

/// Compressed RLE string as written by the reference COCO tools.
inline std::vector<std::uint32_t> rle_from_string(const std::string& s) {
  std::vector<long long> cnts;
  std::size_t p = 0;
  while (p < s.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= s.size()) throw InputError("truncated compressed RLE");
      const long long c = static_cast<long long>(s[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (cnts.size() > 2) x += cnts[cnts.size() - 2];
    cnts.push_back(x);
  }
  std::vector<std::uint32_t> out;
  for (auto c : cnts) {
    if (c < 0) throw InputError("negative run in compressed RLE");
    out.push_back(static_cast<std::uint32_t>(c));
  }
  return out;
}

inline std::string rle_to_string(const std::vector<std::uint32_t>& counts) {
  std::string s;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    long long x = counts[i];
    if (i > 2) x -= counts[i - 2];
    bool more = true;
    while (more) {
      char c = static_cast<char>(x & 0x1f);
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      s.push_back(static_cast<char>(c + 48));
    }
  }
  return s;
}

/// Union of polygons, even-odd fill, sampled at pixel centres. Polygons with
/// fewer than 3 vertices are ignored.
inline BinaryMask rasterize_polygons(const std::vector<std::vector<double>>& polys, int h, int w) {
  BinaryMask m(h, w);
  std::vector<double> xs;
  for (const auto& poly : polys) {
    if (poly.size() < 6) continue;
    const std::size_t n = poly.size() / 2;
    for (int y = 0; y < h; ++y) {
      const double py = y + 0.5;
      xs.clear();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double yi = poly[2 * i + 1], yj = poly[2 * j + 1];
        if ((yi > py) == (yj > py)) continue;
        const double xi = poly[2 * i], xj = poly[2 * j];
        xs.push_back(xi + (py - yi) * (xj - xi) / (yj - yi));
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1);
        for (int x = x0; x <= x1; ++x) m.at(y, x) ^= 1;
      }
    }
  }
  return m;
}

namespace detail {

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what(), e.byte);
  }
}

inline BinaryMask decode_segmentation(const nlohmann::json& seg, int h, int w) {
  if (seg.is_array()) return rasterize_polygons(seg.get<std::vector<std::vector<double>>>(), h, w);
  if (seg.is_object()) {
    const auto size = seg.at("size").get<std::vector<int>>();
    if (size.size() != 2 || size[0] != h || size[1] != w)
      throw InputError("RLE size " + seg.at("size").dump() + " differs from image " + std::to_string(h) + "x" +
                       std::to_string(w));
    const auto& c = seg.at("counts");
    return rle_decode(c.is_string() ? rle_from_string(c.get<std::string>()) : c.get<std::vector<std::uint32_t>>(), h, w);
  }
  throw InputError("segmentation must be a polygon list or an RLE object");
}

}  // namespace detail

/// Reads a COCO-style instance file. `categories` fixes the category order by
/// name; when empty, the file's categories sorted by id are used. Images are
/// read from `image_root / file_name`; all missing files are reported
/// together.
inline CocoLoad load_coco(const std::filesystem::path& annotation_file, const std::filesystem::path& image_root,
                          const std::vector<std::string>& categories = {}) {
  const auto j = detail::parse_json_file(annotation_file);
  CocoLoad out;
  try {
    std::vector<std::pair<int, std::string>> file_cats;
    for (const auto& c : j.at("categories")) file_cats.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
    std::sort(file_cats.begin(), file_cats.end());
    auto& names = out.dataset.categories;
    names.clear();
    if (categories.empty())
      for (const auto& fc : file_cats) names.push_back(fc.second);
    else
      names = categories;
    std::map<int, int> cat_index;
    for (const auto& [id, name] : file_cats) {
      const auto it = std::find(names.begin(), names.end(), name);
      if (it != names.end()) cat_index[id] = static_cast<int>(it - names.begin());
    }

    std::map<int, std::size_t> by_id;
    std::vector<std::string> missing;
    for (const auto& im : j.at("images")) {
      SceneAnnotation s;
      s.image_id = im.at("id").get<int>();
      const int h = im.at("height").get<int>(), w = im.at("width").get<int>();
      const auto path = image_root / im.at("file_name").get<std::string>();
      s.source_path = path.string();
      if (!std::filesystem::exists(path)) {
        missing.push_back(path.string());
        continue;
      }
      s.image = read_image(path.string());
      if (s.height() != h || s.width() != w)
        throw InputError(path.string() + ": image is " + std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                         ", annotation says " + std::to_string(h) + "x" + std::to_string(w));
      if (by_id.count(s.image_id)) throw InputError("duplicate image id " + std::to_string(s.image_id));
      by_id[s.image_id] = out.dataset.scenes.size();
      out.dataset.scenes.push_back(std::move(s));
    }
    if (!missing.empty()) {
      std::string msg = std::to_string(missing.size()) + " image file(s) missing:";
      for (const auto& m : missing) msg += "\n  " + m;
      throw InputError(msg);
    }

    for (const auto& a : j.value("annotations", nlohmann::json::array())) {
      const int ann_id = a.value("id", -1), img = a.at("image_id").get<int>();
      const auto tag = "annotation " + std::to_string(ann_id);
      const auto sit = by_id.find(img);
      if (sit == by_id.end()) throw InputError(tag + " refers to unknown image " + std::to_string(img));
      const auto cit = cat_index.find(a.at("category_id").get<int>());
      if (cit == cat_index.end())
        throw ConfigError(tag + ": category id " + a.at("category_id").dump() + " is not in the configured set");
      if (a.value("iscrowd", 0) != 0) {
        ++out.report.crowd;
        out.report.messages.push_back(tag + ": crowd region skipped");
        continue;
      }
      auto& scene = out.dataset.scenes[sit->second];
      const auto& seg = a.at("segmentation");
      if (seg.is_array()) {
        bool usable = false;
        for (const auto& p : seg) usable |= p.size() >= 6;
        if (!usable) {
          ++out.report.degenerate;
          out.report.messages.push_back(tag + ": polygon with fewer than 3 points dropped");
          continue;
        }
      }
      BinaryMask m = detail::decode_segmentation(seg, scene.height(), scene.width());
      if (m.empty()) {
        ++out.report.empty;
        out.report.messages.push_back(tag + ": zero-area mask dropped");
        continue;
      }
      scene.instances.push_back({cit->second, std::move(m)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(annotation_file.string() + ": not a COCO instance file: " + e.what());
  }
  for (const auto& s : out.dataset.scenes) s.validate(static_cast<int>(out.dataset.categories.size()));
  return out;
}

inline std::string image_file_name(int image_id) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << image_id << ".png";
  return os.str();
}

/// COCO instance JSON with uncompressed RLE masks (exact round trip).
inline nlohmann::ordered_json to_coco_json(const Dataset& d) {
  nlohmann::ordered_json j;
  j["images"] = nlohmann::ordered_json::array();
  j["annotations"] = nlohmann::ordered_json::array();
  j["categories"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < d.categories.size(); ++c)
    j["categories"].push_back({{"id", c + 1}, {"name", d.categories[c]}});
  int ann_id = 1;
  for (const auto& s : d.scenes) {
    j["images"].push_back(
        {{"id", s.image_id}, {"file_name", image_file_name(s.image_id)}, {"height", s.height()}, {"width", s.width()}});
    for (const auto& g : s.instances) {
      int x0 = g.mask.width, y0 = g.mask.height, x1 = -1, y1 = -1;
      for (int y = 0; y < g.mask.height; ++y)
        for (int x = 0; x < g.mask.width; ++x)
          if (g.mask.at(y, x)) x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", s.image_id},
                                  {"category_id", g.category + 1},
                                  {"iscrowd", 0},
                                  {"area", g.mask.area()},
                                  {"bbox", {x0, y0, x1 - x0 + 1, y1 - y0 + 1}},
                                  {"segmentation", {{"size", {g.mask.height, g.mask.width}}, {"counts", rle_encode(g.mask)}}}});
    }
  }
  return j;
}

/// Writes `dir/annotations.json` and, when asked, `dir/images/<id>.png`.
inline void export_coco(const Dataset& d, const std::filesystem::path& dir, bool write_images = true) {
  std::filesystem::create_directories(dir / "images");
  if (write_images)
    for (const auto& s : d.scenes) write_image((dir / "images" / image_file_name(s.image_id)).string(), s.image);
  std::ofstream out(dir / "annotations.json");
  if (!out) throw Error("cannot write " + (dir / "annotations.json").string());
  out << to_coco_json(d).dump() << '\n';
}

}  // namespace waveinst
