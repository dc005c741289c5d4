#include "aunet/roi_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace aunet {

RuleTable::RuleTable(std::vector<AuCenterRule> rules, int version, int left_eye, int right_eye)
    : rules_(std::move(rules)), version_(version), left_eye_(left_eye), right_eye_(right_eye) {
  std::sort(rules_.begin(), rules_.end(),
            [](const AuCenterRule& a, const AuCenterRule& b) { return a.rule_id < b.rule_id; });
}

std::vector<int> RuleTable::regions_for_au(int au) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& links = rules_[i].au_links;
    if (std::find(links.begin(), links.end(), au) != links.end()) out.push_back(static_cast<int>(i));
  }
  return out;
}

void RuleTable::validate(const std::vector<int>& aus) const {
  if (rules_.size() != static_cast<std::size_t>(kNumRegions)) {
    throw std::invalid_argument("rule table must have exactly 20 rules, has " + std::to_string(rules_.size()));
  }
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& r = rules_[i];
    if (r.rule_id != static_cast<int>(i) + 1) {
      throw std::invalid_argument("rule ids must be 1..20, found " + std::to_string(r.rule_id));
    }
    if (r.base_landmark < 0) throw std::invalid_argument("rule " + std::to_string(r.rule_id) + ": negative landmark");
    if (r.symmetry_partner) {
      const int p = *r.symmetry_partner;
      if (p < 1 || p > kNumRegions || p == r.rule_id || rule(p).symmetry_partner != r.rule_id) {
        throw std::invalid_argument("rule " + std::to_string(r.rule_id) + ": symmetry partner " + std::to_string(p) +
                                    " is not mutual");
      }
    }
  }
  for (int au : aus) {
    if (regions_for_au(au).empty()) throw std::invalid_argument("AU" + std::to_string(au) + " has no linked rule");
  }
}

const std::vector<int>& default_au_list() {
  static const std::vector<int> aus{1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24};
  return aus;
}

const RuleTable& default_rule_table() {
  static const RuleTable table = [] {
    std::vector<AuCenterRule> r{
        {1, 21, 0.0, -0.10, {1}, 2},    {2, 22, 0.0, -0.10, {1}, 1},     // inner brow, frontalis
        {3, 18, 0.0, -0.10, {2}, 4},    {4, 25, 0.0, -0.10, {2}, 3},     // outer brow, frontalis
        {5, 20, 0.0, 0.12, {4}, 6},     {6, 23, 0.0, 0.12, {4}, 5},      // corrugator, below the brow
        {7, 41, 0.0, 0.30, {6}, 8},     {8, 46, 0.0, 0.30, {6}, 7},      // cheek, below lower lid
        {9, 40, 0.0, -0.05, {7}, 10},   {10, 47, 0.0, -0.05, {7}, 9},    // lids
        {11, 50, 0.0, -0.10, {10}, 12}, {12, 52, 0.0, -0.10, {10}, 11},  // above upper lip
        {13, 48, 0.0, 0.0, {12}, 14},   {14, 54, 0.0, 0.0, {12}, 13},    // lip corners
        {15, 48, -0.15, 0.0, {14}, 16}, {16, 54, 0.15, 0.0, {14}, 15},   // buccinator, lateral to corners
        {17, 48, 0.0, 0.20, {15}, 18},  {18, 54, 0.0, 0.20, {15}, 17},   // triangularis, below corners
        {19, 57, 0.0, 0.25, {17}, std::nullopt},                          // mentalis
        {20, 62, 0.0, 0.05, {23, 24}, std::nullopt},                      // orbicularis oris
    };
    RuleTable t(std::move(r));
    t.validate(default_au_list());
    return t;
  }();
  return table;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw std::invalid_argument("rule table line " + std::to_string(line) + ": " + what);
}

}  // namespace

RuleTable parse_rule_table(std::istream& is) {
  std::vector<AuCenterRule> rules;
  int version = 1, left = 36, right = 45;
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "version") {
      if (!(ls >> version)) parse_fail(line_no, "bad version");
      continue;
    }
    if (head == "eyes") {
      if (!(ls >> left >> right)) parse_fail(line_no, "bad eyes directive");
      continue;
    }
    AuCenterRule rule;
    std::string aus, partner;
    try {
      rule.rule_id = std::stoi(head);
    } catch (const std::exception&) {
      parse_fail(line_no, "bad rule id '" + head + "'");
    }
    if (!(ls >> rule.base_landmark >> rule.dx >> rule.dy >> aus >> partner)) parse_fail(line_no, "expected 6 fields");
    std::string extra;
    if (ls >> extra) parse_fail(line_no, "trailing field '" + extra + "'");
    std::istringstream as(aus);
    std::string tok;
    while (std::getline(as, tok, ',')) {
      try {
        rule.au_links.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        parse_fail(line_no, "bad AU list '" + aus + "'");
      }
    }
    if (partner != "-") {
      try {
        rule.symmetry_partner = std::stoi(partner);
      } catch (const std::exception&) {
        parse_fail(line_no, "bad symmetry partner '" + partner + "'");
      }
    }
    rules.push_back(std::move(rule));
  }
  RuleTable table(std::move(rules), version, left, right);
  table.validate({});
  return table;
}

RuleTable load_rule_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rule table " + path);
  return parse_rule_table(in);
}

void write_rule_table(std::ostream& os, const RuleTable& table) {
  os << "# rule_id base_landmark dx dy au_list symmetry_partner\n";
  os << "version " << table.version() << '\n';
  os << "eyes " << table.left_eye_landmark() << ' ' << table.right_eye_landmark() << '\n';
  for (const auto& r : table.rules()) {
    os << r.rule_id << ' ' << r.base_landmark << ' ' << std::setprecision(17) << r.dx << ' ' << r.dy << ' ';
    for (std::size_t i = 0; i < r.au_links.size(); ++i) os << (i ? "," : "") << r.au_links[i];
    os << ' ';
    if (r.symmetry_partner) os << *r.symmetry_partner;
    else os << '-';
    os << '\n';
  }
}

double inter_ocular_distance(const LandmarkSet& landmarks, const RuleTable& rules) {
  const auto n = static_cast<int>(landmarks.points.size());
  const int l = rules.left_eye_landmark(), r = rules.right_eye_landmark();
  if (l < 0 || r < 0 || l >= n || r >= n) {
    throw std::invalid_argument("eye landmarks " + std::to_string(l) + "/" + std::to_string(r) +
                                " outside a schema of " + std::to_string(n) + " points");
  }
  const Point a = landmarks.points[static_cast<std::size_t>(l)];
  const Point b = landmarks.points[static_cast<std::size_t>(r)];
  return std::hypot(a.x - b.x, a.y - b.y);
}

Point clamp_to_image(Point p, ImageSize image) {
  return {std::clamp(p.x, 0.0, static_cast<double>(image.width - 1)),
          std::clamp(p.y, 0.0, static_cast<double>(image.height - 1))};
}

RoiCenterSet compute_au_centers(const LandmarkSet& landmarks, const RuleTable& rules, ImageSize image) {
  const double iod = inter_ocular_distance(landmarks, rules);
  if (!(iod > 0)) throw std::invalid_argument("degenerate landmarks: zero inter-ocular distance");
  if (rules.rules().size() != static_cast<std::size_t>(kNumRegions)) {
    throw std::invalid_argument("rule table must have 20 rules");
  }
  RoiCenterSet centers;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const auto& r = rules.rules()[i];
    if (r.base_landmark >= static_cast<int>(landmarks.points.size())) {
      throw std::invalid_argument("rule " + std::to_string(r.rule_id) + " references landmark " +
                                  std::to_string(r.base_landmark) + " outside the schema");
    }
    const Point base = landmarks.points[static_cast<std::size_t>(r.base_landmark)];
    centers[i] = clamp_to_image({base.x + r.dx * iod, base.y + r.dy * iod}, image);
  }
  return centers;
}

GridCell map_to_feature_grid(Point p, ImageSize image, GridSize grid) {
  auto cell = [](double v, Index image_extent, Index grid_extent) {
    const auto c = static_cast<Index>(std::floor(v * static_cast<double>(grid_extent) / static_cast<double>(image_extent)));
    return std::clamp<Index>(c, 0, grid_extent - 1);
  };
  return {cell(p.y, image.height, grid.height), cell(p.x, image.width, grid.width)};
}

GridWindow crop_window(GridCell center, Index window_size, GridSize grid) {
  if (window_size < 1 || window_size > grid.height || window_size > grid.width) {
    throw std::invalid_argument("crop window of size " + std::to_string(window_size) + " does not fit a " +
                                std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  }
  auto start = [window_size](Index c, Index extent) {
    return std::clamp<Index>(c - window_size / 2, 0, extent - window_size);
  };
  const Index r0 = start(center.row, grid.height);
  const Index c0 = start(center.col, grid.width);
  return {r0, r0 + window_size - 1, c0, c0 + window_size - 1};
}

RegionWindows region_windows(const LandmarkSet& landmarks, const RuleTable& rules, ImageSize image, GridSize grid,
                             Index window_size) {
  const RoiCenterSet centers = compute_au_centers(landmarks, rules, image);
  RegionWindows out;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    out[i] = crop_window(map_to_feature_grid(centers[i], image, grid), window_size, grid);
  }
  return out;
}

const std::vector<int>& mirror_permutation_68() {
  static const std::vector<int> perm = [] {
    std::vector<int> p(68);
    for (int i = 0; i < 68; ++i) p[static_cast<std::size_t>(i)] = i;
    auto pair = [&p](int a, int b) {
      p[static_cast<std::size_t>(a)] = b;
      p[static_cast<std::size_t>(b)] = a;
    };
    for (int i = 0; i < 8; ++i) pair(i, 16 - i);  // jaw
    for (int i = 0; i < 5; ++i) pair(17 + i, 26 - i);  // brows
    pair(31, 35);
    pair(32, 34);
    pair(36, 45);
    pair(37, 44);
    pair(38, 43);
    pair(39, 42);
    pair(40, 47);
    pair(41, 46);
    pair(48, 54);
    pair(49, 53);
    pair(50, 52);
    pair(55, 59);
    pair(56, 58);
    pair(60, 64);
    pair(61, 63);
    pair(65, 67);
    return p;
  }();
  return perm;
}

LandmarkSet mirror_landmarks(const LandmarkSet& landmarks, ImageSize image) {
  if (landmarks.points.size() != 68) throw std::invalid_argument("mirror_landmarks needs the 68-point layout");
  const auto& perm = mirror_permutation_68();
  LandmarkSet out;
  out.points.resize(68);
  for (std::size_t i = 0; i < 68; ++i) {
    const Point p = landmarks.points[i];
    out.points[static_cast<std::size_t>(perm[i])] = {static_cast<double>(image.width - 1) - p.x, p.y};
  }
  return out;
}

}  // namespace aunet
