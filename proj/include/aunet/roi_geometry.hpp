#pragma once

// Landmark-driven region geometry: AU centers in image space, their cells on
// the convolutional feature grid, and fixed-size crop windows around them.

#include "aunet/tensor.hpp"

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace aunet {

inline constexpr int kNumRegions = 20;
inline constexpr int kDefaultSchemaSize = 68;

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct ImageSize {
  Index height = 0;
  Index width = 0;
};

struct GridSize {
  Index height = 0;
  Index width = 0;
};

struct GridCell {
  Index row = 0;
  Index col = 0;
  friend bool operator==(const GridCell&, const GridCell&) = default;
};

// Inclusive bounds on the feature grid.
struct GridWindow {
  Index row_begin = 0;
  Index row_end = 0;
  Index col_begin = 0;
  Index col_end = 0;

  Index rows() const { return row_end - row_begin + 1; }
  Index cols() const { return col_end - col_begin + 1; }
  bool contains(Index r, Index c) const { return r >= row_begin && r <= row_end && c >= col_begin && c <= col_end; }
  friend bool operator==(const GridWindow&, const GridWindow&) = default;
};

struct LandmarkSet {
  std::vector<Point> points;
  std::size_t schema_size() const { return points.size(); }
};

struct AuCenterRule {
  int rule_id = 0;
  int base_landmark = 0;
  double dx = 0;  // inter-ocular distance units
  double dy = 0;
  std::vector<int> au_links;  // FACS AU numbers
  std::optional<int> symmetry_partner;
};

using RoiCenterSet = std::array<Point, kNumRegions>;
using RegionWindows = std::array<GridWindow, kNumRegions>;

class RuleTable {
 public:
  RuleTable() = default;
  RuleTable(std::vector<AuCenterRule> rules, int version = 1, int left_eye = 36, int right_eye = 45);

  const std::vector<AuCenterRule>& rules() const { return rules_; }
  const AuCenterRule& rule(int rule_id) const { return rules_.at(static_cast<std::size_t>(rule_id - 1)); }
  int version() const { return version_; }
  // Landmarks whose distance defines the inter-ocular unit.
  int left_eye_landmark() const { return left_eye_; }
  int right_eye_landmark() const { return right_eye_; }

  // Zero-based region indices linked to an AU, in rule order. Empty when unlinked.
  std::vector<int> regions_for_au(int au) const;

  // Throws std::invalid_argument unless the table has exactly 20 rules with ids
  // 1..20, mutual symmetry partners, and at least one rule per listed AU.
  void validate(const std::vector<int>& aus) const;

 private:
  std::vector<AuCenterRule> rules_;
  int version_ = 1;
  int left_eye_ = 36;
  int right_eye_ = 45;
};

// The twelve modeled AUs, in label-column order.
const std::vector<int>& default_au_list();

// Shipped rule table for the 68-point landmark layout.
const RuleTable& default_rule_table();

// Text format: '#' comments, optional `version N` and `eyes L R` lines, then
// one rule per line: `rule_id base_landmark dx dy au_list symmetry_partner`
// with au_list comma separated and symmetry_partner `-` when absent.
RuleTable parse_rule_table(std::istream& is);
RuleTable load_rule_table(const std::string& path);
void write_rule_table(std::ostream& os, const RuleTable& table);

double inter_ocular_distance(const LandmarkSet& landmarks, const RuleTable& rules);

Point clamp_to_image(Point p, ImageSize image);

// center_i = landmark[base_i] + offset_i * inter-ocular distance, clamped to the image.
RoiCenterSet compute_au_centers(const LandmarkSet& landmarks, const RuleTable& rules, ImageSize image);

GridCell map_to_feature_grid(Point p, ImageSize image, GridSize grid);

// Full-size window centered on `center`, shifted inward at the grid edges.
GridWindow crop_window(GridCell center, Index window_size, GridSize grid);

RegionWindows region_windows(const LandmarkSet& landmarks, const RuleTable& rules, ImageSize image, GridSize grid,
                             Index window_size);

// Left/right landmark correspondence of the 68-point layout.
const std::vector<int>& mirror_permutation_68();

// Reflects x -> (width-1) - x and relabels points through the mirror permutation.
LandmarkSet mirror_landmarks(const LandmarkSet& landmarks, ImageSize image);

}  // namespace aunet
