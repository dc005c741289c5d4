#include "aunet/data.hpp"
#include "aunet/roi_geometry.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace aunet;

namespace {

// A face centered in a 224 image with eyes 40 px apart.
LandmarkSet face_224() {
  LandmarkSet l;
  for (const Point& u : unit_face_template().points) l.points.push_back({62 + u.x * 100, 62 + u.y * 100});
  return l;
}

RuleTable with_rule_one(int base, double dx, double dy) {
  auto rules = default_rule_table().rules();
  rules[0].base_landmark = base;
  rules[0].dx = dx;
  rules[0].dy = dy;
  return RuleTable(rules);
}

}  // namespace

TEST(AuCenters, ZeroOffsetIsTheBaseLandmark) {
  const LandmarkSet l = face_224();
  const auto centers = compute_au_centers(l, with_rule_one(30, 0, 0), {224, 224});
  EXPECT_EQ(centers[0], l.points[30]);
}

TEST(AuCenters, OffsetScalesWithInterOcularDistance) {
  LandmarkSet l = face_224();
  l.points[36] = {80, 60};
  l.points[45] = {120, 60};
  l.points[30] = {100, 80};
  const auto centers = compute_au_centers(l, with_rule_one(30, 0.0, 0.5), {224, 224});
  EXPECT_DOUBLE_EQ(centers[0].x, 100.0);
  EXPECT_DOUBLE_EQ(centers[0].y, 100.0);
}

TEST(AuCenters, MirroredFaceGivesMirroredCenters) {
  const ImageSize image{224, 224};
  const LandmarkSet l = face_224();
  const auto& rules = default_rule_table();
  const auto plain = compute_au_centers(l, rules, image);
  const auto mirrored = compute_au_centers(mirror_landmarks(l, image), rules, image);
  for (const auto& r : rules.rules()) {
    const int partner = r.symmetry_partner.value_or(r.rule_id);
    const Point expect = plain[static_cast<std::size_t>(partner - 1)];
    const Point got = mirrored[static_cast<std::size_t>(r.rule_id - 1)];
    EXPECT_NEAR(got.x, 223.0 - expect.x, 1e-9) << "rule " << r.rule_id;
    EXPECT_NEAR(got.y, expect.y, 1e-9) << "rule " << r.rule_id;
  }
}

TEST(AuCenters, DegenerateEyesRejected) {
  LandmarkSet l = face_224();
  l.points[45] = l.points[36];
  EXPECT_THROW(compute_au_centers(l, default_rule_table(), {224, 224}), std::invalid_argument);
}

TEST(AuCenters, CentersAreClampedIntoTheImage) {
  const LandmarkSet l = face_224();
  const auto centers = compute_au_centers(l, with_rule_one(30, 0, 10), {224, 224});
  EXPECT_DOUBLE_EQ(centers[0].y, 223.0);
}

TEST(FeatureGrid, Origin) { EXPECT_EQ(map_to_feature_grid({0, 0}, {224, 224}, {14, 14}), (GridCell{0, 0})); }

TEST(FeatureGrid, StrideSixteen) {
  EXPECT_EQ(map_to_feature_grid({160, 96}, {224, 224}, {14, 14}), (GridCell{6, 10}));
}

TEST(FeatureGrid, LastPixel) { EXPECT_EQ(map_to_feature_grid({223, 223}, {224, 224}, {14, 14}), (GridCell{13, 13})); }

TEST(CropWindow, Interior) {
  EXPECT_EQ(crop_window({6, 10}, 3, {14, 14}), (GridWindow{5, 7, 9, 11}));
}

TEST(CropWindow, ShiftedInwardAtTopLeft) { EXPECT_EQ(crop_window({0, 0}, 3, {14, 14}), (GridWindow{0, 2, 0, 2})); }

TEST(CropWindow, ShiftedInwardAtBottomRight) {
  EXPECT_EQ(crop_window({13, 13}, 3, {14, 14}), (GridWindow{11, 13, 11, 13}));
}

TEST(CropWindow, LargerThanGridRejected) {
  EXPECT_THROW(crop_window({1, 1}, 5, {4, 4}), std::invalid_argument);
}

TEST(CropWindow, AlwaysFullSizeAndInside) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<Index> cell(0, 9);
  for (int i = 0; i < 500; ++i) {
    const GridWindow w = crop_window({cell(rng), cell(rng)}, 3, {10, 10});
    EXPECT_EQ(w.rows(), 3);
    EXPECT_EQ(w.cols(), 3);
    EXPECT_GE(w.row_begin, 0);
    EXPECT_LE(w.row_end, 9);
    EXPECT_GE(w.col_begin, 0);
    EXPECT_LE(w.col_end, 9);
  }
}

TEST(FeatureGrid, SmallPerturbationsMoveAtMostOneCell) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> pos(0, 223), delta(-10, 10);
  for (int i = 0; i < 2000; ++i) {
    const Point p{pos(rng), pos(rng)};
    const Point q = clamp_to_image({p.x + delta(rng), p.y + delta(rng)}, {224, 224});
    const GridCell a = map_to_feature_grid(p, {224, 224}, {14, 14});
    const GridCell b = map_to_feature_grid(q, {224, 224}, {14, 14});
    EXPECT_LE(std::abs(a.row - b.row), 1);
    EXPECT_LE(std::abs(a.col - b.col), 1);
  }
}

TEST(RuleTable, DefaultLinksEveryModeledAu) {
  const auto& t = default_rule_table();
  EXPECT_NO_THROW(t.validate(default_au_list()));
  EXPECT_EQ(t.regions_for_au(12), (std::vector<int>{12, 13}));
  EXPECT_EQ(t.regions_for_au(17), (std::vector<int>{18}));
  EXPECT_EQ(t.regions_for_au(23), t.regions_for_au(24));
  EXPECT_TRUE(t.regions_for_au(9).empty());
}

TEST(RuleTable, TextRoundTrip) {
  std::stringstream ss;
  write_rule_table(ss, default_rule_table());
  const RuleTable back = parse_rule_table(ss);
  ASSERT_EQ(back.rules().size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& a = default_rule_table().rules()[i];
    const auto& b = back.rules()[i];
    EXPECT_EQ(a.rule_id, b.rule_id);
    EXPECT_EQ(a.base_landmark, b.base_landmark);
    EXPECT_DOUBLE_EQ(a.dx, b.dx);
    EXPECT_DOUBLE_EQ(a.dy, b.dy);
    EXPECT_EQ(a.au_links, b.au_links);
    EXPECT_EQ(a.symmetry_partner, b.symmetry_partner);
  }
}

TEST(RuleTable, MalformedLineNamesTheLine) {
  std::stringstream ss("# header\n1 21 0.0\n");
  try {
    parse_rule_table(ss);
    FAIL() << "expected a parse error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(RuleTable, AsymmetricPartnersRejected) {
  auto rules = default_rule_table().rules();
  rules[0].symmetry_partner = 3;
  EXPECT_THROW(RuleTable(rules).validate(default_au_list()), std::invalid_argument);
}

TEST(RegionWindows, TwentyFullWindowsOnTheDeskGrid) {
  const auto sd = generate_synthetic(SynthConfig{.subjects = 1, .sessions = 1, .frames = 2}, 4);
  const auto w = region_windows(sd.data.frames[0].landmarks, default_rule_table(), {40, 40}, {10, 10}, 3);
  for (const auto& g : w) {
    EXPECT_EQ(g.rows(), 3);
    EXPECT_EQ(g.cols(), 3);
  }
}
