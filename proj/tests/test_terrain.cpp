#include "kivi/terrain.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "oracle_utils.hpp"

using namespace kivi;

TEST(Terrain, GenerationIsDeterministic) {
  for (TerrainKind kind : {TerrainKind::Stairs, TerrainKind::Boxes, TerrainKind::RandomRough,
                           TerrainKind::Slope, TerrainKind::Gaps, TerrainKind::HighWalls}) {
    TerrainSpec spec{kind, 0.7, 3, 42};
    const HeightField a = generate_terrain(spec);
    const HeightField b = generate_terrain(spec);
    ASSERT_EQ(a.heights, b.heights);
    ASSERT_EQ(a.nx, b.nx);
  }
}

TEST(Terrain, ZeroDifficultyRoughIsFlat) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 7});
  for (float h : f.heights) EXPECT_EQ(h, 0.0f);
}

TEST(Terrain, StairsMaxDifficultyRiseMatchesDecidedMaximum) {
  const HeightField f = generate_terrain({TerrainKind::Stairs, 1.0, 0, 3});
  double max_rise = 0.0;
  for (int j = 0; j < f.ny; ++j)
    for (int i = 0; i + 1 < f.nx; ++i)
      max_rise = std::max(max_rise, std::abs(double(f.at(i + 1, j)) - f.at(i, j)));
  for (int j = 0; j + 1 < f.ny; ++j)
    for (int i = 0; i < f.nx; ++i)
      max_rise = std::max(max_rise, std::abs(double(f.at(i, j + 1)) - f.at(i, j)));
  EXPECT_NEAR(max_rise, terrain_ranges().stair_rise_max, 1e-6);
}

TEST(Terrain, GoverningDimensionMonotoneInDifficulty) {
  for (TerrainKind kind : {TerrainKind::Stairs, TerrainKind::Boxes, TerrainKind::Gaps,
                           TerrainKind::HighWalls}) {
    double prev = -1.0;
    for (int i = 0; i <= 10; ++i) {
      const auto gen = generate_terrain_detailed({kind, i / 10.0, 0, 11});
      EXPECT_GE(gen.log.governing_dimension, prev)
          << terrain_kind_name(kind) << " at difficulty " << i / 10.0;
      prev = gen.log.governing_dimension;
    }
  }
}

TEST(Terrain, InvalidSpecThrows) {
  EXPECT_THROW(generate_terrain({TerrainKind::Stairs, 1.5, 0, 0}), std::invalid_argument);
  EXPECT_THROW(generate_terrain({TerrainKind::Stairs, 0.5, 9, 0}), std::invalid_argument);
}

TEST(HeightAt, FlatFieldAndContainment) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  EXPECT_EQ(height_at(f, 0.0, 0.0), 0.0);
  EXPECT_EQ(height_at(f, 2.5, -1.3), 0.0);
  // Query at origin + half cell reads cell (0, 0).
  HeightField g = f;
  g.at(0, 0) = 0.5f;
  EXPECT_DOUBLE_EQ(height_at(g, g.origin_x + 0.05, g.origin_y + 0.05), 0.5);
  EXPECT_THROW(height_at(f, 100.0, 0.0), std::out_of_range);
  EXPECT_THROW(height_at(f, 0.0, -4.001), std::out_of_range);
}

TEST(HeightAt, MatchesBoxPlacementLog) {
  const auto gen = generate_terrain_detailed({TerrainKind::Boxes, 0.8, 4, 99});
  ASSERT_FALSE(gen.log.boxes.empty());
  for (const auto& b : gen.log.boxes) {
    EXPECT_NEAR(height_at(gen.field, b.cx, b.cy), b.height, 1e-6)
        << "box at (" << b.cx << ", " << b.cy << ")";
  }
}

TEST(HeightScan, FlatGroundValues) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  const Vec scan = sample_height_scan(f, 0.0, 0.0, 0.30, 0.0);
  ASSERT_EQ(scan.size(), 187);
  for (int i = 0; i < scan.size(); ++i) EXPECT_DOUBLE_EQ(scan[i], 0.30);
  const Vec zero = sample_height_scan(f, 0.0, 0.0, 0.0, 0.0);
  for (int i = 0; i < zero.size(); ++i) EXPECT_DOUBLE_EQ(zero[i], 0.0);
}

TEST(HeightScan, EntriesMatchHeightAtPointwise) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.6, 0, 5});
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const double bx = rng.uniform(-2.0, 2.0);
    const double by = rng.uniform(-2.0, 2.0);
    const double bz = rng.uniform(-1.5, 1.5);
    const double yaw = rng.uniform(-M_PI, M_PI);
    const Vec scan = sample_height_scan(f, bx, by, bz, yaw);
    for (int ix = 0; ix < kScanNx; ++ix) {
      for (int iy = 0; iy < kScanNy; ++iy) {
        double px, py;
        scan_point(bx, by, yaw, ix, iy, px, py);
        const double expected = clampd(bz - height_at(f, px, py), -1.0, 1.0);
        EXPECT_DOUBLE_EQ(scan[ix * kScanNy + iy], expected);
      }
    }
  }
}

TEST(HeightScan, BoxBesideBase) {
  HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  // 0.2 m box ahead of the base.
  PlacedBox b{0.5, 0.0, 0.2, 0.2, 0.2};
  detail::fill_box(f, b);
  const double base_z = 0.32;
  const Vec scan = sample_height_scan(f, 0.0, 0.0, base_z, 0.0);
  bool saw_box = false;
  for (int ix = 0; ix < kScanNx; ++ix) {
    for (int iy = 0; iy < kScanNy; ++iy) {
      double px, py;
      scan_point(0.0, 0.0, 0.0, ix, iy, px, py);
      if (std::abs(px - b.cx) < 0.15 && std::abs(py - b.cy) < 0.15) {
        EXPECT_NEAR(scan[ix * kScanNy + iy], base_z - 0.2, 1e-6);
        saw_box = true;
      }
    }
  }
  EXPECT_TRUE(saw_box);
}

TEST(HeightScan, EdgeClampOutsideField) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  const Vec scan = sample_height_scan(f, 3.95, 0.0, 0.3, 0.0);  // pattern exits +x edge
  for (int i = 0; i < scan.size(); ++i) EXPECT_DOUBLE_EQ(scan[i], 0.3);
}

TEST(Curriculum, PromoteDemoteClamp) {
  CurriculumState s;
  s.max_level = 10;
  s = update_curriculum(s, 0.9, 1.0);
  EXPECT_EQ(s.level, 1);
  s.level = 0;
  s = update_curriculum(s, 0.1, 0.1);
  EXPECT_EQ(s.level, 0);  // demotion clamped at 0
  s.level = s.max_level;
  s = update_curriculum(s, 1.0, 1.0);
  EXPECT_EQ(s.level, s.max_level);  // promotion clamped at max
}

TEST(Curriculum, LevelStaysInRangeUnderRandomUpdates) {
  Rng rng(3);
  CurriculumState s;
  s.max_level = 5;
  for (int i = 0; i < 1000; ++i) {
    s = update_curriculum(s, rng.uniform(0.0, 1.5), rng.uniform(0.0, 1.5));
    ASSERT_GE(s.level, 0);
    ASSERT_LE(s.level, s.max_level);
  }
  EXPECT_THROW(update_curriculum(s, -0.1, 0.5), std::invalid_argument);
}

TEST(HeightFieldIO, RoundTripBitExact) {
  const HeightField f = generate_terrain({TerrainKind::Boxes, 0.5, 3, 21});
  std::stringstream ss;
  save_heightfield(f, ss);
  const HeightField g = load_heightfield(ss);
  EXPECT_EQ(f.nx, g.nx);
  EXPECT_EQ(f.ny, g.ny);
  EXPECT_EQ(f.cell_size, g.cell_size);
  EXPECT_EQ(f.origin_x, g.origin_x);
  EXPECT_EQ(f.origin_y, g.origin_y);
  EXPECT_EQ(f.heights, g.heights);
}

TEST(HeightFieldIO, HeaderLayout) {
  HeightField f;
  f.nx = 2;
  f.ny = 1;
  f.cell_size = 0.1;
  f.origin_x = -0.1;
  f.origin_y = 0.0;
  f.heights = {1.0f, 2.0f};
  std::stringstream ss;
  save_heightfield(f, ss);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8 + 4 + 4 + 8 * 3 + 2 * 4);
  EXPECT_EQ(bytes.substr(0, 8), "KIVI-HF1");
  int32_t nx;
  std::memcpy(&nx, bytes.data() + 8, 4);
  EXPECT_EQ(nx, 2);
}

TEST(Raycast, VerticalAndSlantedHitsOnFlatGround) {
  const HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  const auto down = raycast(f, {0.0, 0.0, 2.0}, {0.0, 0.0, -1.0}, 10.0);
  ASSERT_TRUE(down.has_value());
  EXPECT_NEAR(*down, 2.0, 1e-12);
  Vec3 diag(1.0, 0.0, -1.0);
  diag.normalize();
  const auto slant = raycast(f, {0.0, 0.0, 1.0}, diag, 10.0);
  ASSERT_TRUE(slant.has_value());
  EXPECT_NEAR(*slant, std::sqrt(2.0), 1e-9);
  const auto sky = raycast(f, {0.0, 0.0, 1.0}, {0.0, 0.0, 1.0}, 10.0);
  EXPECT_FALSE(sky.has_value());
}

TEST(Raycast, HitsBoxFace) {
  HeightField f = generate_terrain({TerrainKind::RandomRough, 0.0, 0, 1});
  detail::fill_box(f, {1.0, 0.0, 0.5, 0.5, 0.4});
  // Horizontal ray at z = 0.2 should stop at the near box face (x = 0.5).
  const auto hit = raycast(f, {0.0, 0.0, 0.2}, {1.0, 0.0, 0.0}, 10.0);
  ASSERT_TRUE(hit.has_value());
  EXPECT_NEAR(*hit, 0.5, f.cell_size + 1e-9);
}
