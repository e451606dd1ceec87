#pragma once

#include "kivi/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace kivi {

/// Grid terrain with piecewise-constant cells. Cell (i, j) covers the world
/// rectangle [ox + i*cs, ox + (i+1)*cs) x [oy + j*cs, oy + (j+1)*cs), where
/// i runs along x and j along y. Heights are stored row-major with rows
/// along y: index = j*nx + i.
struct HeightField {
  int nx = 0;
  int ny = 0;
  double cell_size = 0.1;
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::vector<float> heights;

  float& at(int ix, int iy) { return heights[static_cast<size_t>(iy) * nx + ix]; }
  float at(int ix, int iy) const { return heights[static_cast<size_t>(iy) * nx + ix]; }

  bool in_bounds(double x, double y) const {
    return x >= origin_x && y >= origin_y &&
           x < origin_x + nx * cell_size && y < origin_y + ny * cell_size;
  }

  int cell_x(double x) const { return static_cast<int>(std::floor((x - origin_x) / cell_size)); }
  int cell_y(double y) const { return static_cast<int>(std::floor((y - origin_y) / cell_size)); }

  /// Height of the border cell nearest to (possibly out-of-range) indices.
  float at_clamped(int ix, int iy) const {
    ix = std::clamp(ix, 0, nx - 1);
    iy = std::clamp(iy, 0, ny - 1);
    return at(ix, iy);
  }

  float height_clamped(double x, double y) const {
    return at_clamped(cell_x(x), cell_y(y));
  }
};

/// Elevation of the cell containing (x, y). Out-of-bounds queries are a
/// contract violation.
inline double height_at(const HeightField& f, double x, double y) {
  if (!f.in_bounds(x, y)) throw std::out_of_range("height_at: query outside field bounds");
  return f.at(f.cell_x(x), f.cell_y(y));
}

enum class TerrainKind { Stairs, Boxes, RandomRough, Slope, Gaps, HighWalls };

inline const char* terrain_kind_name(TerrainKind k) {
  switch (k) {
    case TerrainKind::Stairs: return "stairs";
    case TerrainKind::Boxes: return "boxes";
    case TerrainKind::RandomRough: return "rough";
    case TerrainKind::Slope: return "slope";
    case TerrainKind::Gaps: return "gaps";
    case TerrainKind::HighWalls: return "walls";
  }
  return "?";
}

inline std::optional<TerrainKind> terrain_kind_from_name(const std::string& s) {
  if (s == "stairs") return TerrainKind::Stairs;
  if (s == "boxes") return TerrainKind::Boxes;
  if (s == "rough" || s == "random_rough" || s == "flat") return TerrainKind::RandomRough;
  if (s == "slope") return TerrainKind::Slope;
  if (s == "gaps") return TerrainKind::Gaps;
  if (s == "walls" || s == "high_walls") return TerrainKind::HighWalls;
  return std::nullopt;
}

struct TerrainSpec {
  TerrainKind kind = TerrainKind::RandomRough;
  double difficulty = 0.0;      // in [0, 1]
  int obstacle_count = 0;       // in [0, 5]
  uint64_t seed = 0;

  void validate() const {
    if (!(difficulty >= 0.0 && difficulty <= 1.0))
      throw std::invalid_argument("TerrainSpec: difficulty outside [0, 1]");
    if (obstacle_count < 0 || obstacle_count > 5)
      throw std::invalid_argument("TerrainSpec: obstacle_count outside [0, 5]");
  }
};

// Parameter ranges, linear in difficulty.
struct TerrainRanges {
  double stair_rise_min = 0.05, stair_rise_max = 0.23;   // m
  double stair_run = 0.30;                                // m
  double box_height_min = 0.05, box_height_max = 0.30;    // m
  double rough_amp_max = 0.10;                            // m
  double slope_max_deg = 25.0;                            // deg
  double gap_width_min = 0.10, gap_width_max = 0.60;      // m
  double wall_height_min = 0.30, wall_height_max = 1.00;  // m
};

inline const TerrainRanges& terrain_ranges() {
  static const TerrainRanges r;
  return r;
}

/// Axis-aligned raised block recorded by the generator.
struct PlacedBox {
  double cx, cy;       // center (m)
  double hx, hy;       // half extents (m)
  double height;       // top elevation (m)
};

/// Generator byproducts used by tests and the curriculum: every raised block
/// placed, and the dimension that scales with difficulty for this kind.
struct TerrainLog {
  std::vector<PlacedBox> boxes;
  double governing_dimension = 0.0;  // rise / box height / gap width / wall height (m)
};

struct GeneratedTerrain {
  HeightField field;
  TerrainLog log;
};

namespace detail {

constexpr double kFieldExtent = 8.0;      // m, square field
constexpr double kFieldCell = 0.1;        // m
constexpr double kSpawnClearRadius = 0.9; // m kept free of obstacles around the center

inline void fill_box(HeightField& f, const PlacedBox& b) {
  const int i0 = std::max(0, f.cell_x(b.cx - b.hx));
  const int i1 = std::min(f.nx - 1, f.cell_x(b.cx + b.hx));
  const int j0 = std::max(0, f.cell_y(b.cy - b.hy));
  const int j1 = std::min(f.ny - 1, f.cell_y(b.cy + b.hy));
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i)
      f.at(i, j) = std::max(f.at(i, j), static_cast<float>(b.height));
}

inline bool overlaps(const PlacedBox& a, const PlacedBox& b, double margin) {
  return std::abs(a.cx - b.cx) < a.hx + b.hx + margin &&
         std::abs(a.cy - b.cy) < a.hy + b.hy + margin;
}

/// Scatters `count` non-overlapping raised blocks of the given height,
/// keeping the spawn area clear. Placements that cannot be fitted after a
/// bounded number of attempts are skipped.
inline void scatter_boxes(HeightField& f, TerrainLog& log, Rng& rng, int count,
                          double height, double base_height = 0.0) {
  const double half = kFieldExtent / 2.0 - 0.5;
  for (int n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      PlacedBox b;
      b.hx = rng.uniform(0.2, 0.6);
      b.hy = rng.uniform(0.2, 0.6);
      b.cx = rng.uniform(-half + b.hx, half - b.hx);
      b.cy = rng.uniform(-half + b.hy, half - b.hy);
      b.height = base_height + height;
      const double clear = kSpawnClearRadius;
      if (std::abs(b.cx) < b.hx + clear && std::abs(b.cy) < b.hy + clear) continue;
      bool bad = false;
      for (const auto& other : log.boxes)
        if (overlaps(b, other, 0.2)) { bad = true; break; }
      if (bad) continue;
      log.boxes.push_back(b);
      fill_box(f, b);
      break;
    }
  }
}

}  // namespace detail

/// Procedurally generates one terrain instance. Pure function of the spec:
/// identical specs produce bit-identical fields.
inline GeneratedTerrain generate_terrain_detailed(const TerrainSpec& spec) {
  spec.validate();
  const TerrainRanges& R = terrain_ranges();
  const double d = spec.difficulty;

  GeneratedTerrain out;
  HeightField& f = out.field;
  f.cell_size = detail::kFieldCell;
  f.nx = static_cast<int>(std::lround(detail::kFieldExtent / f.cell_size));
  f.ny = f.nx;
  f.origin_x = -detail::kFieldExtent / 2.0;
  f.origin_y = -detail::kFieldExtent / 2.0;
  f.heights.assign(static_cast<size_t>(f.nx) * f.ny, 0.0f);

  Rng rng(Rng::derive(spec.seed, 0x7e22a11100ULL + static_cast<uint64_t>(spec.kind)));

  switch (spec.kind) {
    case TerrainKind::Stairs: {
      // Pyramid stairs: flat center pad, rings ascending outward.
      const double rise = R.stair_rise_min + d * (R.stair_rise_max - R.stair_rise_min);
      out.log.governing_dimension = rise;
      const double pad = 1.2;
      for (int j = 0; j < f.ny; ++j) {
        for (int i = 0; i < f.nx; ++i) {
          const double x = f.origin_x + (i + 0.5) * f.cell_size;
          const double y = f.origin_y + (j + 0.5) * f.cell_size;
          const double r = std::max(std::abs(x), std::abs(y));
          if (r > pad) {
            const int step = static_cast<int>(std::floor((r - pad) / R.stair_run)) + 1;
            f.at(i, j) = static_cast<float>(step * rise);
          }
        }
      }
      break;
    }
    case TerrainKind::Boxes: {
      const double h = R.box_height_min + d * (R.box_height_max - R.box_height_min);
      out.log.governing_dimension = h;
      for (int n = 0; n < 8; ++n)
        detail::scatter_boxes(f, out.log, rng, 1, rng.uniform(0.4, 1.0) * h);
      break;
    }
    case TerrainKind::RandomRough: {
      const double amp = R.rough_amp_max * d;
      out.log.governing_dimension = amp;
      if (amp > 0.0)
        for (auto& h : f.heights) h = static_cast<float>(rng.uniform(-amp, amp));
      break;
    }
    case TerrainKind::Slope: {
      const double ang = d * R.slope_max_deg * M_PI / 180.0;
      out.log.governing_dimension = ang;
      const double slope = std::tan(ang);
      for (int j = 0; j < f.ny; ++j)
        for (int i = 0; i < f.nx; ++i)
          f.at(i, j) = static_cast<float>(slope * (f.origin_x + (i + 0.5) * f.cell_size));
      break;
    }
    case TerrainKind::Gaps: {
      const double w = R.gap_width_min + d * (R.gap_width_max - R.gap_width_min);
      out.log.governing_dimension = w;
      // Trenches across y at fixed stations left and right of the spawn pad.
      const double depth = -1.0;
      for (double station : {-2.8, -1.6, 1.6, 2.8}) {
        const int i0 = std::max(0, f.cell_x(station - w / 2.0));
        const int i1 = std::min(f.nx - 1, f.cell_x(station + w / 2.0));
        for (int j = 0; j < f.ny; ++j)
          for (int i = i0; i <= i1; ++i)
            f.at(i, j) = static_cast<float>(depth);
      }
      break;
    }
    case TerrainKind::HighWalls: {
      const double h = R.wall_height_min + d * (R.wall_height_max - R.wall_height_min);
      out.log.governing_dimension = h;
      // Partial-width walls with a random side opening; the robot walks around.
      for (double station : {-2.2, 2.2}) {
        const double opening = rng.uniform(1.0, 1.6);
        const bool open_left = rng.uniform01() < 0.5;
        PlacedBox b;
        b.cx = station;
        b.hx = 0.1;
        b.hy = (detail::kFieldExtent - opening) / 4.0;
        b.cy = open_left ? (detail::kFieldExtent / 2.0 - b.hy)
                         : -(detail::kFieldExtent / 2.0 - b.hy);
        b.height = h;
        out.log.boxes.push_back(b);
        detail::fill_box(f, b);
      }
      break;
    }
  }

  if (spec.obstacle_count > 0) {
    const double h = R.box_height_min + d * (R.box_height_max - R.box_height_min);
    detail::scatter_boxes(f, out.log, rng, spec.obstacle_count, h);
  }
  return out;
}

inline HeightField generate_terrain(const TerrainSpec& spec) {
  return generate_terrain_detailed(spec).field;
}

// ---------------------------------------------------------------------------
// Height scan

inline constexpr int kScanNx = 17;  // along body x, 0.1 m spacing
inline constexpr int kScanNy = 11;  // along body y
inline constexpr int kScanSize = kScanNx * kScanNy;
inline constexpr double kScanSpacing = 0.1;
inline constexpr double kScanClip = 1.0;  // m

/// World xy of scan point (ix, iy) for a base at (bx, by) with the given yaw.
inline void scan_point(double bx, double by, double yaw, int ix, int iy,
                       double& px, double& py) {
  const double lx = (ix - (kScanNx - 1) / 2.0) * kScanSpacing;
  const double ly = (iy - (kScanNy - 1) / 2.0) * kScanSpacing;
  const double c = std::cos(yaw), s = std::sin(yaw);
  px = bx + c * lx - s * ly;
  py = by + s * lx + c * ly;
}

/// 187 base-relative heights on a yaw-aligned 17x11 grid (x-major order),
/// each entry base_z - terrain, clipped to [-1, 1] m. Points beyond the field
/// use the clamped border height.
inline Vec sample_height_scan(const HeightField& f, double base_x, double base_y,
                              double base_z, double base_yaw) {
  Vec scan(kScanSize);
  for (int ix = 0; ix < kScanNx; ++ix) {
    for (int iy = 0; iy < kScanNy; ++iy) {
      double px, py;
      scan_point(base_x, base_y, base_yaw, ix, iy, px, py);
      const double h = f.height_clamped(px, py);
      scan[ix * kScanNy + iy] = clampd(base_z - h, -kScanClip, kScanClip);
    }
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Raycasting against the piecewise-constant field

/// Casts a ray from `origin` along unit `dir`, returning the distance to the
/// first surface hit (cell top or the vertical face between cells), or
/// nullopt within `max_range`. Cells outside the grid take the clamped border
/// height, so the field extends flat to infinity.
inline std::optional<double> raycast(const HeightField& f, const Vec3& origin,
                                     const Vec3& dir, double max_range) {
  const double cs = f.cell_size;
  int ix = f.cell_x(origin.x());
  int iy = f.cell_y(origin.y());

  double t = 0.0;
  // t at which the ray crosses the next x/y grid line, and per-cell increments.
  const double inv_dx = dir.x() != 0.0 ? 1.0 / dir.x() : 0.0;
  const double inv_dy = dir.y() != 0.0 ? 1.0 / dir.y() : 0.0;
  const int step_x = dir.x() > 0.0 ? 1 : -1;
  const int step_y = dir.y() > 0.0 ? 1 : -1;
  double tx = std::numeric_limits<double>::infinity();
  double ty = std::numeric_limits<double>::infinity();
  if (dir.x() != 0.0) {
    const double edge = f.origin_x + (ix + (step_x > 0 ? 1 : 0)) * cs;
    tx = (edge - origin.x()) * inv_dx;
  }
  if (dir.y() != 0.0) {
    const double edge = f.origin_y + (iy + (step_y > 0 ? 1 : 0)) * cs;
    ty = (edge - origin.y()) * inv_dy;
  }
  const double dtx = dir.x() != 0.0 ? cs * std::abs(inv_dx) : 0.0;
  const double dty = dir.y() != 0.0 ? cs * std::abs(inv_dy) : 0.0;

  while (t <= max_range) {
    const double h = f.at_clamped(ix, iy);
    const double z_here = origin.z() + dir.z() * t;
    if (z_here <= h) return t;  // entered below the cell top: face hit
    const double t_exit = std::min({tx, ty, max_range});
    if (dir.z() < 0.0) {
      const double t_hit = (h - origin.z()) / dir.z();
      if (t_hit >= t && t_hit <= t_exit) return t_hit;  // top-surface hit
    }
    if (t_exit >= max_range) return std::nullopt;
    if (tx < ty) {
      t = tx;
      tx += dtx;
      ix += step_x;
    } else {
      t = ty;
      ty += dty;
      iy += step_y;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Curriculum

struct CurriculumState {
  int level = 0;
  int max_level = 10;
  int promotions = 0;
  int demotions = 0;
};

/// Promote one level when more than half the terrain was traversed, demote
/// when less than half the commanded distance was covered. Level stays in
/// [0, max_level].
inline CurriculumState update_curriculum(CurriculumState state, double traversed_fraction,
                                         double commanded_distance_fraction) {
  if (traversed_fraction < 0.0 || commanded_distance_fraction < 0.0)
    throw std::invalid_argument("update_curriculum: fractions must be >= 0");
  if (traversed_fraction > 0.5) {
    state.level = std::min(state.level + 1, state.max_level);
    state.promotions++;
  } else if (commanded_distance_fraction < 0.5) {
    state.level = std::max(state.level - 1, 0);
    state.demotions++;
  }
  return state;
}

// ---------------------------------------------------------------------------
// Heightfield file format: magic "KIVI-HF1", nx/ny as 32-bit LE integers,
// cell_size and origin as 64-bit LE floats, then row-major 32-bit LE heights.

inline void save_heightfield(const HeightField& f, std::ostream& os) {
  write_magic(os, "KIVI-HF1");
  write_pod<int32_t>(os, f.nx);
  write_pod<int32_t>(os, f.ny);
  write_pod<double>(os, f.cell_size);
  write_pod<double>(os, f.origin_x);
  write_pod<double>(os, f.origin_y);
  write_bytes(os, f.heights.data(), f.heights.size() * sizeof(float));
}

inline void save_heightfield(const HeightField& f, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  save_heightfield(f, os);
}

inline HeightField load_heightfield(std::istream& is) {
  expect_magic(is, "KIVI-HF1", "heightfield");
  HeightField f;
  f.nx = read_pod<int32_t>(is);
  f.ny = read_pod<int32_t>(is);
  f.cell_size = read_pod<double>(is);
  f.origin_x = read_pod<double>(is);
  f.origin_y = read_pod<double>(is);
  if (f.nx <= 0 || f.ny <= 0 || f.cell_size <= 0.0)
    throw std::runtime_error("heightfield: invalid header");
  f.heights.resize(static_cast<size_t>(f.nx) * f.ny);
  read_bytes(is, f.heights.data(), f.heights.size() * sizeof(float));
  return f;
}

inline HeightField load_heightfield(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return load_heightfield(is);
}

}  // namespace kivi
