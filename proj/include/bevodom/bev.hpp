// Bird's-eye-view density images: voxel downsampling, the discrete and
// continuous pixel projections, and normalized per-cell point counts.
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevodom/geometry.hpp"

namespace bevodom {

struct BevConfig {
  double mu = 0.4;        // meters per pixel
  double x_max = 40.0;    // half window extent along x [m]
  double y_max = 40.0;    // half window extent along y [m]
  double voxel_leaf = 0.4;  // downsample leaf size [m], 0 disables
  int n_m = 10;           // density normalization factor [counts]
  bool per_frame_max = false;  // use the frame's max count instead of n_m

  int width() const { return static_cast<int>(std::ceil(2.0 * y_max / mu)); }
  int height() const { return static_cast<int>(std::ceil(2.0 * x_max / mu)); }
};

struct EmptyImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Normalized density grid. Row-major with u as column (from y) and v as
// row (from x); intensity(u,v) = min(count, N_m) / N_m.
struct BevImage {
  int width = 0;
  int height = 0;
  std::vector<float> intensity;
  std::vector<int> counts;
  BevConfig cfg;

  float at(int u, int v) const { return intensity[v * width + u]; }
  int count_at(int u, int v) const { return counts[v * width + u]; }
  bool in_bounds(int u, int v) const {
    return u >= 0 && u < width && v >= 0 && v < height;
  }
  // Pixel coordinates of the world origin (image center).
  Vec2 center() const { return {cfg.y_max / cfg.mu, cfg.x_max / cfg.mu}; }
};

// Centroid per occupied voxel, first-occupied order. leaf == 0 is identity.
std::vector<Vec3> voxel_downsample(std::span<const Vec3> pts, double leaf);

// Floor projection of one point; out-of-window yields nullopt.
std::optional<Eigen::Vector2i> project_point(const Vec3& point,
                                             const BevConfig& cfg);

// Same map without the floor.
Vec2 project_continuous(const Vec3& point, const BevConfig& cfg);

// d(u,v)/dP, constant: [[0, -1/mu, 0], [-1/mu, 0, 0]].
Eigen::Matrix<double, 2, 3> projection_jacobian(const BevConfig& cfg);

// A projected scan plus the pixel-to-point association used by the
// reprojection channel: each occupied cell remembers its minimum-range
// contributing point.
struct BevProjection {
  BevImage image;
  std::vector<Vec3> points;     // downsampled cloud the counts came from
  std::vector<int> cell_point;  // per cell, index into points; -1 if empty
  int out_of_window = 0;

  const Vec3* cell_source(int u, int v) const {
    const int id = cell_point[v * image.width + u];
    return id < 0 ? nullptr : &points[id];
  }
};

// Applies the voxel filter (cfg.voxel_leaf), then counts points per cell.
// Throws EmptyImageError when no point lands in the window.
BevProjection project_scan(std::span<const Vec3> pts, const BevConfig& cfg);

// Same, for a cloud that has already been downsampled.
BevProjection project_downsampled(std::vector<Vec3> pts, const BevConfig& cfg);

// Binary 8-bit PGM (P5), intensity scaled by 255, rows top to bottom in
// increasing v, columns in increasing u.
void write_pgm(const BevImage& img, const std::string& path);

}  // namespace bevodom
