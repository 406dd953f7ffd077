#include "bevodom/bev.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>

namespace bevodom {

namespace {

int64_t voxel_key(const Vec3& p, double inv_leaf) {
  const auto cell = [](double c) {
    return static_cast<int64_t>(std::floor(c)) & 0x1fffff;  // 21 bits each
  };
  return (cell(p.x() * inv_leaf) << 42) | (cell(p.y() * inv_leaf) << 21) |
         cell(p.z() * inv_leaf);
}

}  // namespace

std::vector<Vec3> voxel_downsample(std::span<const Vec3> pts, double leaf) {
  if (leaf <= 0.0) {
    return {pts.begin(), pts.end()};
  }
  const double inv_leaf = 1.0 / leaf;
  std::unordered_map<int64_t, int> slot;
  slot.reserve(pts.size());
  std::vector<Vec3> sums;
  std::vector<int> counts;
  for (const Vec3& p : pts) {
    const int64_t key = voxel_key(p, inv_leaf);
    auto [it, inserted] = slot.try_emplace(key, static_cast<int>(sums.size()));
    if (inserted) {
      sums.push_back(p);
      counts.push_back(1);
    } else {
      sums[it->second] += p;
      ++counts[it->second];
    }
  }
  for (size_t i = 0; i < sums.size(); ++i) {
    sums[i] /= static_cast<double>(counts[i]);
  }
  return sums;
}

std::optional<Eigen::Vector2i> project_point(const Vec3& point,
                                             const BevConfig& cfg) {
  const int u = static_cast<int>(std::floor((cfg.y_max - point.y()) / cfg.mu));
  const int v = static_cast<int>(std::floor((cfg.x_max - point.x()) / cfg.mu));
  if (u < 0 || u >= cfg.width() || v < 0 || v >= cfg.height()) {
    return std::nullopt;
  }
  return Eigen::Vector2i(u, v);
}

Vec2 project_continuous(const Vec3& point, const BevConfig& cfg) {
  return {(cfg.y_max - point.y()) / cfg.mu, (cfg.x_max - point.x()) / cfg.mu};
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const BevConfig& cfg) {
  Eigen::Matrix<double, 2, 3> jac = Eigen::Matrix<double, 2, 3>::Zero();
  jac(0, 1) = -1.0 / cfg.mu;
  jac(1, 0) = -1.0 / cfg.mu;
  return jac;
}

BevProjection project_scan(std::span<const Vec3> pts, const BevConfig& cfg) {
  return project_downsampled(voxel_downsample(pts, cfg.voxel_leaf), cfg);
}

BevProjection project_downsampled(std::vector<Vec3> pts,
                                  const BevConfig& cfg) {
  BevProjection out;
  BevImage& img = out.image;
  img.cfg = cfg;
  img.width = cfg.width();
  img.height = cfg.height();
  const size_t cells = static_cast<size_t>(img.width) * img.height;
  img.counts.assign(cells, 0);
  img.intensity.assign(cells, 0.0f);
  out.cell_point.assign(cells, -1);
  out.points = std::move(pts);

  int in_window = 0;
  for (size_t i = 0; i < out.points.size(); ++i) {
    const auto uv = project_point(out.points[i], cfg);
    if (!uv) {
      ++out.out_of_window;
      continue;
    }
    ++in_window;
    const size_t idx = static_cast<size_t>(uv->y()) * img.width + uv->x();
    ++img.counts[idx];
    const int prev = out.cell_point[idx];
    if (prev < 0 || out.points[i].squaredNorm() <
                        out.points[prev].squaredNorm()) {
      out.cell_point[idx] = static_cast<int>(i);
    }
  }
  if (in_window == 0) {
    throw EmptyImageError("no points inside the BEV window");
  }

  int norm = cfg.n_m;
  if (cfg.per_frame_max) {
    norm = *std::max_element(img.counts.begin(), img.counts.end());
  }
  norm = std::max(norm, 1);
  for (size_t i = 0; i < cells; ++i) {
    img.intensity[i] =
        static_cast<float>(std::min(img.counts[i], norm)) / norm;
  }
  return out;
}

void write_pgm(const BevImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot open " + path);
  }
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(img.width);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      row[u] = static_cast<uint8_t>(
          std::lround(std::clamp(img.at(u, v), 0.0f, 1.0f) * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

}  // namespace bevodom
