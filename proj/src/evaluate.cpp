#include "bevodom/evaluate.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <fstream>

namespace bevodom {

Pose3 umeyama_alignment(std::span<const Vec3> from, std::span<const Vec3> to) {
  if (from.size() != to.size() || from.size() < 2) {
    throw std::invalid_argument("alignment needs >= 2 paired points");
  }
  const double n = static_cast<double>(from.size());
  Vec3 c_from = Vec3::Zero(), c_to = Vec3::Zero();
  for (size_t i = 0; i < from.size(); ++i) {
    c_from += from[i];
    c_to += to[i];
  }
  c_from /= n;
  c_to /= n;

  Mat3 W = Mat3::Zero();
  for (size_t i = 0; i < from.size(); ++i) {
    W += (to[i] - c_to) * (from[i] - c_from).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(W, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
    D(2, 2) = -1.0;
  }
  const Mat3 R = svd.matrixU() * D * svd.matrixV().transpose();
  return {R, c_to - R * c_from};
}

AteResult evaluate_ate(std::span<const TrajectoryRecord> estimate,
                       std::span<const TrajectoryRecord> ground_truth,
                       double max_dt) {
  std::vector<Vec3> est_pts, gt_pts;
  size_t cursor = 0;
  for (const TrajectoryRecord& e : estimate) {
    while (cursor + 1 < ground_truth.size() &&
           std::abs(ground_truth[cursor + 1].t - e.t) <=
               std::abs(ground_truth[cursor].t - e.t)) {
      ++cursor;
    }
    if (cursor < ground_truth.size() &&
        std::abs(ground_truth[cursor].t - e.t) <= max_dt) {
      est_pts.push_back(e.p);
      gt_pts.push_back(ground_truth[cursor].p);
    }
  }
  if (est_pts.size() < 2) {
    throw std::runtime_error("fewer than 2 timestamp associations");
  }

  AteResult out;
  out.pairs = static_cast<int>(est_pts.size());
  out.alignment = umeyama_alignment(est_pts, gt_pts);

  double sq_sum = 0.0;
  Vec3 axis_sq = Vec3::Zero();
  for (size_t i = 0; i < est_pts.size(); ++i) {
    const Vec3 r = gt_pts[i] - out.alignment * est_pts[i];
    const double e2 = r.squaredNorm();
    sq_sum += e2;
    axis_sq += r.cwiseProduct(r);
    out.mean += std::sqrt(e2);
    out.max_error = std::max(out.max_error, std::sqrt(e2));
  }
  const double n = static_cast<double>(est_pts.size());
  out.rmse = std::sqrt(sq_sum / n);
  out.per_axis_rmse = (axis_sq / n).cwiseSqrt();
  out.mean /= n;
  return out;
}

void write_trajectory_svg(
    const std::string& path,
    const std::vector<std::pair<std::string,
                                std::vector<TrajectoryRecord>>>& named) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);

  double min_x = 1e30, max_x = -1e30, min_y = 1e30, max_y = -1e30;
  for (const auto& [name, traj] : named) {
    for (const TrajectoryRecord& r : traj) {
      min_x = std::min(min_x, r.p.x());
      max_x = std::max(max_x, r.p.x());
      min_y = std::min(min_y, r.p.y());
      max_y = std::max(max_y, r.p.y());
    }
  }
  if (min_x > max_x) {
    min_x = min_y = -1.0;
    max_x = max_y = 1.0;
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-6});
  const double size = 720.0, margin = 60.0;
  const double scale = (size - 2.0 * margin) / span;
  const auto sx = [&](double x) { return margin + (x - min_x) * scale; };
  const auto sy = [&](double y) { return size - margin - (y - min_y) * scale; };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#ff7f0e", "#9467bd"};
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size
     << "\" height=\"" << size << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  int idx = 0;
  for (const auto& [name, traj] : named) {
    const char* color = kColors[idx % 5];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (const TrajectoryRecord& r : traj) {
      os << sx(r.p.x()) << "," << sy(r.p.y()) << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << margin << "\" y=\"" << 20 + 18 * idx
       << "\" fill=\"" << color << "\" font-family=\"monospace\">" << name
       << "</text>\n";
    ++idx;
  }
  os << "<text x=\"" << size - 200 << "\" y=\"" << size - 20
     << "\" font-family=\"monospace\" fill=\"#444\">x-y [m], span "
     << span << " m</text>\n";
  os << "</svg>\n";
}

}  // namespace bevodom
