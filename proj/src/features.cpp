#include "bevodom/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace bevodom {

namespace {

// Bresenham circle of radius 3, clockwise from 12 o'clock, offsets (du, dv).
constexpr int kRing[16][2] = {
    {0, -3}, {1, -3}, {2, -2}, {3, -1}, {3, 0},  {3, 1},  {2, 2},  {1, 3},
    {0, 3},  {-1, 3}, {-2, 2}, {-3, 1}, {-3, 0}, {-3, -1}, {-2, -2}, {-1, -3}};

// Longest contiguous run in a circular boolean sequence.
int longest_arc(const bool flags[16]) {
  int best = 0, run = 0;
  for (int i = 0; i < 32; ++i) {
    if (flags[i % 16]) {
      ++run;
      best = std::max(best, run);
      if (best >= 16) return 16;
    } else {
      run = 0;
    }
  }
  return best;
}

float fast_score(const float ring[16], float center, float t) {
  // Sum of contrast beyond the threshold over the qualifying side.
  float bright = 0.0f, dark = 0.0f;
  for (int i = 0; i < 16; ++i) {
    const float d = ring[i] - center;
    if (d > t) bright += d - t;
    if (-d > t) dark += -d - t;
  }
  return std::max(bright, dark);
}

float bilinear(const BevImage& img, double u, double v) {
  const int u0 = static_cast<int>(std::floor(u));
  const int v0 = static_cast<int>(std::floor(v));
  const double fu = u - u0, fv = v - v0;
  const auto px = [&](int uu, int vv) -> double {
    if (!img.in_bounds(uu, vv)) return 0.0;
    return img.at(uu, vv);
  };
  return static_cast<float>((1 - fu) * (1 - fv) * px(u0, v0) +
                            fu * (1 - fv) * px(u0 + 1, v0) +
                            (1 - fu) * fv * px(u0, v0 + 1) +
                            fu * fv * px(u0 + 1, v0 + 1));
}

void l2_normalize(Descriptor& d) {
  const float n = d.norm();
  if (n > 1e-12f) {
    d /= n;
  } else {
    d.setConstant(1.0f / std::sqrt(static_cast<float>(d.size())));
  }
}

// Reference orientation from the intensity centroid of a disk around the
// keypoint. Stable for rotationally symmetric blobs whose gradient
// histogram peak would be noise-driven; the surrounding structure decides.
double dominant_orientation(const BevImage& img, const Keypoint& kp,
                            int radius) {
  // Lever arms well beyond the patch keep the angle stable against the
  // one-cell jitter of the contributing structures.
  const int r = 2 * radius + radius / 2;
  double m10 = 0.0, m01 = 0.0;
  for (int dv = -r; dv <= r; ++dv) {
    for (int du = -r; du <= r; ++du) {
      const double d2 = double(du * du + dv * dv) / (r * r);
      if (d2 > 1.0) continue;
      // Salient mass only (single-count flicker must not steer the
      // reference orientation), apodized so structures entering or
      // leaving the support edge cannot flip the angle.
      const double val =
          std::max(0.0, bilinear(img, kp.u + du, kp.v + dv) - 0.25);
      const double w = (1.0 - d2) * (1.0 - d2);
      m10 += w * du * val;
      m01 += w * dv * val;
    }
  }
  if (std::abs(m10) < 1e-9 && std::abs(m01) < 1e-9) return 0.0;
  return std::atan2(m01, m10);
}

Descriptor gradient_patch_descriptor(const BevImage& img, const Keypoint& kp,
                                     int radius) {
  Descriptor desc = Descriptor::Zero(128);
  const double angle = dominant_orientation(img, kp, radius);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int size = 2 * radius;  // sample grid, cells of size/4
  for (int j = 0; j < size; ++j) {
    for (int i = 0; i < size; ++i) {
      // Patch coordinates centered on the keypoint, rotated by the
      // dominant orientation.
      const double px = i - radius + 0.5;
      const double py = j - radius + 0.5;
      const double u = kp.u + ca * px - sa * py;
      const double v = kp.v + sa * px + ca * py;
      const double gx_img = bilinear(img, u + 1, v) - bilinear(img, u - 1, v);
      const double gy_img = bilinear(img, u, v + 1) - bilinear(img, u, v - 1);
      const double mag = std::hypot(gx_img, gy_img);
      // Single-count density flicker produces gradients around 0.1 that
      // do not repeat across frames; keep only structural contrast.
      if (mag < 0.15) continue;
      // Gradient orientation relative to the patch orientation, soft
      // assigned to the two nearest bins; spatial cells are interpolated
      // bilinearly so the descriptor degrades smoothly under small
      // orientation errors.
      const double ang = std::atan2(gy_img, gx_img) - angle;
      double frac = (ang + 2.0 * M_PI) / (2.0 * M_PI);
      frac -= std::floor(frac);
      const double pos = frac * 8.0 - 0.5;
      const int b0 = static_cast<int>(std::floor(pos));
      const double wb = pos - b0;
      const double cell_size = size / 4.0;
      const double cx = (i + 0.5) / cell_size - 0.5;
      const double cy = (j + 0.5) / cell_size - 0.5;
      const int cx0 = static_cast<int>(std::floor(cx));
      const int cy0 = static_cast<int>(std::floor(cy));
      const double wx = cx - cx0, wy = cy - cy0;
      for (int dy = 0; dy < 2; ++dy) {
        const int cyi = cy0 + dy;
        if (cyi < 0 || cyi > 3) continue;
        for (int dx = 0; dx < 2; ++dx) {
          const int cxi = cx0 + dx;
          if (cxi < 0 || cxi > 3) continue;
          const double w_sp = (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
          const int cell = cyi * 4 + cxi;
          desc[cell * 8 + ((b0 + 8) & 7)] +=
              static_cast<float>(mag * w_sp * (1.0 - wb));
          desc[cell * 8 + ((b0 + 9) & 7)] +=
              static_cast<float>(mag * w_sp * wb);
        }
      }
    }
  }
  l2_normalize(desc);
  // Clamp strong bins and renormalize for illumination robustness.
  for (int k = 0; k < desc.size(); ++k) desc[k] = std::min(desc[k], 0.25f);
  l2_normalize(desc);
  return desc;
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const BevImage& img,
                                       const FeatureConfig& cfg) {
  // Rotated patches sample up to sqrt(2) * radius from the keypoint.
  const int margin = std::max(
      3, static_cast<int>(std::ceil(cfg.patch_radius * std::sqrt(2.0))) + 1);
  if (img.width <= 2 * margin || img.height <= 2 * margin) return {};

  std::vector<float> score(static_cast<size_t>(img.width) * img.height, 0.0f);
  const float t = static_cast<float>(cfg.fast_threshold);

  for (int v = margin; v < img.height - margin; ++v) {
    for (int u = margin; u < img.width - margin; ++u) {
      const float center = img.at(u, v);
      float ring[16];
      bool brighter[16], darker[16];
      // Quick reject on the axis pixels (positions 0, 4, 8, 12).
      int quick = 0;
      for (int i : {0, 4, 8, 12}) {
        const float p = img.at(u + kRing[i][0], v + kRing[i][1]);
        if (std::abs(p - center) > t) ++quick;
      }
      if (quick < 2) continue;
      for (int i = 0; i < 16; ++i) {
        ring[i] = img.at(u + kRing[i][0], v + kRing[i][1]);
        brighter[i] = ring[i] - center > t;
        darker[i] = center - ring[i] > t;
      }
      if (longest_arc(brighter) >= cfg.fast_arc ||
          longest_arc(darker) >= cfg.fast_arc) {
        score[v * img.width + u] = fast_score(ring, center, t);
      }
    }
  }

  std::vector<Keypoint> kps;
  for (int v = margin; v < img.height - margin; ++v) {
    for (int u = margin; u < img.width - margin; ++u) {
      const float s = score[v * img.width + u];
      if (s <= 0.0f) continue;
      bool is_max = true;
      for (int dv = -cfg.nms_radius; dv <= cfg.nms_radius && is_max; ++dv) {
        for (int du = -cfg.nms_radius; du <= cfg.nms_radius; ++du) {
          if (du == 0 && dv == 0) continue;
          const int uu = u + du, vv = v + dv;
          if (!img.in_bounds(uu, vv)) continue;
          const float other = score[vv * img.width + uu];
          // Strictly greater wins; equal scores go to the raster-first cell.
          if (other > s || (other == s && (dv < 0 || (dv == 0 && du < 0)))) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) {
        kps.push_back({static_cast<double>(u), static_cast<double>(v), s});
      }
    }
  }

  std::stable_sort(kps.begin(), kps.end(),
                   [](const Keypoint& a, const Keypoint& b) {
                     return a.score > b.score;
                   });
  if (static_cast<int>(kps.size()) > cfg.max_keypoints) {
    kps.resize(cfg.max_keypoints);
  }
  return kps;
}

// ---------------------------------------------------------------------------
// GradientVladProvider

void GradientVladProvider::fit(const std::vector<Descriptor>& training,
                               uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int k = clusters_;
  codebook_.assign(k, Descriptor::Zero(local_dim()));

  if (training.empty()) {
    std::normal_distribution<double> gauss;
    for (auto& c : codebook_) {
      for (int i = 0; i < c.size(); ++i) {
        c[i] = static_cast<float>(gauss(rng));
      }
      l2_normalize(c);
    }
    return;
  }

  // k-means++ seeding.
  std::uniform_int_distribution<size_t> first(0, training.size() - 1);
  codebook_[0] = training[first(rng)];
  std::vector<double> d2(training.size(),
                         std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (size_t i = 0; i < training.size(); ++i) {
      const double d = (training[i] - codebook_[c - 1]).squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    if (total <= 0.0) {
      codebook_[c] = training[first(rng)];
      continue;
    }
    std::uniform_real_distribution<double> pick(0.0, total);
    double target = pick(rng), acc = 0.0;
    size_t chosen = training.size() - 1;
    for (size_t i = 0; i < training.size(); ++i) {
      acc += d2[i];
      if (acc >= target) {
        chosen = i;
        break;
      }
    }
    codebook_[c] = training[chosen];
  }

  // Lloyd iterations.
  std::vector<int> assign(training.size(), 0);
  for (int iter = 0; iter < 25; ++iter) {
    bool changed = false;
    for (size_t i = 0; i < training.size(); ++i) {
      int best = 0;
      float best_d = std::numeric_limits<float>::infinity();
      for (int c = 0; c < k; ++c) {
        const float d = (training[i] - codebook_[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed = changed || best != assign[i];
      assign[i] = best;
    }
    std::vector<Descriptor> sums(k, Descriptor::Zero(local_dim()));
    std::vector<int> counts(k, 0);
    for (size_t i = 0; i < training.size(); ++i) {
      sums[assign[i]] += training[i];
      ++counts[assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        codebook_[c] = sums[c] / static_cast<float>(counts[c]);
      } else {
        // Re-seed empty clusters with the farthest training point.
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < training.size(); ++i) {
          const double d = (training[i] - codebook_[assign[i]]).squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        codebook_[c] = training[far];
      }
    }
    if (!changed) break;
  }
}

std::vector<Descriptor> GradientVladProvider::compute_local(
    const BevImage& img, const std::vector<Keypoint>& kps,
    int64_t /*frame_id*/) const {
  std::vector<Descriptor> out;
  out.reserve(kps.size());
  for (const Keypoint& kp : kps) {
    out.push_back(gradient_patch_descriptor(img, kp, patch_radius_));
  }
  return out;
}

Descriptor GradientVladProvider::compute_global(
    const BevImage& /*img*/, const std::vector<Descriptor>& locals,
    int64_t /*frame_id*/) const {
  if (locals.empty()) {
    throw std::invalid_argument("global descriptor needs local descriptors");
  }
  if (codebook_.empty()) {
    throw std::logic_error("VLAD codebook not fitted");
  }
  const int C = local_dim();
  Descriptor global = Descriptor::Zero(global_dim());
  for (const Descriptor& d : locals) {
    int best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (int c = 0; c < clusters_; ++c) {
      const float dist = (d - codebook_[c]).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    global.segment(best * C, C) += d - codebook_[best];
  }
  // Intra-normalize each cluster block, then the whole vector.
  for (int c = 0; c < clusters_; ++c) {
    const float n = global.segment(c * C, C).norm();
    if (n > 1e-12f) global.segment(c * C, C) /= n;
  }
  l2_normalize(global);
  return global;
}

// ---------------------------------------------------------------------------
// RingDensityProvider

std::vector<Descriptor> RingDensityProvider::compute_local(
    const BevImage& img, const std::vector<Keypoint>& kps,
    int64_t /*frame_id*/) const {
  std::vector<Descriptor> out;
  out.reserve(kps.size());
  for (const Keypoint& kp : kps) {
    out.push_back(gradient_patch_descriptor(img, kp, patch_radius_));
  }
  return out;
}

Descriptor RingDensityProvider::compute_global(
    const BevImage& img, const std::vector<Descriptor>& /*locals*/,
    int64_t /*frame_id*/) const {
  // Occupancy and mean intensity per radial ring about the image center;
  // invariant to yaw by construction.
  const Vec2 c = img.center();
  const double r_max = std::min(img.width, img.height) * 0.5;
  Descriptor global = Descriptor::Zero(rings_ * 2);
  std::vector<int> cells(rings_, 0);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const double r = std::hypot(u + 0.5 - c.x(), v + 0.5 - c.y());
      if (r >= r_max) continue;
      const int ring = std::min(static_cast<int>(r / r_max * rings_),
                                rings_ - 1);
      ++cells[ring];
      const float val = img.at(u, v);
      if (val > 0.0f) {
        global[ring] += 1.0f;       // occupied fraction
        global[rings_ + ring] += val;  // density mass
      }
    }
  }
  for (int r = 0; r < rings_; ++r) {
    if (cells[r] > 0) {
      global[r] /= static_cast<float>(cells[r]);
      global[rings_ + r] /= static_cast<float>(cells[r]);
    }
  }
  l2_normalize(global);
  return global;
}

// ---------------------------------------------------------------------------
// ExternalFileProvider

namespace {

template <typename T>
T read_pod(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

ExternalFileProvider::ExternalFileProvider(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error("cannot open descriptor file " + path);
  }
  while (true) {
    const int64_t id = read_pod<int64_t>(is);
    if (!is) break;
    const uint32_t n = read_pod<uint32_t>(is);
    const uint32_t c = read_pod<uint32_t>(is);
    Record rec;
    rec.locals.assign(n, Descriptor::Zero(c));
    for (uint32_t i = 0; i < n; ++i) {
      is.read(reinterpret_cast<char*>(rec.locals[i].data()),
              sizeof(float) * c);
    }
    const uint32_t g = read_pod<uint32_t>(is);
    rec.global = Descriptor::Zero(g);
    is.read(reinterpret_cast<char*>(rec.global.data()), sizeof(float) * g);
    if (!is) {
      throw std::runtime_error("truncated descriptor record in " + path);
    }
    local_dim_ = static_cast<int>(c);
    global_dim_ = static_cast<int>(g);
    records_[id] = std::move(rec);
  }
}

std::vector<Descriptor> ExternalFileProvider::compute_local(
    const BevImage& /*img*/, const std::vector<Keypoint>& kps,
    int64_t frame_id) const {
  const auto it = records_.find(frame_id);
  if (it == records_.end()) {
    throw std::runtime_error("no external descriptors for frame " +
                             std::to_string(frame_id));
  }
  if (it->second.locals.size() != kps.size()) {
    throw std::runtime_error("external descriptor count mismatch for frame " +
                             std::to_string(frame_id));
  }
  return it->second.locals;
}

Descriptor ExternalFileProvider::compute_global(
    const BevImage& /*img*/, const std::vector<Descriptor>& /*locals*/,
    int64_t frame_id) const {
  const auto it = records_.find(frame_id);
  if (it == records_.end()) {
    throw std::runtime_error("no external descriptors for frame " +
                             std::to_string(frame_id));
  }
  return it->second.global;
}

void write_external_descriptors(
    const std::string& path,
    const std::vector<std::tuple<int64_t, std::vector<Descriptor>,
                                 Descriptor>>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw std::runtime_error("cannot open " + path);
  }
  const auto write_pod = [&os](auto value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(value));
  };
  for (const auto& [id, locals, global] : records) {
    write_pod(id);
    write_pod(static_cast<uint32_t>(locals.size()));
    const uint32_t c =
        locals.empty() ? 0u : static_cast<uint32_t>(locals.front().size());
    write_pod(c);
    for (const Descriptor& d : locals) {
      os.write(reinterpret_cast<const char*>(d.data()), sizeof(float) * c);
    }
    write_pod(static_cast<uint32_t>(global.size()));
    os.write(reinterpret_cast<const char*>(global.data()),
             sizeof(float) * global.size());
  }
}

// ---------------------------------------------------------------------------
// Matching and RANSAC

MatchSet match(const std::vector<Descriptor>& a,
               const std::vector<Descriptor>& b, double ratio) {
  MatchSet out;
  if (a.empty() || b.empty()) return out;

  const auto two_nearest = [](const Descriptor& q,
                              const std::vector<Descriptor>& set) {
    int best = -1;
    float d1 = std::numeric_limits<float>::infinity();
    float d2 = std::numeric_limits<float>::infinity();
    for (size_t i = 0; i < set.size(); ++i) {
      const float d = (set[i] - q).squaredNorm();
      if (d < d1 || (d == d1 && best < 0)) {
        d2 = d1;
        d1 = d;
        best = static_cast<int>(i);
      } else if (d < d2) {
        d2 = d;
      }
    }
    return std::tuple{best, d1, d2};
  };

  // Nearest neighbor of every b in a, for the mutuality check.
  std::vector<int> b_to_a(b.size(), -1);
  for (size_t j = 0; j < b.size(); ++j) {
    const auto [best, d1, d2] = two_nearest(b[j], a);
    b_to_a[j] = best;
  }

  const double ratio2 = ratio * ratio;  // squared distances
  for (size_t i = 0; i < a.size(); ++i) {
    const auto [best, d1, d2] = two_nearest(a[i], b);
    if (best < 0) continue;
    if (b.size() > 1 && !(d1 < ratio2 * d2)) continue;
    if (b_to_a[best] != static_cast<int>(i)) continue;
    out.push_back({static_cast<int>(i), best, std::sqrt(d1)});
  }
  return out;
}

namespace {

Pose2 procrustes_rigid2(std::span<const Vec2> a, std::span<const Vec2> b,
                        std::span<const int> idx) {
  Vec2 ca = Vec2::Zero(), cb = Vec2::Zero();
  for (int i : idx) {
    ca += a[i];
    cb += b[i];
  }
  ca /= static_cast<double>(idx.size());
  cb /= static_cast<double>(idx.size());
  double sxx = 0.0, sxy = 0.0;
  for (int i : idx) {
    const Vec2 pa = a[i] - ca, pb = b[i] - cb;
    sxx += pa.x() * pb.x() + pa.y() * pb.y();
    sxy += pa.x() * pb.y() - pa.y() * pb.x();
  }
  const double theta = std::atan2(sxy, sxx);
  Pose2 est(theta, Vec2::Zero());
  est.t = cb - est.rotation() * ca;
  return est;
}

}  // namespace

Rigid2Estimate ransac_rigid2(const MatchSet& matches,
                             std::span<const Vec2> pts_a,
                             std::span<const Vec2> pts_b,
                             const FeatureConfig& cfg, std::mt19937_64& rng) {
  Rigid2Estimate out;
  out.inlier_mask.assign(matches.size(), 0);
  if (matches.size() < 2) return out;

  // Canonical ordering makes the sampled hypotheses independent of the
  // caller's match ordering for a fixed seed.
  std::vector<int> order(matches.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
    const Match& ml = matches[lhs];
    const Match& mr = matches[rhs];
    if (ml.a != mr.a) return ml.a < mr.a;
    return ml.b < mr.b;
  });

  const double thresh2 = cfg.ransac_inlier_px * cfg.ransac_inlier_px;
  std::uniform_int_distribution<size_t> pick(0, matches.size() - 1);

  int best_count = 0;
  double best_err = std::numeric_limits<double>::infinity();
  Pose2 best_model;
  bool have_model = false;

  const auto consensus = [&](const Pose2& model, std::vector<int>* inliers,
                             double* err_sum) {
    int count = 0;
    double err = 0.0;
    for (size_t m = 0; m < matches.size(); ++m) {
      const Vec2 pa = pts_a[matches[m].a];
      const Vec2 pb = pts_b[matches[m].b];
      const double e2 = (model.act(pa) - pb).squaredNorm();
      if (e2 <= thresh2) {
        ++count;
        err += e2;
        if (inliers) inliers->push_back(static_cast<int>(m));
      }
    }
    if (err_sum) *err_sum = err;
    return count;
  };

  for (int iter = 0; iter < cfg.ransac_max_iter; ++iter) {
    const int i = order[pick(rng)];
    const int j = order[pick(rng)];
    if (i == j) continue;
    const Vec2 a1 = pts_a[matches[i].a], a2 = pts_a[matches[j].a];
    const Vec2 b1 = pts_b[matches[i].b], b2 = pts_b[matches[j].b];
    const Vec2 va = a2 - a1, vb = b2 - b1;
    const double na = va.norm();
    if (na < 1e-9 || vb.norm() < 1e-9) continue;
    const double theta =
        std::atan2(va.x() * vb.y() - va.y() * vb.x(), va.dot(vb));
    Pose2 model(theta, Vec2::Zero());
    model.t = 0.5 * ((b1 - model.rotation() * a1) +
                     (b2 - model.rotation() * a2));

    double err = 0.0;
    const int count = consensus(model, nullptr, &err);
    if (count > best_count ||
        (count == best_count && count > 0 && err < best_err)) {
      best_count = count;
      best_err = err;
      best_model = model;
      have_model = true;
    }
  }

  if (!have_model || best_count < 2) return out;

  // Refit on the consensus set, then refresh the inliers once more.
  std::vector<int> inlier_matches;
  consensus(best_model, &inlier_matches, nullptr);
  for (int pass = 0; pass < 2 && inlier_matches.size() >= 2; ++pass) {
    std::vector<int> idx_a, idx_b;
    std::vector<Vec2> pa, pb;
    pa.reserve(inlier_matches.size());
    pb.reserve(inlier_matches.size());
    std::vector<int> local(inlier_matches.size());
    std::iota(local.begin(), local.end(), 0);
    for (int m : inlier_matches) {
      pa.push_back(pts_a[matches[m].a]);
      pb.push_back(pts_b[matches[m].b]);
    }
    best_model = procrustes_rigid2(pa, pb, local);
    inlier_matches.clear();
    consensus(best_model, &inlier_matches, nullptr);
  }

  out.transform = best_model;
  out.inlier_count = static_cast<int>(inlier_matches.size());
  for (int m : inlier_matches) out.inlier_mask[m] = 1;
  out.ok = out.inlier_count >= cfg.ransac_min_inliers;
  return out;
}

}  // namespace bevodom
