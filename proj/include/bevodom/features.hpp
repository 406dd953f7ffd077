// BEV image features: FAST keypoints, pluggable local/global descriptor
// providers, mutual-NN matching, and rigid 2-D RANSAC.
#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "bevodom/bev.hpp"

namespace bevodom {

struct Keypoint {
  double u = 0.0;
  double v = 0.0;
  float score = 0.0f;
};

using Descriptor = Eigen::VectorXf;

struct FeatureConfig {
  double fast_threshold = 0.06;  // segment-test contrast, intensity units
  int fast_arc = 9;              // contiguous circle pixels required
  int nms_radius = 3;            // non-maximum suppression radius [px]
  int max_keypoints = 500;
  int patch_radius = 8;          // descriptor patch half-size [px]
  double match_ratio = 0.8;      // Lowe ratio
  int ransac_max_iter = 1000;
  double ransac_inlier_px = 2.0;
  int ransac_min_inliers = 8;
};

// FAST segment-test corners on the intensity grid with non-maximum
// suppression, strongest max_keypoints returned in score order. The border
// margin keeps descriptor patches (rotated) inside the image.
std::vector<Keypoint> detect_keypoints(const BevImage& img,
                                       const FeatureConfig& cfg);

// Descriptor source for one BEV frame. Implementations must produce
// L2-normalized finite vectors of the declared dimensions and be
// deterministic for fixed inputs.
class DescriptorProvider {
 public:
  virtual ~DescriptorProvider() = default;
  virtual int local_dim() const = 0;
  virtual int global_dim() const = 0;
  virtual bool thread_safe() const { return true; }
  // Whether compute_global can be called yet (codebook-based providers
  // need fitting first).
  virtual bool global_ready() const { return true; }
  virtual std::vector<Descriptor> compute_local(
      const BevImage& img, const std::vector<Keypoint>& kps,
      int64_t frame_id) const = 0;
  virtual Descriptor compute_global(const BevImage& img,
                                    const std::vector<Descriptor>& locals,
                                    int64_t frame_id) const = 0;
};

// Orientation-normalized gradient-histogram patch descriptor (4x4 cells x
// 8 orientation bins over a (2r)x(2r) patch) with a VLAD global aggregate
// over a seeded k-means codebook fitted once per run.
class GradientVladProvider : public DescriptorProvider {
 public:
  explicit GradientVladProvider(int clusters = 16, int patch_radius = 8)
      : clusters_(clusters), patch_radius_(patch_radius) {}

  int local_dim() const override { return 128; }
  int global_dim() const override { return clusters_ * 128; }
  bool global_ready() const override { return !codebook_.empty(); }

  // Seeded k-means over the training descriptors; empty input falls back
  // to a deterministic random codebook.
  void fit(const std::vector<Descriptor>& training, uint64_t seed);

  std::vector<Descriptor> compute_local(const BevImage& img,
                                        const std::vector<Keypoint>& kps,
                                        int64_t frame_id) const override;
  Descriptor compute_global(const BevImage& img,
                            const std::vector<Descriptor>& locals,
                            int64_t frame_id) const override;

 private:
  int clusters_;
  int patch_radius_;
  std::vector<Descriptor> codebook_;
};

// Zero-training alternative: same local descriptor, global descriptor is a
// rotation-invariant radial ring-density histogram of the image.
class RingDensityProvider : public DescriptorProvider {
 public:
  explicit RingDensityProvider(int rings = 48, int patch_radius = 8)
      : rings_(rings), patch_radius_(patch_radius) {}

  int local_dim() const override { return 128; }
  int global_dim() const override { return rings_ * 2; }

  std::vector<Descriptor> compute_local(const BevImage& img,
                                        const std::vector<Keypoint>& kps,
                                        int64_t frame_id) const override;
  Descriptor compute_global(const BevImage& img,
                            const std::vector<Descriptor>& locals,
                            int64_t frame_id) const override;

 private:
  int rings_;
  int patch_radius_;
};

// Descriptors precomputed elsewhere, read from a binary record file keyed
// by frame id (record layout documented in io implementation).
class ExternalFileProvider : public DescriptorProvider {
 public:
  explicit ExternalFileProvider(const std::string& path);

  int local_dim() const override { return local_dim_; }
  int global_dim() const override { return global_dim_; }
  std::vector<Descriptor> compute_local(const BevImage& img,
                                        const std::vector<Keypoint>& kps,
                                        int64_t frame_id) const override;
  Descriptor compute_global(const BevImage& img,
                            const std::vector<Descriptor>& locals,
                            int64_t frame_id) const override;

 private:
  struct Record {
    std::vector<Descriptor> locals;
    Descriptor global;
  };
  int local_dim_ = 0;
  int global_dim_ = 0;
  std::unordered_map<int64_t, Record> records_;
};

// Writes records readable by ExternalFileProvider. Layout per record,
// little-endian: int64 frame id, uint32 n, uint32 C, n*C float32 local
// descriptors (row major), uint32 G, G float32 global descriptor.
void write_external_descriptors(
    const std::string& path,
    const std::vector<std::tuple<int64_t, std::vector<Descriptor>, Descriptor>>&
        records);

struct Match {
  int a = -1;
  int b = -1;
  float distance = 0.0f;
};
using MatchSet = std::vector<Match>;

// Mutual nearest neighbors passing the Lowe ratio test; one-to-one by
// construction, ties broken toward the lower index.
MatchSet match(const std::vector<Descriptor>& a,
               const std::vector<Descriptor>& b, double ratio);

struct Rigid2Estimate {
  Pose2 transform;                    // maps a-points onto b-points [px]
  std::vector<uint8_t> inlier_mask;   // per match
  int inlier_count = 0;
  bool ok = false;
};

// 2-point minimal rigid model, consensus under inlier_px, closed-form
// Procrustes refit on the final inlier set. Sampling order is made
// invariant to the ordering of the input matches.
Rigid2Estimate ransac_rigid2(const MatchSet& matches,
                             std::span<const Vec2> pts_a,
                             std::span<const Vec2> pts_b,
                             const FeatureConfig& cfg, std::mt19937_64& rng);

}  // namespace bevodom
