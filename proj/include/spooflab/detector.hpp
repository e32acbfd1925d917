#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spooflab/geometry.hpp"
#include "spooflab/point_cloud.hpp"

namespace spooflab {

struct Proposal {
  Box3D box;
  double score = 0.0;  // class confidence in [0, 1]

  friend bool operator==(const Proposal&, const Proposal&) = default;
};

struct DetectorInput {
  std::span<const LidarPoint> cloud;
  std::optional<std::string> image;  // forwarded untouched to external detectors
  std::string frame_id;
};

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Proposal> detect(const DetectorInput& input) = 0;
  virtual std::string name() const = 0;
};

// Creates an independent detector instance (one per worker thread).
using DetectorFactory = std::function<std::unique_ptr<Detector>()>;

}  // namespace spooflab
