#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spooflab/detector.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/point_cloud.hpp"
#include "spooflab/synthetic.hpp"

namespace spooflab {

// A cloud with its ground-truth cars in the LiDAR frame.
struct LabeledScene {
  std::string id;
  PointCloud cloud;
  std::vector<Box3D> cars;
  std::optional<std::string> image;

  DetectorInput input() const { return DetectorInput{cloud, image, id}; }
};

inline LabeledScene to_labeled(const kitti::Frame& f) { return {f.id, f.cloud, f.boxes(), f.image}; }

inline LabeledScene to_labeled(const SyntheticScene& s) { return {s.id, s.cloud, s.cars, std::nullopt}; }

template <typename Range>
std::vector<LabeledScene> to_labeled_all(const Range& frames) {
  std::vector<LabeledScene> out;
  for (const auto& f : frames) out.push_back(to_labeled(f));
  return out;
}

}  // namespace spooflab
