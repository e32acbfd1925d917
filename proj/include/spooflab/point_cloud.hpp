#pragma once

#include <vector>

#include "spooflab/geometry.hpp"

namespace spooflab {

// One LiDAR return in the sensor frame. Stored in double precision in
// memory; files carry float32.
struct LidarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;

  CartesianPoint position() const { return {x, y, z}; }
  friend constexpr bool operator==(const LidarPoint&, const LidarPoint&) = default;
};

using PointCloud = std::vector<LidarPoint>;

}  // namespace spooflab
