#pragma once

// A published-layout calibration file with its blocks copied out by hand, and
// an Eigen-free inverse for checking label-to-LiDAR conversion.

#include <array>

#include "spooflab/kitti_io.hpp"

namespace spooflab::fixture {

// A calibration file in the published layout.
inline constexpr const char* kCalibText =
    "P0: 7.070493e+02 0.000000e+00 6.040814e+02 0.000000e+00 0.000000e+00 7.070493e+02 1.805066e+02 "
    "0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
    "P1: 7.070493e+02 0.000000e+00 6.040814e+02 -3.797842e+02 0.000000e+00 7.070493e+02 1.805066e+02 "
    "0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
    "P2: 7.070493e+02 0.000000e+00 6.040814e+02 4.575831e+01 0.000000e+00 7.070493e+02 1.805066e+02 "
    "-3.454157e-01 0.000000e+00 0.000000e+00 1.000000e+00 4.981016e-03\n"
    "P3: 7.070493e+02 0.000000e+00 6.040814e+02 -3.341081e+02 0.000000e+00 7.070493e+02 1.805066e+02 "
    "2.330660e+00 0.000000e+00 0.000000e+00 1.000000e+00 3.201153e-03\n"
    "R0_rect: 9.999128e-01 1.009263e-02 -8.511932e-03 -1.012729e-02 9.999406e-01 -4.037671e-03 8.470675e-03 "
    "4.123522e-03 9.999556e-01\n"
    "Tr_velo_to_cam: 6.927964e-03 -9.999722e-01 -2.757829e-03 -2.457729e-02 -1.162982e-03 2.749836e-03 "
    "-9.999955e-01 -6.127237e-02 9.999753e-01 6.931141e-03 -1.143899e-03 -3.321029e-01\n"
    "Tr_imu_to_velo: 9.999976e-01 7.553071e-04 -2.035826e-03 -8.086759e-01 -7.854027e-04 9.998898e-01 "
    "-1.482298e-02 3.195559e-01 2.024406e-03 1.482454e-02 9.998881e-01 -7.997231e-01\n";

using M3 = std::array<std::array<double, 3>, 3>;

// Cramer's-rule inverse, independent of Eigen.
inline M3 inverse3(const M3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  M3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

inline std::array<double, 3> mul(const M3& m, const std::array<double, 3>& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

// Hand-copied from kCalibText.
inline const M3 kR0{{{9.999128e-01, 1.009263e-02, -8.511932e-03},
              {-1.012729e-02, 9.999406e-01, -4.037671e-03},
              {8.470675e-03, 4.123522e-03, 9.999556e-01}}};
inline const M3 kTrRot{{{6.927964e-03, -9.999722e-01, -2.757829e-03},
                 {-1.162982e-03, 2.749836e-03, -9.999955e-01},
                 {9.999753e-01, 6.931141e-03, -1.143899e-03}}};
inline const std::array<double, 3> kTrT{-2.457729e-02, -6.127237e-02, -3.321029e-01};

// Camera bottom-center -> LiDAR box center: v = Tr^-1 (R0^-1 c - t).
inline std::array<double, 3> oracle_center(const kitti::LabelRecord& l) {
  const std::array<double, 3> c{l.location[0], l.location[1] - 0.5 * l.height, l.location[2]};
  std::array<double, 3> r = mul(inverse3(kR0), c);
  for (int i = 0; i < 3; ++i) r[i] -= kTrT[i];
  return mul(inverse3(kTrRot), r);
}

}  // namespace spooflab::fixture
