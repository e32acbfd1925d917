#pragma once

// KITTI object-benchmark ingestion: velodyne .bin clouds, calib .txt,
// label_2 .txt, and conversion of camera-frame labels to LiDAR-frame boxes.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "spooflab/errors.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/point_cloud.hpp"

namespace spooflab::kitti {

namespace fs = std::filesystem;

using Matrix34 = Eigen::Matrix<double, 3, 4, Eigen::RowMajor>;

// ---- number formatting / parsing (locale independent) ------------------------

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view tok) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// ---- point clouds ----------------------------------------------------------

namespace detail {

inline float load_le_float(const unsigned char* p) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

inline void store_le_float(float v, unsigned char* p) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  std::memcpy(p, &bits, 4);
}

}  // namespace detail

inline PointCloud parse_point_cloud(std::string_view bytes, const std::string& origin = "<memory>") {
  if (bytes.size() % 16 != 0) {
    throw MalformedFileError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of 16 bytes");
  }
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  PointCloud cloud(bytes.size() / 16);
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    float v[4];
    for (int k = 0; k < 4; ++k) v[k] = detail::load_le_float(data + 16 * i + 4 * k);
    for (float f : v) {
      if (!std::isfinite(f)) throw MalformedFileError(origin + ": non-finite value at point " + std::to_string(i));
    }
    double intensity = v[3];
    if (intensity < 0.0 || intensity > 1.0) {
      intensity = std::clamp(intensity, 0.0, 1.0);
      ++clamped;
    }
    cloud[i] = {v[0], v[1], v[2], intensity};
  }
  if (clamped > 0) {
    std::clog << "warning: " << origin << ": clamped " << clamped << " intensities into [0, 1]\n";
  }
  return cloud;
}

inline PointCloud read_point_cloud(const fs::path& path) { return parse_point_cloud(read_text(path), path.string()); }

inline std::string serialize_point_cloud(std::span<const LidarPoint> cloud) {
  std::string bytes(cloud.size() * 16, '\0');
  auto* out = reinterpret_cast<unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const LidarPoint& p = cloud[i];
    const float v[4] = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z),
                        static_cast<float>(p.intensity)};
    for (int k = 0; k < 4; ++k) detail::store_le_float(v[k], out + 16 * i + 4 * k);
  }
  return bytes;
}

inline void write_point_cloud(std::span<const LidarPoint> cloud, const fs::path& path) {
  write_text(path, serialize_point_cloud(cloud));
}

// ---- calibration -------------------------------------------------------------

struct CalibrationSet {
  Matrix34 p2 = Matrix34::Zero();
  Eigen::Matrix3d r0_rect = Eigen::Matrix3d::Identity();
  Matrix34 tr_velo_to_cam = Matrix34::Zero();

  // Homogeneous LiDAR -> rectified-camera transform, R0_rect * Tr_velo_to_cam.
  Eigen::Matrix4d velo_to_rect() const {
    Eigen::Matrix4d r0 = Eigen::Matrix4d::Identity();
    r0.topLeftCorner<3, 3>() = r0_rect;
    Eigen::Matrix4d tr = Eigen::Matrix4d::Identity();
    tr.topRows<3>() = tr_velo_to_cam;
    return r0 * tr;
  }
};

namespace detail {

inline bool orthonormal(const Eigen::Matrix3d& m, double tol) {
  return (m * m.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol;
}

template <typename Matrix>
Matrix fill_row_major(const std::vector<double>& values, const std::string& key) {
  Matrix m;
  if (values.size() != static_cast<std::size_t>(m.size())) {
    throw MalformedFileError("calibration key " + key + " has " + std::to_string(values.size()) +
                             " values, expected " + std::to_string(m.size()));
  }
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = values[static_cast<std::size_t>(r * m.cols() + c)];
  }
  return m;
}

}  // namespace detail

inline constexpr double kOrthonormalTolerance = 1e-3;

inline CalibrationSet parse_calibration(std::string_view text, const std::string& origin = "<memory>") {
  std::map<std::string, std::vector<double>, std::less<>> entries;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    const std::size_t colon = line.find(':');
    if (colon == std::string_view::npos) continue;
    const auto key_tokens = split_ws(line.substr(0, colon));
    if (key_tokens.size() != 1) continue;
    std::vector<double> values;
    for (std::string_view tok : split_ws(line.substr(colon + 1))) {
      const auto v = parse_double(tok);
      if (!v) throw MalformedFileError(origin + ": bad number '" + std::string(tok) + "'");
      values.push_back(*v);
    }
    entries[std::string(key_tokens[0])] = std::move(values);
  }

  auto require = [&](const std::string& key) -> const std::vector<double>& {
    const auto it = entries.find(key);
    if (it == entries.end()) throw MissingCalibrationKeyError(key);
    return it->second;
  };

  CalibrationSet calib;
  calib.p2 = detail::fill_row_major<Matrix34>(require("P2"), "P2");
  calib.r0_rect = detail::fill_row_major<Eigen::Matrix3d>(require("R0_rect"), "R0_rect");
  calib.tr_velo_to_cam = detail::fill_row_major<Matrix34>(require("Tr_velo_to_cam"), "Tr_velo_to_cam");
  if (!detail::orthonormal(calib.r0_rect, kOrthonormalTolerance)) {
    throw MalformedFileError(origin + ": R0_rect is not orthonormal");
  }
  if (!detail::orthonormal(calib.tr_velo_to_cam.leftCols<3>(), kOrthonormalTolerance)) {
    throw MalformedFileError(origin + ": Tr_velo_to_cam rotation block is not orthonormal");
  }
  return calib;
}

inline CalibrationSet read_calibration(const fs::path& path) {
  return parse_calibration(read_text(path), path.string());
}

inline std::string format_calibration(const CalibrationSet& calib) {
  std::string out;
  auto emit = [&](const std::string& key, const auto& m) {
    out += key + ":";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) out += " " + format_double(m(r, c));
    }
    out += "\n";
  };
  for (const char* key : {"P0", "P1", "P2", "P3"}) emit(key, calib.p2);
  emit("R0_rect", calib.r0_rect);
  emit("Tr_velo_to_cam", calib.tr_velo_to_cam);
  Matrix34 imu = Matrix34::Zero();
  imu.leftCols<3>() = Eigen::Matrix3d::Identity();
  emit("Tr_imu_to_velo", imu);
  return out;
}

inline void write_calibration(const CalibrationSet& calib, const fs::path& path) {
  write_text(path, format_calibration(calib));
}

// ---- labels ------------------------------------------------------------------

struct LabelRecord {
  std::string type;
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  std::array<double, 4> bbox{};  // left, top, right, bottom (pixels)
  double height = 0.0;           // h
  double width = 0.0;            // w
  double length = 0.0;           // l
  std::array<double, 3> location{};  // bottom-center, rectified camera frame
  double rotation_y = 0.0;
};

inline std::vector<LabelRecord> parse_labels(std::string_view text, const std::string& origin = "<memory>") {
  std::vector<LabelRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const auto tokens = split_ws(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (tokens.empty()) continue;
    if (tokens.size() != 15 && tokens.size() != 16) {
      throw MalformedFileError(origin + ":" + std::to_string(line_no) + ": expected 15 or 16 fields, got " +
                               std::to_string(tokens.size()));
    }
    double v[15];
    for (std::size_t k = 1; k < 15; ++k) {
      const auto parsed = parse_double(tokens[k]);
      if (!parsed) {
        throw MalformedFileError(origin + ":" + std::to_string(line_no) + ": bad number '" +
                                 std::string(tokens[k]) + "'");
      }
      v[k] = *parsed;
    }
    LabelRecord rec;
    rec.type = std::string(tokens[0]);
    rec.truncated = v[1];
    rec.occluded = static_cast<int>(v[2]);
    rec.alpha = v[3];
    rec.bbox = {v[4], v[5], v[6], v[7]};
    rec.height = v[8];
    rec.width = v[9];
    rec.length = v[10];
    rec.location = {v[11], v[12], v[13]};
    rec.rotation_y = v[14];
    if (rec.type == "Car" && !(rec.height > 0.0 && rec.width > 0.0 && rec.length > 0.0)) {
      throw MalformedFileError(origin + ":" + std::to_string(line_no) + ": non-positive car dimensions");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<LabelRecord> read_labels(const fs::path& path) { return parse_labels(read_text(path), path.string()); }

inline std::string format_labels(std::span<const LabelRecord> labels) {
  std::string out;
  for (const LabelRecord& l : labels) {
    out += l.type;
    const double fields[] = {l.truncated, static_cast<double>(l.occluded), l.alpha, l.bbox[0], l.bbox[1],
                             l.bbox[2], l.bbox[3], l.height, l.width, l.length, l.location[0], l.location[1],
                             l.location[2], l.rotation_y};
    for (double f : fields) out += " " + format_double(f);
    out += "\n";
  }
  return out;
}

inline void write_labels(std::span<const LabelRecord> labels, const fs::path& path) {
  write_text(path, format_labels(labels));
}

namespace detail {

inline Eigen::FullPivLU<Eigen::Matrix4d> velo_to_rect_lu(const CalibrationSet& calib) {
  Eigen::FullPivLU<Eigen::Matrix4d> lu(calib.velo_to_rect());
  if (!lu.isInvertible()) throw NonInvertibleCalibrationError("R0_rect * Tr_velo_to_cam is singular");
  return lu;
}

}  // namespace detail

// Camera-frame label -> LiDAR-frame box. The label's location is the bottom
// face center; camera y points down, so the box center sits h/2 above it.
inline Box3D label_to_lidar_box(const LabelRecord& label, const CalibrationSet& calib) {
  const auto lu = detail::velo_to_rect_lu(calib);
  const Eigen::Vector4d cam(label.location[0], label.location[1] - 0.5 * label.height, label.location[2], 1.0);
  const Eigen::Vector4d velo = lu.solve(cam);
  return make_box(velo.x() / velo.w(), velo.y() / velo.w(), velo.z() / velo.w(), label.length, label.width,
                  label.height, -label.rotation_y - 0.5 * kPi);
}

// Inverse of label_to_lidar_box; 2D bbox is the clipped projection through P2.
inline LabelRecord lidar_box_to_label(const Box3D& box, const CalibrationSet& calib, std::string type = "Car",
                                      double image_width = 1242.0, double image_height = 375.0) {
  const Eigen::Matrix4d t = calib.velo_to_rect();
  const Eigen::Vector4d c = t * Eigen::Vector4d(box.x, box.y, box.z, 1.0);
  LabelRecord l;
  l.type = std::move(type);
  l.height = box.dz;
  l.width = box.dy;
  l.length = box.dx;
  l.location = {c.x(), c.y() + 0.5 * box.dz, c.z()};
  l.rotation_y = normalize_angle(-box.yaw - 0.5 * kPi);
  l.alpha = normalize_angle(l.rotation_y - std::atan2(c.x(), c.z()));

  double left = image_width, top = image_height, right = 0.0, bottom = 0.0;
  bool visible = false;
  const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
  for (int i = 0; i < 8; ++i) {
    const double u = ((i & 1) ? 0.5 : -0.5) * box.dx;
    const double v = ((i & 2) ? 0.5 : -0.5) * box.dy;
    const double w = ((i & 4) ? 0.5 : -0.5) * box.dz;
    const Eigen::Vector4d corner(box.x + cy * u - sy * v, box.y + sy * u + cy * v, box.z + w, 1.0);
    const Eigen::Vector4d rect = t * corner;
    if (rect.z() <= 0.1) continue;
    const Eigen::Vector3d px = calib.p2 * rect;
    const double x = px.x() / px.z();
    const double y = px.y() / px.z();
    left = std::min(left, x);
    right = std::max(right, x);
    top = std::min(top, y);
    bottom = std::max(bottom, y);
    visible = true;
  }
  if (visible) {
    l.bbox = {std::clamp(left, 0.0, image_width - 1.0), std::clamp(top, 0.0, image_height - 1.0),
              std::clamp(right, 0.0, image_width - 1.0), std::clamp(bottom, 0.0, image_height - 1.0)};
  }
  return l;
}

// ---- frames ------------------------------------------------------------------

struct Frame {
  std::string id;
  PointCloud cloud;
  CalibrationSet calib;
  std::vector<LabelRecord> labels;
  std::optional<std::string> image;  // opaque path, never decoded

  std::vector<Box3D> boxes() const {
    std::vector<Box3D> out;
    out.reserve(labels.size());
    for (const LabelRecord& l : labels) out.push_back(label_to_lidar_box(l, calib));
    return out;
  }
};

inline std::string format_frame_id(std::string_view id) {
  if (id.empty() || id.size() >= 6) return std::string(id);
  for (char c : id) {
    if (c < '0' || c > '9') return std::string(id);
  }
  return std::string(6 - id.size(), '0') + std::string(id);
}

inline std::string format_frame_id(std::uint64_t id) { return format_frame_id(std::to_string(id)); }

struct FramePaths {
  fs::path velodyne;
  fs::path calib;
  fs::path label;
  fs::path image;
};

inline FramePaths frame_paths(const fs::path& root, const std::string& id) {
  return {root / "velodyne" / (id + ".bin"), root / "calib" / (id + ".txt"), root / "label_2" / (id + ".txt"),
          root / "image_2" / (id + ".png")};
}

// Loads one frame. The image is optional and only carried by path.
inline Frame load_frame(const fs::path& root, std::string_view frame_id,
                        const std::set<std::string, std::less<>>& classes = {"Car"}) {
  Frame f;
  f.id = format_frame_id(frame_id);
  const FramePaths paths = frame_paths(root, f.id);
  std::vector<std::string> missing;
  if (!fs::exists(paths.velodyne)) missing.push_back("velodyne (" + paths.velodyne.string() + ")");
  if (!fs::exists(paths.calib)) missing.push_back("calib (" + paths.calib.string() + ")");
  if (!fs::exists(paths.label)) missing.push_back("label_2 (" + paths.label.string() + ")");
  if (!missing.empty()) {
    std::string msg = "frame " + f.id + " incomplete; missing:";
    for (const auto& m : missing) msg += " " + m;
    throw FrameIncompleteError(msg);
  }
  f.cloud = read_point_cloud(paths.velodyne);
  f.calib = read_calibration(paths.calib);
  for (LabelRecord& l : read_labels(paths.label)) {
    if (classes.empty() || classes.contains(l.type)) f.labels.push_back(std::move(l));
  }
  if (fs::exists(paths.image)) f.image = paths.image.string();
  return f;
}

// Frame ids present under velodyne/, sorted.
inline std::vector<std::string> list_frames(const fs::path& root) {
  std::vector<std::string> ids;
  const fs::path dir = root / "velodyne";
  if (!fs::is_directory(dir)) throw IoError("not a KITTI dataset root (no velodyne/): " + root.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".bin") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace spooflab::kitti
