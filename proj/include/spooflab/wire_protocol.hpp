#pragma once

// Line-delimited JSON protocol spoken with external detectors.
//
//   request:  {"v":1,"frame":"<id>","image":"<path>"|null,"points":[[x,y,z,i],...]}
//   response: {"v":1,"proposals":[{"x":..,"y":..,"z":..,"dx":..,"dy":..,"dz":..,"yaw":..,"score":..}]}
//
// One request per line, responses in request order.

#include <json.hpp>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"

namespace spooflab::wire {

inline constexpr int kProtocolVersion = 1;

using nlohmann::json;

inline std::string encode_request(const DetectorInput& input) {
  json j;
  j["v"] = kProtocolVersion;
  j["frame"] = input.frame_id;
  j["image"] = input.image ? json(*input.image) : json(nullptr);
  json pts = json::array();
  for (const LidarPoint& p : input.cloud) pts.push_back({p.x, p.y, p.z, p.intensity});
  j["points"] = std::move(pts);
  return j.dump();
}

struct Request {
  std::string frame;
  std::optional<std::string> image;
  PointCloud points;
};

// Server side of the protocol; used by stub detectors and tests.
inline Request decode_request(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw MalformedResponseError("request is not a JSON object");
  if (!j.contains("v") || !j["v"].is_number_integer()) throw MalformedResponseError("request lacks integer \"v\"");
  if (j["v"].get<int>() != kProtocolVersion) {
    throw ProtocolVersionError("request protocol version " + j["v"].dump() + " != " + std::to_string(kProtocolVersion));
  }
  Request r;
  if (j.contains("frame") && j["frame"].is_string()) r.frame = j["frame"].get<std::string>();
  if (j.contains("image") && j["image"].is_string()) r.image = j["image"].get<std::string>();
  if (!j.contains("points") || !j["points"].is_array()) throw MalformedResponseError("request lacks \"points\"");
  for (const json& p : j["points"]) {
    if (!p.is_array() || p.size() != 4) throw MalformedResponseError("point is not a 4-element array");
    r.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(), p[3].get<double>()});
  }
  return r;
}

inline json proposal_to_json(const Proposal& p) {
  return json{{"x", p.box.x},   {"y", p.box.y},     {"z", p.box.z},    {"dx", p.box.dx},
              {"dy", p.box.dy}, {"dz", p.box.dz}, {"yaw", p.box.yaw}, {"score", p.score}};
}

inline std::string encode_response(const std::vector<Proposal>& proposals) {
  json arr = json::array();
  for (const Proposal& p : proposals) arr.push_back(proposal_to_json(p));
  return json{{"v", kProtocolVersion}, {"proposals", std::move(arr)}}.dump();
}

inline std::vector<Proposal> decode_response(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw MalformedResponseError("response is not a JSON object");
  if (!j.contains("v") || !j["v"].is_number_integer()) throw MalformedResponseError("response lacks integer \"v\"");
  if (j["v"].get<int>() != kProtocolVersion) {
    throw ProtocolVersionError("response protocol version " + j["v"].dump() + " != " +
                               std::to_string(kProtocolVersion));
  }
  if (!j.contains("proposals") || !j["proposals"].is_array()) {
    throw MalformedResponseError("response lacks \"proposals\" array");
  }
  std::vector<Proposal> out;
  std::size_t idx = 0;
  for (const json& p : j["proposals"]) {
    if (!p.is_object()) throw MalformedResponseError("proposal " + std::to_string(idx) + " is not an object");
    auto field = [&](const char* key) {
      if (!p.contains(key) || !p[key].is_number()) {
        throw MalformedResponseError("proposal " + std::to_string(idx) + " lacks numeric \"" + key + "\"");
      }
      return p[key].get<double>();
    };
    Proposal prop;
    prop.box = Box3D{field("x"), field("y"), field("z"), field("dx"), field("dy"), field("dz"), field("yaw")};
    prop.score = field("score");
    if (!(prop.box.dx > 0.0 && prop.box.dy > 0.0 && prop.box.dz > 0.0)) {
      throw MalformedResponseError("proposal " + std::to_string(idx) + " has non-positive dims");
    }
    if (!(prop.score >= 0.0 && prop.score <= 1.0)) {
      throw MalformedResponseError("proposal " + std::to_string(idx) + " score outside [0, 1]");
    }
    prop.box.yaw = normalize_angle(prop.box.yaw);
    out.push_back(prop);
    ++idx;
  }
  return out;
}

}  // namespace spooflab::wire
