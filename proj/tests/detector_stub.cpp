// Line-protocol detector used by the tests. Reads requests on stdin and
// answers on stdout according to the mode given as argv[1]:
//   fixed          one fixed proposal per request
//   missing-score  a proposal without "score"
//   bad-version    a response with "v": 2
//   hang           never answers
//   garbage        a line that is not JSON
//   surrogate      runs the built-in surrogate detector
//   exit           exits without answering

#include <iostream>
#include <string>
#include <thread>

#include "spooflab/surrogate.hpp"
#include "spooflab/wire_protocol.hpp"
#include "stub_fixture.hpp"

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "fixed";
  std::ios::sync_with_stdio(false);
  std::string line;
  spooflab::SurrogateDetector surrogate{spooflab::SurrogateParams{}};
  while (std::getline(std::cin, line)) {
    if (mode == "exit") return 0;
    if (mode == "hang") {
      std::this_thread::sleep_for(std::chrono::hours(1));
      continue;
    }
    if (mode == "garbage") {
      std::cout << "this is not json" << std::endl;
      continue;
    }
    if (mode == "bad-version") {
      std::cout << R"({"v":2,"proposals":[]})" << std::endl;
      continue;
    }
    if (mode == "missing-score") {
      std::cout << R"({"v":1,"proposals":[{"x":1,"y":2,"z":0,"dx":4,"dy":2,"dz":1.5,"yaw":0}]})" << std::endl;
      continue;
    }
    const spooflab::wire::Request req = spooflab::wire::decode_request(line);
    if (mode == "surrogate") {
      std::cout << spooflab::wire::encode_response(surrogate.detect_cloud(req.points)) << std::endl;
    } else {
      std::cout << spooflab::wire::encode_response({spooflab::fixture::stub_proposal()}) << std::endl;
    }
  }
  return 0;
}
