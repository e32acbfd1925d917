#pragma once

#include "spooflab/attack.hpp"
#include "spooflab/calibration.hpp"
#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/eval.hpp"
#include "spooflab/external_detector.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/lidar_model.hpp"
#include "spooflab/point_cloud.hpp"
#include "spooflab/scene.hpp"
#include "spooflab/surrogate.hpp"
#include "spooflab/synthetic.hpp"
#include "spooflab/wire_protocol.hpp"
