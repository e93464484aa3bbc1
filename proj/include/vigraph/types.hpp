#pragma once

#include <cstdint>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace vigraph {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec15 = Eigen::Matrix<double, 15, 1>;
using VecX = Eigen::VectorXd;

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat15 = Eigen::Matrix<double, 15, 15>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat63 = Eigen::Matrix<double, 6, 3>;
using MatX = Eigen::MatrixXd;

using Quat = Eigen::Quaterniond;

using FrameId = std::int64_t;
using LandmarkId = std::int64_t;

inline constexpr LandmarkId kNoTag = -1;

}  // namespace vigraph
