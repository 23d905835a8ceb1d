#pragma once

// Camera poses and pinhole geometry shared by the renderer, the dataset
// loader and the toy-scene tracer. Conventions follow the NeRF-synthetic
// datasets: right-handed world with z up, camera looking down its local -z,
// camera_angle_x is the full horizontal field of view in radians.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace nerfmark {

struct Vec3 {
  float x = 0.0f, y = 0.0f, z = 0.0f;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(float s) const { return {x * s, y * s, z * s}; }
  float dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  float norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const float n = norm();
    if (n == 0.0f) throw std::invalid_argument("Vec3: cannot normalize zero vector");
    return *this * (1.0f / n);
  }
};

// Row-major 4x4 homogeneous transform.
struct Mat4 {
  std::array<float, 16> m{};

  static Mat4 identity() {
    Mat4 out;
    out.m = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    return out;
  }

  float& at(int r, int c) { return m[static_cast<std::size_t>(r) * 4 + c]; }
  float at(int r, int c) const { return m[static_cast<std::size_t>(r) * 4 + c]; }

  Vec3 mul_point(const Vec3& p) const {
    return {at(0, 0) * p.x + at(0, 1) * p.y + at(0, 2) * p.z + at(0, 3),
            at(1, 0) * p.x + at(1, 1) * p.y + at(1, 2) * p.z + at(1, 3),
            at(2, 0) * p.x + at(2, 1) * p.y + at(2, 2) * p.z + at(2, 3)};
  }

  Vec3 mul_dir(const Vec3& d) const {
    return {at(0, 0) * d.x + at(0, 1) * d.y + at(0, 2) * d.z,
            at(1, 0) * d.x + at(1, 1) * d.y + at(1, 2) * d.z,
            at(2, 0) * d.x + at(2, 1) * d.y + at(2, 2) * d.z};
  }

  Vec3 translation() const { return {at(0, 3), at(1, 3), at(2, 3)}; }
};

struct CameraPose {
  Mat4 cam_to_world = Mat4::identity();
  float camera_angle_x = 0.6911112f;  // NeRF-synthetic default fov

  // Rotation orthonormal within `tol`, bottom row (0,0,0,1).
  void validate(float tol = 1e-4f) const {
    for (int c = 0; c < 4; ++c) {
      const float want = c == 3 ? 1.0f : 0.0f;
      if (std::fabs(cam_to_world.at(3, c) - want) > 1e-5f)
        throw std::invalid_argument("CameraPose: bottom row must be (0,0,0,1)");
    }
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        float dot = 0.0f;
        for (int k = 0; k < 3; ++k) dot += cam_to_world.at(k, i) * cam_to_world.at(k, j);
        const float want = i == j ? 1.0f : 0.0f;
        if (std::fabs(dot - want) > tol)
          throw std::invalid_argument("CameraPose: rotation is not orthonormal (column " +
                                      std::to_string(i) + "." + std::to_string(j) + ")");
      }
    }
  }
};

// Camera at `eye` looking at `target`; local axes (x right, y up, -z forward).
inline CameraPose look_at_pose(const Vec3& eye, const Vec3& target, const Vec3& up,
                               float camera_angle_x) {
  const Vec3 back = (eye - target).normalized();  // +z of the camera
  const Vec3 right = up.cross(back).normalized();
  const Vec3 cam_up = back.cross(right);
  CameraPose pose;
  pose.camera_angle_x = camera_angle_x;
  Mat4& m = pose.cam_to_world;
  m.at(0, 0) = right.x, m.at(0, 1) = cam_up.x, m.at(0, 2) = back.x, m.at(0, 3) = eye.x;
  m.at(1, 0) = right.y, m.at(1, 1) = cam_up.y, m.at(1, 2) = back.y, m.at(1, 3) = eye.y;
  m.at(2, 0) = right.z, m.at(2, 1) = cam_up.z, m.at(2, 2) = back.z, m.at(2, 3) = eye.z;
  m.at(3, 0) = 0, m.at(3, 1) = 0, m.at(3, 2) = 0, m.at(3, 3) = 1;
  return pose;
}

// Pose on the viewing circle: theta is azimuth and phi elevation, both in
// degrees; the camera orbits the origin at `radius`.
inline CameraPose circle_pose(float theta_deg, float phi_deg, float radius,
                              float camera_angle_x = 0.6911112f) {
  const float deg = 3.14159265358979323846f / 180.0f;
  const float az = theta_deg * deg, el = phi_deg * deg;
  const Vec3 eye{radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
                 radius * std::sin(el)};
  return look_at_pose(eye, Vec3{0, 0, 0}, Vec3{0, 0, 1}, camera_angle_x);
}

// Ray through the center of pixel (px, py) of a width x height image.
inline void pinhole_ray(const CameraPose& pose, float px, float py, int width, int height,
                        Vec3& origin, Vec3& dir) {
  const float focal = 0.5f * static_cast<float>(width) / std::tan(0.5f * pose.camera_angle_x);
  const Vec3 d_cam{(px + 0.5f - 0.5f * static_cast<float>(width)) / focal,
                   -(py + 0.5f - 0.5f * static_cast<float>(height)) / focal, -1.0f};
  origin = pose.cam_to_world.translation();
  dir = pose.cam_to_world.mul_dir(d_cam).normalized();
}

}  // namespace nerfmark
