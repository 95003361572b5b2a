#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

namespace epipose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Integer pixel index. Pixel (x, y) covers [x, x+1) x [y, y+1); its center
/// in continuous image coordinates is (x + 0.5, y + 0.5), and the matching
/// homogeneous point is (x + 0.5, y + 0.5, 1).
struct Pixel {
  int x = 0;
  int y = 0;
  bool operator==(const Pixel&) const = default;
};

/// Pixel tagged with the view it came from.
struct ViewPixel {
  int view = 0;
  Pixel px;
  bool operator==(const ViewPixel&) const = default;
};

inline Vec2 pixel_center(Pixel p) { return {p.x + 0.5, p.y + 0.5}; }

enum class Err {
  BehindCamera,
  DegenerateBaseline,
  EpipoleInCrop,
  NearParallelRays,
  NegativeDepth,
  DegenerateTriplet,
  EmptyMask,
  NoCandidates,
  TooFewCorrespondences,
  NoValidHypotheses,
  VertexBehindCamera,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::BehindCamera: return "BehindCamera";
    case Err::DegenerateBaseline: return "DegenerateBaseline";
    case Err::EpipoleInCrop: return "EpipoleInCrop";
    case Err::NearParallelRays: return "NearParallelRays";
    case Err::NegativeDepth: return "NegativeDepth";
    case Err::DegenerateTriplet: return "DegenerateTriplet";
    case Err::EmptyMask: return "EmptyMask";
    case Err::NoCandidates: return "NoCandidates";
    case Err::TooFewCorrespondences: return "TooFewCorrespondences";
    case Err::NoValidHypotheses: return "NoValidHypotheses";
    case Err::VertexBehindCamera: return "VertexBehindCamera";
  }
  return "UnknownErr";
}

/// Value-or-error. Most numeric operations in the engine report failure
/// through this instead of throwing; failure is part of normal control flow
/// while sampling.
template <typename T>
class Result {
 public:
  Result(T value) : data_(std::move(value)) {}
  Result(Err e) : data_(e) {}

  bool ok() const { return std::holds_alternative<T>(data_); }
  explicit operator bool() const { return ok(); }

  const T& value() const { return std::get<T>(data_); }
  T& value() { return std::get<T>(data_); }
  const T& operator*() const { return value(); }
  const T* operator->() const { return &value(); }

  Err error() const { return std::get<Err>(data_); }

 private:
  std::variant<T, Err> data_;
};

}  // namespace epipose
