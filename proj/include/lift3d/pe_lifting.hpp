#pragma once

#include "lift3d/nn/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <string_view>
#include <vector>

namespace lift3d::pe {

using nn::Matrix;

enum class Face { kFront, kBack, kLeft, kRight, kTop, kBottom };

std::string_view face_name(Face f);

/// Orthonormal in-plane basis of a cube face. `u` indexes grid rows, `v`
/// grid columns; u x v is the outward normal.
struct FaceBasis {
  Eigen::Vector3d normal;
  Eigen::Vector3d u;
  Eigen::Vector3d v;
};

const FaceBasis& face_basis(Face f);

/// Ordered set of distinct cube faces used as virtual projection planes.
class VirtualPlaneSet {
 public:
  explicit VirtualPlaneSet(std::vector<Face> faces);

  /// Canonical sets: 1 = {front}, 2 = {front, back}, 4 = + {left, right},
  /// 6 = + {top, bottom}.
  static VirtualPlaneSet standard(int n);

  int size() const { return static_cast<int>(faces_.size()); }
  const std::vector<Face>& faces() const { return faces_; }

 private:
  std::vector<Face> faces_;
};

/// G x G grid of D-dimensional patch positional embeddings, stored with one
/// row per grid node (row-major node order, node (r, c) at r * G + c).
struct PEGrid {
  int side = 0;
  Matrix embeddings;

  int width() const { return static_cast<int>(embeddings.cols()); }
  Eigen::Ref<const Eigen::RowVectorXd> at(int r, int c) const { return embeddings.row(r * side + c); }
};

/// Fixed 2D sine-cosine embedding (half the channels encode the row, half the
/// column). `width` must be divisible by 4.
PEGrid sincos_grid(int side, int width);

/// Continuous grid coordinate of token i on plane j, stored at [i * n + j].
struct PlanarCoords {
  int tokens = 0;
  int planes = 0;
  std::vector<Eigen::Vector2d> uv;

  const Eigen::Vector2d& at(int token, int plane) const { return uv[static_cast<std::size_t>(token * planes + plane)]; }
};

/// Orthographic projection of unit-cube coordinates onto each face, mapped
/// affinely from [-1,1]^2 to [0, G-1]^2. Coordinates outside the cube are
/// clamped.
PlanarCoords project_to_planes(const Eigen::Ref<const Matrix>& coords, const VirtualPlaneSet& planes, int side);

/// Bilinear interpolation of the grid at continuous (row, col) coordinates.
Eigen::RowVectorXd lookup_pe(const PEGrid& grid, const Eigen::Vector2d& uv);

/// Per-token mean of the plane lookups: k x D.
Matrix lift_positional_embedding(const Eigen::Ref<const Matrix>& coords, const VirtualPlaneSet& planes,
                                 const PEGrid& grid);

}  // namespace lift3d::pe
