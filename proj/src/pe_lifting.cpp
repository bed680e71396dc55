#include "lift3d/pe_lifting.hpp"

#include "lift3d/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace lift3d::pe {

namespace {

// Each face as seen by a camera outside the cube looking at it: u is the
// image right direction, v the image up direction, u x v == outward normal.
const std::array<FaceBasis, 6> kBases = {{
    {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}},    // front
    {{0, 0, -1}, {-1, 0, 0}, {0, 1, 0}},  // back
    {{-1, 0, 0}, {0, 0, 1}, {0, 1, 0}},   // left
    {{1, 0, 0}, {0, 0, -1}, {0, 1, 0}},   // right
    {{0, 1, 0}, {1, 0, 0}, {0, 0, -1}},   // top
    {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}},   // bottom
}};

}  // namespace

std::string_view face_name(Face f) {
  switch (f) {
    case Face::kFront: return "front";
    case Face::kBack: return "back";
    case Face::kLeft: return "left";
    case Face::kRight: return "right";
    case Face::kTop: return "top";
    case Face::kBottom: return "bottom";
  }
  return "?";
}

const FaceBasis& face_basis(Face f) { return kBases[static_cast<std::size_t>(f)]; }

VirtualPlaneSet::VirtualPlaneSet(std::vector<Face> faces) : faces_(std::move(faces)) {
  if (faces_.empty()) throw InvalidArgument("a plane set needs at least one face");
  std::set<Face> unique(faces_.begin(), faces_.end());
  if (unique.size() != faces_.size()) throw InvalidArgument("plane set faces must be distinct");
}

VirtualPlaneSet VirtualPlaneSet::standard(int n) {
  switch (n) {
    case 1: return VirtualPlaneSet({Face::kFront});
    case 2: return VirtualPlaneSet({Face::kFront, Face::kBack});
    case 4: return VirtualPlaneSet({Face::kFront, Face::kBack, Face::kLeft, Face::kRight});
    case 6:
      return VirtualPlaneSet({Face::kFront, Face::kBack, Face::kLeft, Face::kRight, Face::kTop, Face::kBottom});
    default: throw InvalidArgument("plane count must be 1, 2, 4 or 6, got " + std::to_string(n));
  }
}

PEGrid sincos_grid(int side, int width) {
  if (side < 1 || width < 4 || width % 4 != 0) throw InvalidArgument("sincos grid needs side >= 1 and width % 4 == 0");
  PEGrid grid{side, Matrix(side * side, width)};
  const int quarter = width / 4;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      auto row = grid.embeddings.row(r * side + c);
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        row(i) = std::sin(r * omega);
        row(quarter + i) = std::cos(r * omega);
        row(2 * quarter + i) = std::sin(c * omega);
        row(3 * quarter + i) = std::cos(c * omega);
      }
    }
  }
  return grid;
}

PlanarCoords project_to_planes(const Eigen::Ref<const Matrix>& coords, const VirtualPlaneSet& planes, int side) {
  if (coords.cols() != 3) throw InvalidArgument("project_to_planes expects k x 3 coordinates");
  if (side < 1) throw InvalidArgument("grid side must be positive");
  PlanarCoords out;
  out.tokens = static_cast<int>(coords.rows());
  out.planes = planes.size();
  out.uv.reserve(static_cast<std::size_t>(out.tokens * out.planes));
  const double half = 0.5 * (side - 1);
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    const Eigen::Vector3d p = coords.row(i).transpose().cwiseMax(-1.0).cwiseMin(1.0);
    for (Face f : planes.faces()) {
      const auto& basis = face_basis(f);
      const double a = p.dot(basis.u);
      const double b = p.dot(basis.v);
      out.uv.emplace_back((a + 1.0) * half, (b + 1.0) * half);
    }
  }
  return out;
}

namespace {

// Lower node index and fractional weight along one axis, with the last cell
// reused at the far boundary so that t = 1 lands on the final node.
std::pair<int, double> cell(double x, int side) {
  if (side == 1) return {0, 0.0};
  x = std::clamp(x, 0.0, static_cast<double>(side - 1));
  int i = static_cast<int>(std::floor(x));
  i = std::min(i, side - 2);
  return {i, x - i};
}

}  // namespace

Eigen::RowVectorXd lookup_pe(const PEGrid& grid, const Eigen::Vector2d& uv) {
  const auto [r, tr] = cell(uv.x(), grid.side);
  const auto [c, tc] = cell(uv.y(), grid.side);
  if (grid.side == 1) return grid.at(0, 0);
  Eigen::RowVectorXd out = (1.0 - tr) * (1.0 - tc) * grid.at(r, c);
  out += (1.0 - tr) * tc * grid.at(r, c + 1);
  out += tr * (1.0 - tc) * grid.at(r + 1, c);
  out += tr * tc * grid.at(r + 1, c + 1);
  return out;
}

Matrix lift_positional_embedding(const Eigen::Ref<const Matrix>& coords, const VirtualPlaneSet& planes,
                                 const PEGrid& grid) {
  const PlanarCoords uv = project_to_planes(coords, planes, grid.side);
  Matrix out = Matrix::Zero(coords.rows(), grid.width());
  const double inv = 1.0 / planes.size();
  for (int i = 0; i < uv.tokens; ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(grid.width());
    for (int j = 0; j < uv.planes; ++j) acc += lookup_pe(grid, uv.at(i, j));
    out.row(i) = acc * inv;
  }
  return out;
}

}  // namespace lift3d::pe
