#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

using Index = Eigen::Index;

// Dense row-major storage everywhere; the checkpoint format and all fixed-order
// kernels assume it.
template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Binds matrices and row-contiguous blocks alike (outer stride free, inner
// stride 1), so kernels can walk raw row pointers.
template <class Scalar>
using MatRef = Eigen::Ref<const Matrix<Scalar>, 0, Eigen::OuterStride<>>;

template <class Scalar>
using VecRef = Eigen::Ref<const Vector<Scalar>>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = Vector<float>;
using VectorD = Vector<double>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

template <class S>
std::string shape_str(const MatRef<S>& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace lp
