#pragma once

#include <Eigen/Dense>

namespace protean {

/// Row-major dense matrix; one sample (or one sample-position) per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace protean
