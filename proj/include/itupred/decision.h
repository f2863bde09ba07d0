#pragma once

#include <functional>

#include <Eigen/Dense>

namespace itupred {

/// Shared decision rule: an input is classified ITU when p >= 0.5.
inline constexpr double kDecisionThreshold = 0.5;

inline bool predict_positive(double p) { return p >= kDecisionThreshold; }

/// Rows are samples; returns one positive-class probability per row.
using BatchModel = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

}  // namespace itupred
