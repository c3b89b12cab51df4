/*
 * Copyright 2026 The DebFilter Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "debfilter/value_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

namespace debfilter {

namespace {

// Relative pivot threshold below which an unregularised Gram is treated as singular.
constexpr double kSingularPivotRatio = 1e-13;

struct KahanMatrix {
  Matrix sum;
  Matrix carry;

  explicit KahanMatrix(Eigen::Index rows, Eigen::Index cols)
      : sum(Matrix::Zero(rows, cols)), carry(Matrix::Zero(rows, cols)) {}

  void add(const Matrix& term) {
    auto s = sum.array();
    auto c = carry.array();
    const Eigen::ArrayXXd y = term.array() - c;
    const Eigen::ArrayXXd t = s + y;
    c = (t - s) - y;
    s = t;
  }
};

struct KahanVector {
  Vector sum;
  Vector carry;

  explicit KahanVector(Eigen::Index n) : sum(Vector::Zero(n)), carry(Vector::Zero(n)) {}

  void add(const Vector& term) {
    const Vector y = term - carry;
    const Vector t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

double default_lambda(const Matrix& gram) { return kDefaultRidgeFactor * gram.trace() / double(gram.rows()); }

double pivot_condition(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  const Eigen::VectorXd d = llt.matrixLLT().diagonal();
  const double lo = d.minCoeff(), hi = d.maxCoeff();
  return lo > 0 ? (hi / lo) * (hi / lo) : std::numeric_limits<double>::infinity();
}

Eigen::LLT<Eigen::MatrixXd> factor_system(const Matrix& gram, double lambda, double& condition) {
  Eigen::MatrixXd system = gram;
  system.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(system);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::kSingularSystem, "Gram matrix is not positive definite; use a ridge lambda > 0");
  condition = pivot_condition(llt);
  const Eigen::VectorXd d = llt.matrixLLT().diagonal();
  if (d.minCoeff() * d.minCoeff() <= kSingularPivotRatio * d.maxCoeff() * d.maxCoeff())
    throw Error(ErrorCode::kSingularSystem, "Gram matrix is numerically singular; use a ridge lambda > 0");
  return llt;
}

UnifiedResult finish(const std::vector<ProjectionRef>& projections, const std::vector<const Vector*>& targets,
                     const Matrix& gram, double lambda, const Eigen::LLT<Eigen::MatrixXd>& llt, double condition,
                     const Vector* prior) {
  const Eigen::Index dim = gram.rows();
  KahanVector rhs(dim);
  for (std::size_t k = 0; k < projections.size(); ++k) rhs.add(projections[k].transpose() * *targets[k]);
  Vector b = rhs.sum;
  if (prior) {
    if (prior->size() != dim) throw Error(ErrorCode::kShapeMismatch, "ridge prior has wrong dimension");
    b += lambda * *prior;
  }
  UnifiedResult out;
  out.embedding = llt.solve(b);
  out.ridge_lambda = lambda;
  out.condition_estimate = condition;
  for (std::size_t k = 0; k < projections.size(); ++k)
    out.total_residual += (projections[k] * out.embedding - *targets[k]).squaredNorm();
  const Vector applied = gram * out.embedding + lambda * out.embedding;
  const double bn = b.norm();
  out.normal_residual = bn > 0 ? (applied - b).norm() / bn : (applied - b).norm();
  return out;
}

}  // namespace

double value_objective(const ValueProblem& problem, const Vector& v) {
  return (problem.coefficients * v.transpose() - problem.residual_targets).squaredNorm();
}

ValueEstimate solve_value(const ValueProblem& problem, double degenerate_epsilon) {
  const auto& a = problem.coefficients;
  const auto& r = problem.residual_targets;
  if (r.rows() != a.size()) throw Error(ErrorCode::kShapeMismatch, "coefficients and targets differ in length");
  if (!a.allFinite() || !r.allFinite()) throw Error(ErrorCode::kShapeMismatch, "non-finite value problem");
  const double denom = a.squaredNorm();
  if (denom <= degenerate_epsilon)
    throw Error(ErrorCode::kDegenerateAttention, "attention column has squared norm " + std::to_string(denom));
  ValueEstimate est;
  est.value.resize(r.cols());
  for (Eigen::Index d = 0; d < r.cols(); ++d) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) sum += a(i) * r(i, d);
    est.value(d) = sum / denom;
  }
  est.residual_norm = std::sqrt(value_objective(problem, est.value));
  return est;
}

ValueProblem build_value_problem(const LayerCapture& source, const LayerCapture& target, TokenSlot m, int head,
                                 int head_dim) {
  if (source.layer_index != target.layer_index)
    throw Error(ErrorCode::kCaptureMismatch, "captures come from different layers");
  if (source.input.rows() != target.input.rows() || source.input.cols() != target.input.cols() ||
      source.input != target.input)
    throw Error(ErrorCode::kCaptureMismatch, "captures were taken at different latent states");
  if (source.values.cols() != target.output.cols() || source.attention.size() != target.attention.size())
    throw Error(ErrorCode::kCaptureMismatch, "captures have different head layouts");
  if (head < 0 || head >= static_cast<int>(source.attention.size()))
    throw Error(ErrorCode::kShapeMismatch, "head index out of range");
  if (!m.valid()) throw Error(ErrorCode::kTokenIndexOutOfSpan, "slot " + std::to_string(m.index()));

  const Matrix& attn = source.attention[head];
  const auto values = source.values.middleCols(head * head_dim, head_dim);
  Matrix others = attn;
  others.col(m.row()).setZero();

  ValueProblem p;
  p.coefficients = attn.col(m.row());
  p.residual_targets = target.output.middleCols(head * head_dim, head_dim) - others * values;
  p.original_value = values.row(m.row()).transpose();
  return p;
}

Matrix compensated_gram(const std::vector<ProjectionRef>& projections) {
  if (projections.empty()) throw Error(ErrorCode::kEmptyInput, "no projections");
  const Eigen::Index dim = projections.front().cols();
  KahanMatrix acc(dim, dim);
  Matrix term(dim, dim);
  for (const auto& w : projections) {
    if (w.cols() != dim) throw Error(ErrorCode::kShapeMismatch, "projections map from different dimensions");
    term.setZero();
    term.selfadjointView<Eigen::Lower>().rankUpdate(w.transpose());
    term.triangularView<Eigen::StrictlyUpper>() = term.transpose();
    acc.add(term);
  }
  return acc.sum;
}

UnifiedResult unify_embedding(const UnifiedRegression& regression) {
  if (regression.estimates.empty()) throw Error(ErrorCode::kEmptyInput, "no value estimates to unify");
  if (regression.estimates.size() != regression.projections.size())
    throw Error(ErrorCode::kShapeMismatch, "estimates and projections are not index-aligned");
  if (regression.ridge_lambda && !(*regression.ridge_lambda >= 0.0))
    throw Error(ErrorCode::kOutOfRange, "ridge lambda must be >= 0");
  // Sum in (layer, head) order so the result does not depend on how the
  // caller gathered the estimates.
  std::vector<std::size_t> order(regression.estimates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const auto& ex = regression.estimates[x];
    const auto& ey = regression.estimates[y];
    return std::pair(ex.layer_index, ex.head_index) < std::pair(ey.layer_index, ey.head_index);
  });
  std::vector<ProjectionRef> projections;
  std::vector<const Vector*> targets;
  for (std::size_t k : order) {
    if (regression.projections[k].rows() != regression.estimates[k].value.size())
      throw Error(ErrorCode::kShapeMismatch, "projection rows differ from value dimension");
    projections.push_back(regression.projections[k]);
    targets.push_back(&regression.estimates[k].value);
  }
  const Matrix gram = compensated_gram(projections);
  const double lambda = regression.ridge_lambda.value_or(default_lambda(gram));
  double condition = 0.0;
  const auto llt = factor_system(gram, lambda, condition);
  return finish(projections, targets, gram, lambda, llt, condition,
                regression.prior ? &*regression.prior : nullptr);
}

ValueGram::ValueGram(std::vector<ProjectionRef> projections, std::optional<double> ridge_lambda)
    : projections_(std::move(projections)) {
  gram_ = compensated_gram(projections_);
  if (ridge_lambda && !(*ridge_lambda >= 0.0)) throw Error(ErrorCode::kOutOfRange, "ridge lambda must be >= 0");
  lambda_ = ridge_lambda.value_or(default_lambda(gram_));
  factor_ = factor_system(gram_, lambda_, condition_estimate_);
}

ValueGram ValueGram::for_stack(const CAStackSpec& stack, std::optional<double> ridge_lambda) {
  std::vector<ProjectionRef> projections;
  for (const auto& layer : stack.layers)
    for (int h = 0; h < layer.num_heads; ++h) projections.emplace_back(layer.value_head(h));
  return ValueGram(std::move(projections), ridge_lambda);
}

UnifiedResult ValueGram::solve(const std::vector<Vector>& estimates, const Vector* prior) const {
  if (estimates.size() != projections_.size())
    throw Error(ErrorCode::kShapeMismatch, "expected one estimate per projection");
  std::vector<const Vector*> targets;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    if (estimates[k].size() != projections_[k].rows())
      throw Error(ErrorCode::kShapeMismatch, "estimate dimension differs from projection rows");
    targets.push_back(&estimates[k]);
  }
  return finish(projections_, targets, gram_, lambda_, factor_, condition_estimate_, prior);
}

}  // namespace debfilter
