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

#pragma once

#include "debfilter/attention_stack.hpp"
#include "debfilter/common.hpp"

#include <optional>
#include <vector>

namespace debfilter {

inline constexpr double kDegenerateAttentionEpsilon = 1e-12;
// Default ridge is this factor times the mean Gram diagonal.
inline constexpr double kDefaultRidgeFactor = 1e-6;

// Per-head value least squares for one token slot m:
//   min_v  sum_i || a_i v - r_i ||^2
// with a = A[:, m] and r_i = CA_target(i) - sum_{j != m} A_ij v_j.
struct ValueProblem {
  Vector coefficients;     // latent_token_count
  Matrix residual_targets; // latent_token_count x head_dim
  Vector original_value;   // head_dim
};

struct ValueEstimate {
  int layer_index = 0;
  int head_index = 0;
  TokenSlot token;
  Vector value;
  double residual_norm = 0.0;
};

double value_objective(const ValueProblem& problem, const Vector& v);

/// Closed-form solve, v = sum_i a_i r_i / sum_i a_i^2 per coordinate.
/// Throws DegenerateAttention when sum_i a_i^2 <= degenerate_epsilon; the
/// caller then keeps problem.original_value.
ValueEstimate solve_value(const ValueProblem& problem, double degenerate_epsilon = kDegenerateAttentionEpsilon);

// Coefficients come from the source attention map; the subtracted j != m
// terms use the source values. Both captures must share the same layer input.
ValueProblem build_value_problem(const LayerCapture& source, const LayerCapture& target, TokenSlot m, int head,
                                 int head_dim);

using ProjectionRef = Eigen::Ref<const Matrix>;

struct UnifiedRegression {
  std::vector<ValueEstimate> estimates;
  std::vector<ProjectionRef> projections;  // W_v^{l,h}, head_dim x embedding_dim
  std::optional<double> ridge_lambda;      // nullopt: default ridge
  // Ridge shrinks towards this vector instead of zero when set.
  std::optional<Vector> prior;
};

struct UnifiedResult {
  Vector embedding;
  double ridge_lambda = 0.0;
  double total_residual = 0.0;          // sum ||W c - v||^2
  double normal_residual = 0.0;         // ||(G + lambda I) c - rhs|| / ||rhs||
  double condition_estimate = 0.0;
};

// Compensated (Kahan) sum of W^T W over the given projections, in order.
Matrix compensated_gram(const std::vector<ProjectionRef>& projections);

/// Solves (sum W^T W + lambda I) c = sum W^T v (+ lambda prior).
/// Throws SingularSystem at lambda = 0 with a rank-deficient Gram.
UnifiedResult unify_embedding(const UnifiedRegression& regression);

// Factored normal equations for a fixed set of projections (every head of a
// stack), reused across many right-hand sides.
class ValueGram {
 public:
  ValueGram(std::vector<ProjectionRef> projections, std::optional<double> ridge_lambda = std::nullopt);

  static ValueGram for_stack(const CAStackSpec& stack, std::optional<double> ridge_lambda = std::nullopt);

  double ridge_lambda() const { return lambda_; }
  const Matrix& gram() const { return gram_; }
  std::size_t size() const { return projections_.size(); }

  // estimates[k] pairs with projection k.
  UnifiedResult solve(const std::vector<Vector>& estimates, const Vector* prior = nullptr) const;

 private:
  std::vector<ProjectionRef> projections_;
  Matrix gram_;
  double lambda_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> factor_;
  double condition_estimate_ = 0.0;
};

}  // namespace debfilter
