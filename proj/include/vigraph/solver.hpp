#pragma once

#include "vigraph/factor_graph.hpp"

namespace vigraph {

struct SolverOptions {
  int max_iterations = 10;
  double initial_damping = 1e-4;
  double max_damping = 1e12;
  /// Stop once an accepted step lowers the cost by less than this fraction.
  double function_tolerance = 1e-6;
  double step_tolerance = 1e-10;
  double cauchy_scale = 3.0;

  void validate() const;
};

struct OptReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool converged = false;
  bool diverged = false;
};

/// Sum over every factor: 1/2 rho(e^T W e) for observations, 1/2 e^T W e for
/// IMU and two-pose terms.
double total_cost(const FactorGraph& graph, double cauchy_scale = 3.0);

/// Levenberg-Marquardt with landmarks eliminated per iteration. Only factors
/// touching at least one free variable take part; reported costs are over
/// those factors. Fixed variables are never written.
OptReport optimize(FactorGraph& graph, const SolverOptions& options = {});

/// Largest deviation between the assembled gradient and a central finite
/// difference of total_cost over all free coordinates, relative to the
/// gradient's infinity norm (or 1, whichever is larger).
double marginal_step_check(const FactorGraph& graph,
                           const SolverOptions& options = {});

/// The Gauss-Newton system over free coordinates with landmarks kept,
/// mainly for tests. Layout: free state coordinates in state-id order, then
/// free landmarks (3 each) in id order. b = -J^T r with robust weights.
struct DenseSystem {
  MatX H;
  VecX b;
  double cost = 0.0;
  std::vector<std::pair<FrameId, int>> state_coords;  // (frame, local dim)
  std::vector<LandmarkId> landmark_order;
};
DenseSystem assemble_dense(const FactorGraph& graph,
                           const SolverOptions& options = {});

/// Applies a step laid out as in DenseSystem.
void apply_dense_step(FactorGraph& graph, const DenseSystem& layout,
                      const VecX& delta);

}  // namespace vigraph
