#include "vigraph/solver.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>

namespace vigraph {

using Mat6x15 = Eigen::Matrix<double, 6, 15>;

FreeMask StateVariable::free_mask() const {
  FreeMask m;
  m.fill(true);
  if (pose_fixed) {
    for (int i = 0; i < 6; ++i) m[i] = false;
  } else if (gauge_fixed) {
    m[0] = m[1] = m[2] = false;
    m[5] = false;
  }
  if (speed_bias_fixed) {
    for (int i = 6; i < 15; ++i) m[i] = false;
  }
  return m;
}

bool StateVariable::any_free() const {
  const FreeMask m = free_mask();
  return std::any_of(m.begin(), m.end(), [](bool b) { return b; });
}

void FactorGraph::validate() const {
  for (const auto& o : observations) {
    if (!states.contains(o.frame) || !landmarks.contains(o.landmark)) {
      throw std::logic_error("observation references a missing variable");
    }
    if (o.cam < 0 || o.cam >= rig.size()) {
      throw std::logic_error("observation references a missing camera");
    }
  }
  for (const auto& f : imu_factors) {
    if (!states.contains(f.frame_k) || !states.contains(f.frame_n)) {
      throw std::logic_error("imu factor references a missing state");
    }
  }
  for (const auto& f : two_pose) {
    if (!states.contains(f.ref) || !states.contains(f.other)) {
      throw std::logic_error("two-pose factor references a missing state");
    }
  }
  for (const auto& f : priors) {
    if (!states.contains(f.frame)) throw std::logic_error("prior references a missing state");
  }
}

double cauchy_rho(double s, double b) {
  const double b2 = b * b;
  return b2 * std::log1p(s / b2);
}

double cauchy_rho_prime(double s, double b) { return 1.0 / (1.0 + s / (b * b)); }

void SolverOptions::validate() const {
  if (max_iterations <= 0 || !(initial_damping > 0) || !(max_damping > 0) ||
      !(function_tolerance > 0) || !(step_tolerance > 0) || !(cauchy_scale > 0)) {
    throw std::invalid_argument("solver options must be positive");
  }
}

namespace {

Mat2 upper_sqrt(const Mat2& W) {
  // W = L L^T, so (L^T e)^2 = e^T W e
  return Eigen::LLT<Mat2>(W).matrixL().transpose();
}

struct ObservationTerm {
  Vec2 r;
  Mat26 J_pose;  // only the pose coordinates are touched
  Mat23 J_landmark;
  double cost = 0.0;
};

/// Robustified, whitened observation residual; empty behind the camera.
std::optional<ObservationTerm> observation_term(const FactorGraph& g,
                                                const ReprojectionFactor& o,
                                                double b, bool jacobians) {
  const StateVariable& s = g.states.at(o.frame);
  const LandmarkVariable& l = g.landmarks.at(o.landmark);
  const Vec4 l_h(l.p_W.x(), l.p_W.y(), l.p_W.z(), 1.0);
  const auto res = reprojection_error(g.rig, o.cam, s.x.pose(), l_h, o.measurement);
  if (!res) return std::nullopt;
  const Mat2 L = upper_sqrt(o.information);
  ObservationTerm t;
  t.r = L * res->error;
  const double sq = t.r.squaredNorm();
  t.cost = 0.5 * cauchy_rho(sq, b);
  if (jacobians) {
    const double w = std::sqrt(cauchy_rho_prime(sq, b));
    t.r *= w;
    t.J_pose = w * L * res->J_pose;
    t.J_landmark = w * L * res->J_landmark;
  }
  return t;
}

struct PoseTerm {
  Vec6 r;
  Mat6x15 J_ref;
  Mat6x15 J_other;
};

PoseTerm two_pose_term(const FactorGraph& g, const TwoPoseFactor& f) {
  const auto res = eval_two_pose_error(f, g.states.at(f.ref).x.pose(),
                                       g.states.at(f.other).x.pose());
  PoseTerm t;
  t.r = f.sqrt_W * res.error;
  t.J_ref.setZero();
  t.J_other.setZero();
  t.J_ref.leftCols<6>() = f.sqrt_W * res.J_ref;
  t.J_other.leftCols<6>() = f.sqrt_W * res.J_other;
  return t;
}

double two_pose_cost(const FactorGraph& g, const TwoPoseFactor& f) {
  const auto res = eval_two_pose_error(f, g.states.at(f.ref).x.pose(),
                                       g.states.at(f.other).x.pose());
  return 0.5 * res.error.dot(f.W * res.error);
}

double imu_cost(const FactorGraph& g, const PreintegratedImu& f) {
  const auto w = imu_whitened(g.states.at(f.frame_k).x, g.states.at(f.frame_n).x,
                              f, g.imu);
  return 0.5 * w.residual.squaredNorm();
}

using Vec9 = Eigen::Matrix<double, 9, 1>;

Vec9 prior_residual(const FactorGraph& g, const SpeedBiasPrior& f) {
  const NavState& x = g.states.at(f.frame).x;
  Vec9 sb;
  sb << x.v, x.bg, x.ba;
  return (sb - f.mean).cwiseQuotient(f.sigma);
}

/// Variables and factors taking part in one optimize call.
struct Problem {
  std::vector<FrameId> state_ids;
  std::unordered_map<FrameId, int> state_slot;
  std::vector<FreeMask> masks;
  std::vector<LandmarkId> landmark_ids;
  std::unordered_map<LandmarkId, int> landmark_slot;
  std::vector<int> coord_index;  // slot * 15 + d -> reduced coordinate or -1
  int n_coords = 0;

  std::vector<const ReprojectionFactor*> observations;
  std::vector<const PreintegratedImu*> imu;
  std::vector<const TwoPoseFactor*> two_pose;
  std::vector<const SpeedBiasPrior*> priors;

  int slot(FrameId f) const {
    const auto it = state_slot.find(f);
    return it == state_slot.end() ? -1 : it->second;
  }
  int lslot(LandmarkId l) const {
    const auto it = landmark_slot.find(l);
    return it == landmark_slot.end() ? -1 : it->second;
  }
};

Problem make_problem(const FactorGraph& g) {
  Problem p;
  for (const auto& [id, s] : g.states) {
    if (!s.any_free()) continue;
    p.state_slot.emplace(id, static_cast<int>(p.state_ids.size()));
    p.state_ids.push_back(id);
    p.masks.push_back(s.free_mask());
  }
  p.coord_index.assign(p.state_ids.size() * 15, -1);
  for (std::size_t i = 0; i < p.state_ids.size(); ++i) {
    for (int d = 0; d < 15; ++d) {
      if (p.masks[i][d]) p.coord_index[i * 15 + d] = p.n_coords++;
    }
  }
  for (const auto& o : g.observations) {
    const bool lm_free = !g.landmarks.at(o.landmark).fixed;
    if (p.slot(o.frame) >= 0 || lm_free) {
      p.observations.push_back(&o);
      if (lm_free && !p.landmark_slot.contains(o.landmark)) {
        p.landmark_slot.emplace(o.landmark, 0);
      }
    }
  }
  // landmark slots in id order
  for (const auto& [id, l] : g.landmarks) {
    if (p.landmark_slot.contains(id)) {
      p.landmark_slot[id] = static_cast<int>(p.landmark_ids.size());
      p.landmark_ids.push_back(id);
    }
  }
  for (const auto& f : g.imu_factors) {
    if (p.slot(f.frame_k) >= 0 || p.slot(f.frame_n) >= 0) p.imu.push_back(&f);
  }
  for (const auto& f : g.two_pose) {
    if (p.slot(f.ref) >= 0 || p.slot(f.other) >= 0) p.two_pose.push_back(&f);
  }
  for (const auto& f : g.priors) {
    if (p.slot(f.frame) >= 0) p.priors.push_back(&f);
  }
  return p;
}

double problem_cost(const FactorGraph& g, const Problem& p, double b) {
  double c = 0.0;
  for (const auto* o : p.observations) {
    if (const auto t = observation_term(g, *o, b, false)) c += t->cost;
  }
  for (const auto* f : p.imu) c += imu_cost(g, *f);
  for (const auto* f : p.two_pose) c += two_pose_cost(g, *f);
  for (const auto* f : p.priors) c += 0.5 * prior_residual(g, *f).squaredNorm();
  return c;
}

struct LandmarkBlock {
  Mat3 H = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  std::vector<std::pair<int, Mat63>> W;  // (state slot, H_xl on the pose coordinates)

  Mat63& at(int slot) {
    for (auto& [s, m] : W) {
      if (s == slot) return m;
    }
    W.emplace_back(slot, Mat63::Zero());
    return W.back().second;
  }
};

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& k) const {
    return std::hash<long long>()((static_cast<long long>(k.first) << 32) ^
                                  static_cast<unsigned>(k.second));
  }
};

/// Block normal equations over slotted states (15 each) and free landmarks.
struct Linearization {
  std::unordered_map<std::pair<int, int>, Mat15, PairHash> Hxx;  // i <= j
  VecX bx;
  std::vector<LandmarkBlock> lm;
  double cost = 0.0;

  Mat15& block(int i, int j) {
    auto [it, inserted] = Hxx.try_emplace({i, j});
    if (inserted) it->second.setZero();
    return it->second;
  }
};

template <int R>
void add_state_pair(Linearization& lin, int si, const Eigen::Matrix<double, R, 15>& Ji,
                    int sj, const Eigen::Matrix<double, R, 15>& Jj,
                    const Eigen::Matrix<double, R, 1>& r) {
  if (si >= 0) {
    lin.block(si, si).noalias() += Ji.transpose().lazyProduct(Ji);
    lin.bx.segment<15>(15 * si).noalias() -= Ji.transpose() * r;
  }
  if (sj >= 0) {
    lin.block(sj, sj).noalias() += Jj.transpose().lazyProduct(Jj);
    lin.bx.segment<15>(15 * sj).noalias() -= Jj.transpose() * r;
  }
  if (si >= 0 && sj >= 0 && si != sj) {
    if (si < sj) {
      lin.block(si, sj).noalias() += Ji.transpose().lazyProduct(Jj);
    } else {
      lin.block(sj, si).noalias() += Jj.transpose().lazyProduct(Ji);
    }
  }
}

Linearization linearize(const FactorGraph& g, const Problem& p, double b) {
  Linearization lin;
  lin.bx = VecX::Zero(15 * static_cast<Eigen::Index>(p.state_ids.size()));
  lin.lm.resize(p.landmark_ids.size());
  for (std::size_t i = 0; i < p.state_ids.size(); ++i) {
    lin.block(static_cast<int>(i), static_cast<int>(i));
  }

  for (const auto* o : p.observations) {
    const auto t = observation_term(g, *o, b, true);
    if (!t) continue;
    lin.cost += t->cost;
    const int s = p.slot(o->frame);
    const int l = p.lslot(o->landmark);
    if (s >= 0) {
      lin.block(s, s).topLeftCorner<6, 6>().noalias() += t->J_pose.transpose().lazyProduct(t->J_pose);
      lin.bx.segment<6>(15 * s).noalias() -= t->J_pose.transpose() * t->r;
    }
    if (l >= 0) {
      LandmarkBlock& lb = lin.lm[l];
      lb.H.noalias() += t->J_landmark.transpose() * t->J_landmark;
      lb.b.noalias() -= t->J_landmark.transpose() * t->r;
      if (s >= 0) lb.at(s).noalias() += t->J_pose.transpose().lazyProduct(t->J_landmark);
    }
  }
  for (const auto* f : p.imu) {
    const auto w = imu_whitened(g.states.at(f->frame_k).x, g.states.at(f->frame_n).x,
                                *f, g.imu);
    lin.cost += 0.5 * w.residual.squaredNorm();
    add_state_pair<15>(lin, p.slot(f->frame_k), w.J_k, p.slot(f->frame_n), w.J_n,
                       w.residual);
  }
  for (const auto* f : p.two_pose) {
    const PoseTerm t = two_pose_term(g, *f);
    lin.cost += 0.5 * t.r.squaredNorm();
    add_state_pair<6>(lin, p.slot(f->ref), t.J_ref, p.slot(f->other), t.J_other, t.r);
  }
  for (const auto* f : p.priors) {
    const Vec9 r = prior_residual(g, *f);
    lin.cost += 0.5 * r.squaredNorm();
    const int s = p.slot(f->frame);
    for (int d = 0; d < 9; ++d) {
      const double w = 1.0 / f->sigma(d);
      lin.block(s, s)(6 + d, 6 + d) += w * w;
      lin.bx(15 * s + 6 + d) -= w * r(d);
    }
  }
  return lin;
}

struct Step {
  VecX dx;                 // 15 per slot, zero on fixed coordinates
  std::vector<Vec3> dl;    // per landmark slot
};

constexpr int kDenseLimit = 800;

std::optional<Step> solve(const Problem& p, const Linearization& lin, double lambda) {
  const int ns = static_cast<int>(p.state_ids.size());
  std::vector<Mat3> Hll_inv(lin.lm.size());
  auto reduced = lin.Hxx;
  VecX bx = lin.bx;
  for (std::size_t j = 0; j < lin.lm.size(); ++j) {
    const LandmarkBlock& lb = lin.lm[j];
    Hll_inv[j] = pseudo_inverse_psd(Mat3(lb.H + lambda * Mat3::Identity()));
    for (const auto& [si, Wi] : lb.W) {
      const Mat63 WiHinv = Wi * Hll_inv[j];
      bx.segment<6>(15 * si).noalias() -= WiHinv * lb.b;
      for (const auto& [sj, Wj] : lb.W) {
        if (si > sj) continue;
        auto [it, inserted] = reduced.try_emplace({si, sj});
        if (inserted) it->second.setZero();
        it->second.topLeftCorner<6, 6>().noalias() -= WiHinv.lazyProduct(Wj.transpose());
      }
    }
  }

  Step step;
  step.dx = VecX::Zero(15 * ns);
  if (p.n_coords > 0) {
    // visits the upper triangle of the reduced system
    auto for_each_entry = [&](auto&& emit) {
      for (const auto& [key, M] : reduced) {
        const auto [si, sj] = key;
        for (int a = 0; a < 15; ++a) {
          const int ia = p.coord_index[15 * si + a];
          if (ia < 0) continue;
          for (int c = 0; c < 15; ++c) {
            const int ic = p.coord_index[15 * sj + c];
            if (ic < 0) continue;
            double v = M(a, c);
            if (si == sj) {
              if (ia == ic) v += lambda;
              if (ic < ia) continue;
            }
            emit(ia, ic, v);
          }
        }
      }
    };
    VecX rhs(p.n_coords);
    for (int i = 0; i < 15 * ns; ++i) {
      if (p.coord_index[i] >= 0) rhs(p.coord_index[i]) = bx(i);
    }
    VecX d;
    if (p.n_coords <= kDenseLimit) {
      // the windowed system is nearly dense; blocked Cholesky wins there
      MatX H = MatX::Zero(p.n_coords, p.n_coords);
      for_each_entry([&](int i, int j, double v) { H(i, j) = v; });
      Eigen::LLT<MatX, Eigen::Upper> llt(H);
      if (llt.info() != Eigen::Success) return std::nullopt;
      d = llt.solve(rhs);
    } else {
      std::vector<Eigen::Triplet<double>> trip;
      trip.reserve(reduced.size() * 225);
      for_each_entry([&](int i, int j, double v) { trip.emplace_back(i, j, v); });
      Eigen::SparseMatrix<double> H(p.n_coords, p.n_coords);
      H.setFromTriplets(trip.begin(), trip.end());
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Upper> ldlt(H);
      if (ldlt.info() != Eigen::Success) return std::nullopt;
      if ((ldlt.vectorD().array() <= 0.0).any()) return std::nullopt;
      d = ldlt.solve(rhs);
      if (ldlt.info() != Eigen::Success) return std::nullopt;
    }
    if (!d.allFinite()) return std::nullopt;
    for (int i = 0; i < 15 * ns; ++i) {
      if (p.coord_index[i] >= 0) step.dx(i) = d(p.coord_index[i]);
    }
  }
  step.dl.resize(lin.lm.size());
  for (std::size_t j = 0; j < lin.lm.size(); ++j) {
    Vec3 rhs = lin.lm[j].b;
    for (const auto& [si, Wi] : lin.lm[j].W) {
      rhs.noalias() -= Wi.transpose() * step.dx.segment<6>(15 * si);
    }
    step.dl[j] = Hll_inv[j] * rhs;
    if (!step.dl[j].allFinite()) return std::nullopt;
  }
  return step;
}

struct Snapshot {
  std::vector<NavState> states;
  std::vector<Vec3> landmarks;
};

Snapshot take_snapshot(const FactorGraph& g, const Problem& p) {
  Snapshot s;
  for (FrameId id : p.state_ids) s.states.push_back(g.states.at(id).x);
  for (LandmarkId id : p.landmark_ids) s.landmarks.push_back(g.landmarks.at(id).p_W);
  return s;
}

void restore(FactorGraph& g, const Problem& p, const Snapshot& s) {
  for (std::size_t i = 0; i < p.state_ids.size(); ++i) {
    g.states.at(p.state_ids[i]).x = s.states[i];
  }
  for (std::size_t j = 0; j < p.landmark_ids.size(); ++j) {
    g.landmarks.at(p.landmark_ids[j]).p_W = s.landmarks[j];
  }
}

void apply_step(FactorGraph& g, const Problem& p, const Step& step) {
  for (std::size_t i = 0; i < p.state_ids.size(); ++i) {
    NavState& x = g.states.at(p.state_ids[i]).x;
    x = x.box_plus(step.dx.segment<15>(15 * static_cast<Eigen::Index>(i)));
  }
  for (std::size_t j = 0; j < p.landmark_ids.size(); ++j) {
    g.landmarks.at(p.landmark_ids[j]).p_W += step.dl[j];
  }
}

double step_norm(const Step& s) {
  double n = s.dx.squaredNorm();
  for (const Vec3& d : s.dl) n += d.squaredNorm();
  return std::sqrt(n);
}

}  // namespace

double total_cost(const FactorGraph& graph, double cauchy_scale) {
  double c = 0.0;
  for (const auto& o : graph.observations) {
    if (const auto t = observation_term(graph, o, cauchy_scale, false)) c += t->cost;
  }
  for (const auto& f : graph.imu_factors) c += imu_cost(graph, f);
  for (const auto& f : graph.two_pose) c += two_pose_cost(graph, f);
  for (const auto& f : graph.priors) c += 0.5 * prior_residual(graph, f).squaredNorm();
  return c;
}

OptReport optimize(FactorGraph& graph, const SolverOptions& options) {
  options.validate();
  const Problem p = make_problem(graph);
  const double b = options.cauchy_scale;
  OptReport report;
  Linearization lin = linearize(graph, p, b);
  report.initial_cost = report.final_cost = lin.cost;
  if (!std::isfinite(lin.cost)) {
    report.diverged = true;
    return report;
  }
  if (p.n_coords == 0 && p.landmark_ids.empty()) {
    report.converged = true;
    return report;
  }

  double lambda = options.initial_damping;
  while (report.iterations < options.max_iterations) {
    ++report.iterations;
    const auto step = solve(p, lin, lambda);
    if (!step) {
      lambda *= 10.0;
      if (lambda > options.max_damping) {
        report.diverged = true;
        break;
      }
      continue;
    }
    if (step_norm(*step) < options.step_tolerance) {
      report.converged = true;
      break;
    }
    const Snapshot snap = take_snapshot(graph, p);
    apply_step(graph, p, *step);
    const double new_cost = problem_cost(graph, p, b);
    if (std::isfinite(new_cost) && new_cost < lin.cost) {
      const double decrease = (lin.cost - new_cost) / std::max(lin.cost, 1e-300);
      lambda = std::max(lambda * 0.5, 1e-12);
      lin = linearize(graph, p, b);
      if (decrease < options.function_tolerance) {
        report.converged = true;
        break;
      }
    } else {
      restore(graph, p, snap);
      lambda *= 10.0;
      if (lambda > options.max_damping) {
        // no descent left at any damping: a stationary point
        report.converged = true;
        break;
      }
    }
  }
  report.final_cost = lin.cost;
  return report;
}

DenseSystem assemble_dense(const FactorGraph& graph, const SolverOptions& options) {
  const Problem p = make_problem(graph);
  const Linearization lin = linearize(graph, p, options.cauchy_scale);
  const int nl = static_cast<int>(p.landmark_ids.size());
  const int n = p.n_coords + 3 * nl;
  DenseSystem out;
  out.H = MatX::Zero(n, n);
  out.b = VecX::Zero(n);
  out.cost = lin.cost;
  for (std::size_t i = 0; i < p.state_ids.size(); ++i) {
    for (int d = 0; d < 15; ++d) {
      const int idx = p.coord_index[i * 15 + d];
      if (idx >= 0) {
        out.state_coords.emplace_back(p.state_ids[i], d);
        out.b(idx) = lin.bx(static_cast<Eigen::Index>(i * 15 + d));
      }
    }
  }
  for (const auto& [key, M] : lin.Hxx) {
    const auto [si, sj] = key;
    for (int a = 0; a < 15; ++a) {
      const int ia = p.coord_index[15 * si + a];
      if (ia < 0) continue;
      for (int c = 0; c < 15; ++c) {
        const int ic = p.coord_index[15 * sj + c];
        if (ic < 0) continue;
        out.H(ia, ic) = M(a, c);
        out.H(ic, ia) = M(a, c);
      }
    }
  }
  for (int j = 0; j < nl; ++j) {
    const int base = p.n_coords + 3 * j;
    const LandmarkBlock& lb = lin.lm[j];
    out.H.block<3, 3>(base, base) = lb.H;
    out.b.segment<3>(base) = lb.b;
    for (const auto& [si, W] : lb.W) {
      for (int a = 0; a < 6; ++a) {
        const int ia = p.coord_index[15 * si + a];
        if (ia < 0) continue;
        out.H.block<1, 3>(ia, base) = W.row(a);
        out.H.block<3, 1>(base, ia) = W.row(a).transpose();
      }
    }
  }
  out.landmark_order = p.landmark_ids;
  return out;
}

void apply_dense_step(FactorGraph& graph, const DenseSystem& layout,
                      const VecX& delta) {
  std::map<FrameId, Vec15> per_state;
  for (std::size_t i = 0; i < layout.state_coords.size(); ++i) {
    const auto [id, d] = layout.state_coords[i];
    auto [it, inserted] = per_state.try_emplace(id, Vec15::Zero());
    it->second(d) = delta(static_cast<Eigen::Index>(i));
  }
  for (const auto& [id, d] : per_state) {
    NavState& x = graph.states.at(id).x;
    x = x.box_plus(d);
  }
  const auto base = static_cast<Eigen::Index>(layout.state_coords.size());
  for (std::size_t j = 0; j < layout.landmark_order.size(); ++j) {
    graph.landmarks.at(layout.landmark_order[j]).p_W +=
        delta.segment<3>(base + 3 * static_cast<Eigen::Index>(j));
  }
}

double marginal_step_check(const FactorGraph& graph, const SolverOptions& options) {
  const DenseSystem sys = assemble_dense(graph, options);
  const Eigen::Index n = sys.b.size();
  if (n == 0) return 0.0;
  const VecX analytic = -sys.b;
  VecX numeric(n);
  const double h = 1e-6;
  FactorGraph work = graph;
  for (Eigen::Index i = 0; i < n; ++i) {
    VecX d = VecX::Zero(n);
    d(i) = h;
    work = graph;
    apply_dense_step(work, sys, d);
    const double plus = total_cost(work, options.cauchy_scale);
    work = graph;
    apply_dense_step(work, sys, -d);
    const double minus = total_cost(work, options.cauchy_scale);
    numeric(i) = (plus - minus) / (2.0 * h);
  }
  const double scale = std::max(1.0, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

}  // namespace vigraph
