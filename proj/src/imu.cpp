#include "vigraph/imu.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace vigraph {

namespace {

constexpr int kP = 0;
constexpr int kPhi = 3;
constexpr int kV = 6;
constexpr int kBg = 9;
constexpr int kBa = 12;

ImuSample lerp(const ImuSample& a, const ImuSample& b, double t) {
  const double s = (t - a.t) / (b.t - a.t);
  ImuSample out;
  out.t = t;
  out.gyro = (1.0 - s) * a.gyro + s * b.gyro;
  out.accel = (1.0 - s) * a.accel + s * b.accel;
  return out;
}

}  // namespace

NavState NavState::box_plus(const Vec15& d) const {
  NavState out;
  out.r = r + d.segment<3>(kP);
  out.q = vigraph::box_plus(q, d.segment<3>(kPhi));
  out.v = v + d.segment<3>(kV);
  out.bg = bg + d.segment<3>(kBg);
  out.ba = ba + d.segment<3>(kBa);
  return out;
}

Vec15 nav_box_minus(const NavState& a, const NavState& b) {
  Vec15 d;
  d.segment<3>(kP) = a.r - b.r;
  d.segment<3>(kPhi) = box_minus(a.q, b.q);
  d.segment<3>(kV) = a.v - b.v;
  d.segment<3>(kBg) = a.bg - b.bg;
  d.segment<3>(kBa) = a.ba - b.ba;
  return d;
}

void ImuParams::validate() const {
  if (!(sigma_g > 0 && sigma_a > 0 && sigma_bg > 0 && sigma_ba > 0 && g > 0 &&
        rate > 0)) {
    throw std::invalid_argument("imu parameters must all be positive");
  }
}

std::vector<ImuSample> slice_imu(std::span<const ImuSample> buffer, double t0,
                                 double t1) {
  if (buffer.empty() || buffer.front().t > t0 || buffer.back().t < t1 ||
      t1 < t0) {
    throw std::out_of_range("imu buffer does not cover the requested interval");
  }
  std::vector<ImuSample> out;
  auto cmp = [](const ImuSample& s, double t) { return s.t < t; };
  auto it = std::lower_bound(buffer.begin(), buffer.end(), t0, cmp);
  // it->t >= t0
  if (it->t == t0) {
    out.push_back(*it);
  } else {
    out.push_back(lerp(*(it - 1), *it, t0));
  }
  for (; it != buffer.end() && it->t < t1; ++it) {
    if (it->t > t0) out.push_back(*it);
  }
  if (t1 > t0) {
    if (it != buffer.end() && it->t == t1) {
      out.push_back(*it);
    } else {
      out.push_back(lerp(*(it - 1), *it, t1));
    }
  }
  return out;
}

double max_imu_gap(std::span<const ImuSample> samples) {
  double gap = 0.0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    gap = std::max(gap, samples[i].t - samples[i - 1].t);
  }
  return gap;
}

PreintegratedImu PreintegratedImu::integrate(std::span<const ImuSample> samples,
                                             const ImuParams& params,
                                             const Vec3& bg_lin,
                                             const Vec3& ba_lin) {
  if (samples.empty()) {
    throw std::invalid_argument("preintegration needs at least one sample");
  }
  PreintegratedImu pre;
  pre.bg_lin_ = bg_lin;
  pre.ba_lin_ = ba_lin;
  pre.t0_ = samples.front().t;
  pre.t1_ = samples.front().t;
  pre.samples_.push_back(samples.front());
  pre.append(samples.subspan(1), params);
  return pre;
}

void PreintegratedImu::append(std::span<const ImuSample> samples,
                              const ImuParams& params) {
  if (samples_.empty()) {
    throw std::logic_error("append on an empty preintegration");
  }
  std::size_t begin = 0;
  if (!samples.empty() && samples.front().t == t1_) begin = 1;
  for (std::size_t i = begin; i < samples.size(); ++i) {
    if (!(samples[i].t > samples_.back().t)) {
      throw std::invalid_argument("imu timestamps must be strictly increasing");
    }
    step(samples_.back(), samples[i], params);
    samples_.push_back(samples[i]);
  }
  finalize();
}

PreintegratedImu PreintegratedImu::relinearized(const ImuParams& params,
                                                const Vec3& bg_lin,
                                                const Vec3& ba_lin) const {
  PreintegratedImu out = integrate(samples_, params, bg_lin, ba_lin);
  out.frame_k = frame_k;
  out.frame_n = frame_n;
  return out;
}

void PreintegratedImu::step(const ImuSample& s0, const ImuSample& s1,
                            const ImuParams& params) {
  const double dt = s1.t - s0.t;
  const Vec3 omega = 0.5 * (s0.gyro + s1.gyro) - bg_lin_;
  const Vec3 a0 = s0.accel - ba_lin_;
  const Vec3 a1 = s1.accel - ba_lin_;

  const Quat q1 = canonical(delta_q_ * quat_exp(omega * dt));
  const Mat3 C0 = delta_q_.toRotationMatrix();
  const Mat3 C1 = q1.toRotationMatrix();
  const Vec3 Ca0 = C0 * a0;
  const Vec3 Ca1 = C1 * a1;
  const Vec3 acc = 0.5 * (Ca0 + Ca1);

  // linearized error dynamics of this exact discrete step
  const Mat3 dphi1_dbg = -C1 * right_jacobian(omega * dt) * dt;
  const Mat3 A_phi = -0.5 * (skew(Ca0) + skew(Ca1));
  const Mat3 A_bg = -0.5 * skew(Ca1) * dphi1_dbg;
  const Mat3 A_ba = -0.5 * (C0 + C1);
  const double h = 0.5 * dt * dt;

  Mat15 F = Mat15::Identity();
  F.block<3, 3>(kP, kV) = dt * Mat3::Identity();
  F.block<3, 3>(kP, kPhi) = h * A_phi;
  F.block<3, 3>(kP, kBg) = h * A_bg;
  F.block<3, 3>(kP, kBa) = h * A_ba;
  F.block<3, 3>(kPhi, kBg) = dphi1_dbg;
  F.block<3, 3>(kV, kPhi) = dt * A_phi;
  F.block<3, 3>(kV, kBg) = dt * A_bg;
  F.block<3, 3>(kV, kBa) = dt * A_ba;

  // measurement noise enters exactly like a bias offset
  const Eigen::Matrix<double, 15, 3> G_g = F.block<15, 3>(0, kBg).eval();
  const Eigen::Matrix<double, 15, 3> G_a = F.block<15, 3>(0, kBa).eval();
  Eigen::Matrix<double, 15, 3> G_g9 = G_g;
  Eigen::Matrix<double, 15, 3> G_a9 = G_a;
  G_g9.bottomRows<6>().setZero();
  G_a9.bottomRows<6>().setZero();

  const Mat15 FP = F.lazyProduct(covariance_);
  Mat15 P = FP.lazyProduct(F.transpose());
  P += (params.sigma_g * params.sigma_g / dt) * G_g9.lazyProduct(G_g9.transpose());
  P += (params.sigma_a * params.sigma_a / dt) * G_a9.lazyProduct(G_a9.transpose());
  P.block<3, 3>(kBg, kBg) +=
      params.sigma_bg * params.sigma_bg * dt * Mat3::Identity();
  P.block<3, 3>(kBa, kBa) +=
      params.sigma_ba * params.sigma_ba * dt * Mat3::Identity();
  covariance_ = 0.5 * (P + P.transpose());

  bias_jac_ = F.topLeftCorner<9, 9>() * bias_jac_ + F.topRightCorner<9, 6>();

  delta_p_ += delta_v_ * dt + h * acc;
  delta_v_ += acc * dt;
  delta_q_ = q1;
  t1_ = s1.t;
}

void PreintegratedImu::finalize() {
  Mat15 P = covariance_;
  Eigen::SelfAdjointEigenSolver<Mat15> eig(P, Eigen::EigenvaluesOnly);
  const double max_ev = eig.eigenvalues().maxCoeff();
  const double min_ev = eig.eigenvalues().minCoeff();
  if (!(min_ev > 0.0) || max_ev / min_ev > 1e12) {
    P += 1e-12 * Mat15::Identity();
  }
  Eigen::LLT<Mat15> llt(P);
  const Mat15 L = llt.matrixL();
  sqrt_information_ = L.triangularView<Eigen::Lower>().solve(Mat15::Identity());
  information_ = sqrt_information_.transpose() * sqrt_information_;
}

Quat PreintegratedImu::corrected_delta_q(const Vec3& bg) const {
  const Vec3 u = bias_jac_.block<3, 3>(kPhi, 0) * (bg - bg_lin_);
  return canonical(quat_exp(u) * delta_q_);
}

Vec3 PreintegratedImu::corrected_delta_v(const Vec3& bg, const Vec3& ba) const {
  return delta_v_ + bias_jac_.block<3, 3>(kV, 0) * (bg - bg_lin_) +
         bias_jac_.block<3, 3>(kV, 3) * (ba - ba_lin_);
}

Vec3 PreintegratedImu::corrected_delta_p(const Vec3& bg, const Vec3& ba) const {
  return delta_p_ + bias_jac_.block<3, 3>(kP, 0) * (bg - bg_lin_) +
         bias_jac_.block<3, 3>(kP, 3) * (ba - ba_lin_);
}

NavState predict(const NavState& x_k, const PreintegratedImu& pre,
                 const ImuParams& params) {
  const double dt = pre.dt();
  if (dt == 0.0) return x_k;
  const Vec3 g = params.gravity();
  const Mat3 R_k = x_k.q.toRotationMatrix();
  NavState x_n;
  x_n.r = x_k.r + x_k.v * dt + 0.5 * g * dt * dt +
          R_k * pre.corrected_delta_p(x_k.bg, x_k.ba);
  x_n.q = canonical(x_k.q * pre.corrected_delta_q(x_k.bg));
  x_n.v = x_k.v + g * dt + R_k * pre.corrected_delta_v(x_k.bg, x_k.ba);
  x_n.bg = x_k.bg;
  x_n.ba = x_k.ba;
  return x_n;
}

ImuErrorResult imu_error(const NavState& x_k, const NavState& x_n,
                         const PreintegratedImu& pre, const ImuParams& params) {
  const auto& Jb = pre.bias_jacobian();
  const Vec3 dbg = x_k.bg - pre.bg_lin();
  const Vec3 u = Jb.block<3, 3>(kPhi, 0) * dbg;
  const Mat3 R_k = x_k.q.toRotationMatrix();
  const Vec3 dp = pre.corrected_delta_p(x_k.bg, x_k.ba);
  const Vec3 dv = pre.corrected_delta_v(x_k.bg, x_k.ba);

  const NavState x_hat = predict(x_k, pre, params);
  ImuErrorResult out;
  out.error = nav_box_minus(x_hat, x_n);
  const Vec3 e_alpha = out.error.segment<3>(kPhi);
  const double dt = pre.dt();

  out.J_k.setZero();
  out.J_n.setZero();
  const Mat3 I = Mat3::Identity();

  out.J_k.block<3, 3>(kP, kP) = I;
  out.J_k.block<3, 3>(kP, kPhi) = -skew(R_k * dp);
  out.J_k.block<3, 3>(kP, kV) = dt * I;
  out.J_k.block<3, 3>(kP, kBg) = R_k * Jb.block<3, 3>(kP, 0);
  out.J_k.block<3, 3>(kP, kBa) = R_k * Jb.block<3, 3>(kP, 3);

  const Mat3 Jl_inv = left_jacobian_inv(e_alpha);
  const Mat3 R_A = (x_k.q * quat_exp(u)).toRotationMatrix();
  out.J_k.block<3, 3>(kPhi, kPhi) = Jl_inv;
  out.J_k.block<3, 3>(kPhi, kBg) =
      Jl_inv * R_A * right_jacobian(u) * Jb.block<3, 3>(kPhi, 0);

  out.J_k.block<3, 3>(kV, kPhi) = -skew(R_k * dv);
  out.J_k.block<3, 3>(kV, kV) = I;
  out.J_k.block<3, 3>(kV, kBg) = R_k * Jb.block<3, 3>(kV, 0);
  out.J_k.block<3, 3>(kV, kBa) = R_k * Jb.block<3, 3>(kV, 3);

  out.J_k.block<3, 3>(kBg, kBg) = I;
  out.J_k.block<3, 3>(kBa, kBa) = I;

  out.J_n.block<3, 3>(kP, kP) = -I;
  out.J_n.block<3, 3>(kPhi, kPhi) = -right_jacobian_inv(e_alpha);
  out.J_n.block<3, 3>(kV, kV) = -I;
  out.J_n.block<3, 3>(kBg, kBg) = -I;
  out.J_n.block<3, 3>(kBa, kBa) = -I;

  Mat15 T = Mat15::Identity();
  T.block<3, 3>(kP, kP) = R_k;
  T.block<3, 3>(kPhi, kPhi) = R_k;
  T.block<3, 3>(kV, kV) = R_k;
  out.W = T * pre.information() * T.transpose();
  return out;
}

ImuWhitened imu_whitened(const NavState& x_k, const NavState& x_n,
                         const PreintegratedImu& pre, const ImuParams& params) {
  const ImuErrorResult raw = imu_error(x_k, x_n, pre, params);
  const Mat3 R_kT = x_k.q.toRotationMatrix().transpose();

  Vec15 e_body = raw.error;
  Mat15 J_k = raw.J_k;
  Mat15 J_n = raw.J_n;
  for (int block : {kP, kPhi, kV}) {
    const Vec3 e = raw.error.segment<3>(block);
    e_body.segment<3>(block) = R_kT * e;
    J_k.block<3, 15>(block, 0) = R_kT * raw.J_k.block<3, 15>(block, 0);
    J_n.block<3, 15>(block, 0) = R_kT * raw.J_n.block<3, 15>(block, 0);
    // derivative of the rotation R_k^T itself
    J_k.block<3, 3>(block, kPhi) += R_kT * skew(e);
  }
  const Mat15& S = pre.sqrt_information();
  ImuWhitened out;
  out.residual = S * e_body;
  out.J_k = S * J_k;
  out.J_n = S * J_n;
  return out;
}

}  // namespace vigraph
