#pragma once

#include <functional>
#include <optional>

#include "hyperconv/blocks.hpp"
#include "hyperconv/nn_ops.hpp"
#include "hyperconv/tensor.hpp"

namespace hyperconv {

/// Discretized field u(x,y) with n components on an H x W grid of spacing h.
/// Cell centers sit at ((i+1/2)h - extent/2), so the domain is centered on
/// the origin (the rotation equation needs this).
struct PdeGrid {
  Tensor u;  // [n, H, W]
  double h = 1.0;
  double tau = 0.1;
  PaddingMode bc = PaddingMode::ZeroDirichlet;

  std::int64_t components() const { return u.extent(0); }
  std::int64_t height() const { return u.extent(1); }
  std::int64_t width() const { return u.extent(2); }
  double x_of(std::int64_t j) const { return (static_cast<double>(j) + 0.5) * h - 0.5 * h * static_cast<double>(width()); }
  double y_of(std::int64_t i) const { return (static_cast<double>(i) + 0.5) * h - 0.5 * h * static_cast<double>(height()); }
  void validate() const;
};

/// Degree <= 1 polynomial coefficient a(x,y) = c0 + cx*x + cy*y.
struct PolyCoef {
  double c0 = 0.0, cx = 0.0, cy = 0.0;
  double eval(double x, double y) const { return c0 + cx * x + cy * y; }
};

/// Variable-coefficient transport operator: u_t = alpha(x,y) u_x + beta(x,y) u_y.
struct LinearOperatorSpec {
  PolyCoef alpha, beta;
};

/// Forward-Euler heat update u += tau * Lap_h(u), per component, written as
/// the 3x3 stencil of the conv-kernel form so the two routes agree bit for
/// bit. Errors if tau > h^2/4.
PdeGrid heat_step(const PdeGrid& g);

/// The tau/h^2 [0 1 0; 1 -4 1; 0 1 0] kernel as a conv weight bank.
Tensor heat_kernel(double tau, double h);

/// Two-step wave recurrence u_i = 2u_{i-1} - u_{i-2} + tau^2 Lap_h u_{i-1},
/// seeded by u_1 = u_0 + tau*v_0. `on_step(i, u_i)` is invoked per step.
/// Errors if tau > h/sqrt(2).
PdeGrid wave_solve_second_order(const PdeGrid& u0, const Tensor& v0, std::int64_t steps,
                                const std::function<void(std::int64_t, const Tensor&)>& on_step = {});

/// Exactly conserved discrete energy of the second-order scheme,
/// (1/2)|(u_next-u_curr)/tau|^2 h^2 - (1/2) h^2 <u_next, Lap_h u_curr>.
double wave_energy(const Tensor& u_next, const Tensor& u_curr, double tau, double h, PaddingMode bc);

/// Symmetric coefficient matrices of the first-order wave system in
/// w = (u_x, u_y, u_t).
Tensor wave_system_matrix_x();
Tensor wave_system_matrix_y();

/// Euler step of w_t = Ax w_x + Ay w_y with central differences; w has
/// exactly 3 components.
PdeGrid wave_step_first_order_system(const PdeGrid& w);

/// First-order upwind integration of u_t = alpha u_x + beta u_y up to
/// t_final, stepping by at most grid.tau. Errors if grid.tau violates the
/// advective CFL bound at the domain corner.
PdeGrid advect_variable_coefficient(const PdeGrid& g, const LinearOperatorSpec& op, double t_final);

/// The rotation equation u_t = -y u_x + x u_y; the exact solution rotates
/// the initial data clockwise by t around the origin.
PdeGrid rotation_advect(const PdeGrid& g, double t_final);

/// One Euler step of the factored quasi-linear system in the wiring of the
/// selected variant (TensorForm reads A3/B3 instead of the matrices).
struct QuasilinearCoeffs {
  Tensor A, B, C, D;    // [n,n] for the factored variants
  Tensor A3, B3;        // [n,n,n] for TensorForm
};
PdeGrid quasilinear_step(const PdeGrid& g, const QuasilinearCoeffs& coeffs, BlockVariant variant);

/// TensorForm Euler step with the derivative acting on the products u_j u_k.
PdeGrid tensorform_step_conservation(const PdeGrid& g, const Tensor& A3, const Tensor& B3);

struct BlowupDiagnostic {
  std::int64_t step = 0;       // first offending step (1-based; 0 = initial data)
  double max_abs = 0.0;
  double max_gradient = 0.0;
  bool non_finite = false;
};

/// Runs `stepper` up to max_steps and reports the first step whose field
/// exceeds threshold_factor * max(1, max|u_0|) or goes non-finite.
std::optional<BlowupDiagnostic> detect_blowup(const PdeGrid& initial,
                                              const std::function<PdeGrid(const PdeGrid&)>& stepper,
                                              std::int64_t max_steps, double threshold_factor = 1e6);

}  // namespace hyperconv
