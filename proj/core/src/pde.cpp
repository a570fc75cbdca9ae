#include "hyperconv/pde.hpp"

#include <cmath>
#include <stdexcept>

namespace hyperconv {

void PdeGrid::validate() const {
  if (u.shape().size() != 3)
    throw std::invalid_argument("pde: field must be [n,H,W], got " + shape_to_string(u.shape()));
  if (!(h > 0.0) || !(tau > 0.0)) throw std::invalid_argument("pde: h and tau must be positive");
}

namespace {

inline std::int64_t map_index(std::int64_t i, std::int64_t n, PaddingMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PaddingMode::ZeroDirichlet) return -1;
  return i < 0 ? -i - 1 : 2 * n - 1 - i;
}

inline double sample(const double* chan, std::int64_t i, std::int64_t j, std::int64_t H, std::int64_t W,
                     PaddingMode bc) {
  const std::int64_t mi = map_index(i, H, bc);
  if (mi < 0) return 0.0;
  const std::int64_t mj = map_index(j, W, bc);
  if (mj < 0) return 0.0;
  return chan[mi * W + mj];
}

// 3x3 stencil accumulation in the exact order of the conv2d inner loop so
// the heat/conv equivalence holds bit for bit.
inline double stencil3x3(const double* chan, const double* k, std::int64_t i, std::int64_t j, std::int64_t H,
                         std::int64_t W, PaddingMode bc) {
  double acc = 0.0;
  for (std::int64_t ky = 0; ky < 3; ++ky) {
    const std::int64_t mi = map_index(i - 1 + ky, H, bc);
    if (mi < 0) continue;
    for (std::int64_t kx = 0; kx < 3; ++kx) {
      const std::int64_t mj = map_index(j - 1 + kx, W, bc);
      if (mj < 0) continue;
      acc += k[ky * 3 + kx] * chan[mi * W + mj];
    }
  }
  return acc;
}

inline double central_x(const double* chan, std::int64_t i, std::int64_t j, std::int64_t H, std::int64_t W,
                        double h, PaddingMode bc) {
  return (sample(chan, i, j + 1, H, W, bc) - sample(chan, i, j - 1, H, W, bc)) / (2.0 * h);
}

inline double central_y(const double* chan, std::int64_t i, std::int64_t j, std::int64_t H, std::int64_t W,
                        double h, PaddingMode bc) {
  return (sample(chan, i + 1, j, H, W, bc) - sample(chan, i - 1, j, H, W, bc)) / (2.0 * h);
}

}  // namespace

Tensor heat_kernel(double tau, double h) {
  const double c = tau / (h * h);
  Tensor k({1, 1, 3, 3});
  k.at({0, 0, 0, 1}) = c;
  k.at({0, 0, 1, 0}) = c;
  k.at({0, 0, 1, 1}) = -4.0 * c;
  k.at({0, 0, 1, 2}) = c;
  k.at({0, 0, 2, 1}) = c;
  return k;
}

PdeGrid heat_step(const PdeGrid& g) {
  g.validate();
  const double bound = g.h * g.h / 4.0;
  if (g.tau > bound)
    throw std::invalid_argument("heat_step: CFL violated, tau=" + std::to_string(g.tau) + " exceeds h^2/4=" +
                                std::to_string(bound));
  const Tensor k = heat_kernel(g.tau, g.h);
  const double* kd = k.data().data();
  const std::int64_t n = g.components(), H = g.height(), W = g.width();
  PdeGrid out = g;
  for (std::int64_t c = 0; c < n; ++c) {
    const double* chan = g.u.data().data() + c * H * W;
    double* dst = out.u.data().data() + c * H * W;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        dst[i * W + j] = chan[i * W + j] + stencil3x3(chan, kd, i, j, H, W, g.bc);
  }
  return out;
}

PdeGrid wave_solve_second_order(const PdeGrid& u0, const Tensor& v0, std::int64_t steps,
                                const std::function<void(std::int64_t, const Tensor&)>& on_step) {
  u0.validate();
  if (!v0.same_shape(u0.u))
    throw std::invalid_argument("wave: v0 shape " + shape_to_string(v0.shape()) + " must match u0 " +
                                shape_to_string(u0.u.shape()));
  const double bound = u0.h / std::sqrt(2.0);
  if (u0.tau > bound)
    throw std::invalid_argument("wave: CFL violated, tau=" + std::to_string(u0.tau) + " exceeds h/sqrt(2)=" +
                                std::to_string(bound));
  const std::int64_t n = u0.components(), H = u0.height(), W = u0.width();
  const double c = u0.tau * u0.tau / (u0.h * u0.h);
  Tensor lap({1, 1, 3, 3});
  lap.at({0, 0, 0, 1}) = c;
  lap.at({0, 0, 1, 0}) = c;
  lap.at({0, 0, 1, 1}) = -4.0 * c;
  lap.at({0, 0, 1, 2}) = c;
  lap.at({0, 0, 2, 1}) = c;
  const double* kd = lap.data().data();

  Tensor prev = u0.u;
  Tensor curr = u0.u;
  for (std::int64_t i = 0; i < curr.numel(); ++i) curr[i] = prev[i] + u0.tau * v0[i];
  if (on_step) on_step(1, curr);
  for (std::int64_t step = 2; step <= steps; ++step) {
    Tensor next(curr.shape());
    for (std::int64_t ch = 0; ch < n; ++ch) {
      const double* pc = curr.data().data() + ch * H * W;
      const double* pp = prev.data().data() + ch * H * W;
      double* pn = next.data().data() + ch * H * W;
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j)
          pn[i * W + j] = 2.0 * pc[i * W + j] - pp[i * W + j] + stencil3x3(pc, kd, i, j, H, W, u0.bc);
    }
    prev = std::move(curr);
    curr = std::move(next);
    if (on_step) on_step(step, curr);
  }
  PdeGrid out = u0;
  out.u = std::move(curr);
  return out;
}

double wave_energy(const Tensor& u_next, const Tensor& u_curr, double tau, double h, PaddingMode bc) {
  if (!u_next.same_shape(u_curr)) throw std::invalid_argument("wave_energy: mismatched frames");
  const std::int64_t n = u_next.extent(0), H = u_next.extent(1), W = u_next.extent(2);
  Tensor lap({1, 1, 3, 3});
  const double ih2 = 1.0 / (h * h);
  lap.at({0, 0, 0, 1}) = ih2;
  lap.at({0, 0, 1, 0}) = ih2;
  lap.at({0, 0, 1, 1}) = -4.0 * ih2;
  lap.at({0, 0, 1, 2}) = ih2;
  lap.at({0, 0, 2, 1}) = ih2;
  const double* kd = lap.data().data();
  double kinetic = 0.0, gradient = 0.0;
  for (std::int64_t ch = 0; ch < n; ++ch) {
    const double* pn = u_next.data().data() + ch * H * W;
    const double* pc = u_curr.data().data() + ch * H * W;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        const double dt = (pn[i * W + j] - pc[i * W + j]) / tau;
        kinetic += dt * dt;
        gradient -= pn[i * W + j] * stencil3x3(pc, kd, i, j, H, W, bc);
      }
  }
  return 0.5 * h * h * (kinetic + gradient);
}

Tensor wave_system_matrix_x() {
  return Tensor({3, 3}, {0, 0, 1, 0, 0, 0, 1, 0, 0});
}

Tensor wave_system_matrix_y() {
  return Tensor({3, 3}, {0, 0, 0, 0, 0, 1, 0, 1, 0});
}

PdeGrid wave_step_first_order_system(const PdeGrid& w) {
  w.validate();
  if (w.components() != 3)
    throw std::invalid_argument("wave system: expected 3 components (u_x, u_y, u_t), got " +
                                std::to_string(w.components()));
  const Tensor Ax = wave_system_matrix_x();
  const Tensor Ay = wave_system_matrix_y();
  const std::int64_t H = w.height(), W = w.width();
  PdeGrid out = w;
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      double dx[3], dy[3];
      for (std::int64_t c = 0; c < 3; ++c) {
        const double* chan = w.u.data().data() + c * H * W;
        dx[c] = central_x(chan, i, j, H, W, w.h, w.bc);
        dy[c] = central_y(chan, i, j, H, W, w.h, w.bc);
      }
      for (std::int64_t c = 0; c < 3; ++c) {
        double rhs = 0.0;
        for (std::int64_t d = 0; d < 3; ++d) rhs += Ax[c * 3 + d] * dx[d] + Ay[c * 3 + d] * dy[d];
        out.u[c * H * W + i * W + j] = w.u[c * H * W + i * W + j] + w.tau * rhs;
      }
    }
  return out;
}

PdeGrid advect_variable_coefficient(const PdeGrid& g, const LinearOperatorSpec& op, double t_final) {
  g.validate();
  if (g.components() != 1) throw std::invalid_argument("advect: single-component fields only");
  if (!(t_final >= 0.0)) throw std::invalid_argument("advect: t_final must be non-negative");
  const std::int64_t H = g.height(), W = g.width();

  double speed = 0.0;
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      const double x = g.x_of(j), y = g.y_of(i);
      speed = std::max(speed, std::abs(op.alpha.eval(x, y)) + std::abs(op.beta.eval(x, y)));
    }
  if (speed > 0.0 && g.tau * speed / g.h > 1.0)
    throw std::invalid_argument("advect: CFL violated, tau=" + std::to_string(g.tau) + " exceeds h/speed=" +
                                std::to_string(g.h / speed));

  PdeGrid state = g;
  if (t_final == 0.0) return state;
  const std::int64_t steps = static_cast<std::int64_t>(std::ceil(t_final / g.tau - 1e-12));
  const double tau = t_final / static_cast<double>(steps);
  for (std::int64_t s = 0; s < steps; ++s) {
    Tensor next(state.u.shape());
    const double* chan = state.u.data().data();
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        const double x = state.x_of(j), y = state.y_of(i);
        // u_t + a u_x + b u_y = 0 with a = -alpha, b = -beta; upwind picks
        // the one-sided difference against the local flow
        const double a = -op.alpha.eval(x, y);
        const double b = -op.beta.eval(x, y);
        const double u0 = sample(chan, i, j, H, W, state.bc);
        const double ux = a > 0.0 ? (u0 - sample(chan, i, j - 1, H, W, state.bc)) / state.h
                                  : (sample(chan, i, j + 1, H, W, state.bc) - u0) / state.h;
        const double uy = b > 0.0 ? (u0 - sample(chan, i - 1, j, H, W, state.bc)) / state.h
                                  : (sample(chan, i + 1, j, H, W, state.bc) - u0) / state.h;
        next[i * W + j] = u0 - tau * (a * ux + b * uy);
      }
    state.u = std::move(next);
  }
  return state;
}

PdeGrid rotation_advect(const PdeGrid& g, double t_final) {
  LinearOperatorSpec rot;
  rot.alpha = PolyCoef{0.0, 0.0, -1.0};  // -y
  rot.beta = PolyCoef{0.0, 1.0, 0.0};    // +x
  return advect_variable_coefficient(g, rot, t_final);
}

namespace {

void require_square(const Tensor& M, std::int64_t n, const char* name) {
  if (M.shape() != std::vector<std::int64_t>{n, n})
    throw std::invalid_argument(std::string("quasilinear: ") + name + " must be [n,n] with n=" + std::to_string(n) +
                                ", got " + shape_to_string(M.shape()));
}

void require_cube(const Tensor& T, std::int64_t n, const char* name) {
  if (T.shape() != std::vector<std::int64_t>{n, n, n})
    throw std::invalid_argument(std::string("quasilinear: ") + name + " must be [n,n,n] with n=" +
                                std::to_string(n) + ", got " + shape_to_string(T.shape()));
}

}  // namespace

PdeGrid quasilinear_step(const PdeGrid& g, const QuasilinearCoeffs& coeffs, BlockVariant variant) {
  g.validate();
  const std::int64_t n = g.components(), H = g.height(), W = g.width();
  PdeGrid out = g;

  if (variant == BlockVariant::TensorForm) {
    require_cube(coeffs.A3, n, "A3");
    require_cube(coeffs.B3, n, "B3");
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        std::vector<double> uval(n), dx(n), dy(n);
        for (std::int64_t c = 0; c < n; ++c) {
          const double* chan = g.u.data().data() + c * H * W;
          uval[c] = chan[i * W + j];
          dx[c] = central_x(chan, i, j, H, W, g.h, g.bc);
          dy[c] = central_y(chan, i, j, H, W, g.h, g.bc);
        }
        for (std::int64_t c = 0; c < n; ++c) {
          double rhs = 0.0;
          for (std::int64_t a = 0; a < n; ++a)
            for (std::int64_t k = 0; k < n; ++k)
              rhs += coeffs.A3[(c * n + a) * n + k] * uval[k] * dx[a] + coeffs.B3[(c * n + a) * n + k] * uval[k] * dy[a];
          out.u[c * H * W + i * W + j] = uval[c] + g.tau * rhs;
        }
      }
    return out;
  }

  require_square(coeffs.C, n, "C");
  const bool has_d = coeffs.D.numel() > 0;
  if (has_d) require_square(coeffs.D, n, "D");
  const bool needs_ab = variant != BlockVariant::Eq5;
  if (needs_ab) {
    require_square(coeffs.A, n, "A");
    require_square(coeffs.B, n, "B");
  }

  const auto matvec = [n](const Tensor& M, const std::vector<double>& v, std::vector<double>& out_v) {
    for (std::int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j) acc += M[i * n + j] * v[j];
      out_v[static_cast<std::size_t>(i)] = acc;
    }
  };

  if (variant == BlockVariant::Eq6 || variant == BlockVariant::Eq7) {
    // conservation form: p_j = (Cu)_j u_j (and (Du)_j u_j for Eq7's y part)
    // computed everywhere first, then differentiated
    Tensor px({n, H, W}), py({n, H, W});
    std::vector<double> uval(n), cu(n), du(n);
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        for (std::int64_t c = 0; c < n; ++c) uval[c] = g.u[c * H * W + i * W + j];
        matvec(coeffs.C, uval, cu);
        if (variant == BlockVariant::Eq7) {
          matvec(coeffs.D, uval, du);
        } else {
          du = cu;
        }
        for (std::int64_t c = 0; c < n; ++c) {
          px[c * H * W + i * W + j] = cu[c] * uval[c];
          py[c * H * W + i * W + j] = du[c] * uval[c];
        }
      }
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        for (std::int64_t c = 0; c < n; ++c) {
          double rhs = 0.0;
          for (std::int64_t a = 0; a < n; ++a) {
            const double dxp = central_x(px.data().data() + a * H * W, i, j, H, W, g.h, g.bc);
            const double dyp = central_y(py.data().data() + a * H * W, i, j, H, W, g.h, g.bc);
            rhs += coeffs.A[c * n + a] * dxp + coeffs.B[c * n + a] * dyp;
          }
          out.u[c * H * W + i * W + j] = g.u[c * H * W + i * W + j] + g.tau * rhs;
        }
      }
    return out;
  }

  std::vector<double> uval(n), dx(n), dy(n), cu(n), du(n), adx(n), bdy(n);
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      for (std::int64_t c = 0; c < n; ++c) {
        const double* chan = g.u.data().data() + c * H * W;
        uval[c] = chan[i * W + j];
        dx[c] = central_x(chan, i, j, H, W, g.h, g.bc);
        dy[c] = central_y(chan, i, j, H, W, g.h, g.bc);
      }
      matvec(coeffs.C, uval, cu);
      matvec(has_d ? coeffs.D : coeffs.C, uval, du);
      for (std::int64_t c = 0; c < n; ++c) {
        double rhs = 0.0;
        switch (variant) {
          case BlockVariant::Eq3:
            for (std::int64_t a = 0; a < n; ++a)
              rhs += coeffs.A[c * n + a] * cu[a] * dx[a] + coeffs.B[c * n + a] * du[a] * dy[a];
            break;
          case BlockVariant::Eq4: {
            matvec(coeffs.A, dx, adx);
            matvec(coeffs.B, dy, bdy);
            rhs = cu[c] * adx[c] + du[c] * bdy[c];
            break;
          }
          case BlockVariant::Eq5:
            rhs = cu[c] * dx[c] + du[c] * dy[c];
            break;
          default: break;
        }
        out.u[c * H * W + i * W + j] = uval[c] + g.tau * rhs;
      }
    }
  return out;
}

PdeGrid tensorform_step_conservation(const PdeGrid& g, const Tensor& A3, const Tensor& B3) {
  g.validate();
  const std::int64_t n = g.components(), H = g.height(), W = g.width();
  require_cube(A3, n, "A3");
  require_cube(B3, n, "B3");
  // products p_{jk} = u_j u_k on the full grid, then rhs_i = sum A_ijk Dx p_jk + B_ijk Dy p_jk
  Tensor prod({n * n, H, W});
  for (std::int64_t a = 0; a < n; ++a)
    for (std::int64_t k = 0; k < n; ++k) {
      const double* pa = g.u.data().data() + a * H * W;
      const double* pk = g.u.data().data() + k * H * W;
      double* dst = prod.data().data() + (a * n + k) * H * W;
      for (std::int64_t p = 0; p < H * W; ++p) dst[p] = pa[p] * pk[p];
    }
  PdeGrid out = g;
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j)
      for (std::int64_t c = 0; c < n; ++c) {
        double rhs = 0.0;
        for (std::int64_t a = 0; a < n; ++a)
          for (std::int64_t k = 0; k < n; ++k) {
            const double* pp = prod.data().data() + (a * n + k) * H * W;
            rhs += A3[(c * n + a) * n + k] * central_x(pp, i, j, H, W, g.h, g.bc) +
                   B3[(c * n + a) * n + k] * central_y(pp, i, j, H, W, g.h, g.bc);
          }
        out.u[c * H * W + i * W + j] = g.u[c * H * W + i * W + j] + g.tau * rhs;
      }
  return out;
}

std::optional<BlowupDiagnostic> detect_blowup(const PdeGrid& initial,
                                              const std::function<PdeGrid(const PdeGrid&)>& stepper,
                                              std::int64_t max_steps, double threshold_factor) {
  initial.validate();
  const std::int64_t n = initial.components(), H = initial.height(), W = initial.width();

  const auto inspect = [&](const PdeGrid& g, std::int64_t step) -> std::optional<BlowupDiagnostic> {
    double max_abs = 0.0;
    bool finite = true;
    for (double v : g.u.data()) {
      if (!std::isfinite(v)) {
        finite = false;
        break;
      }
      max_abs = std::max(max_abs, std::abs(v));
    }
    double max_grad = 0.0;
    if (finite) {
      for (std::int64_t c = 0; c < n; ++c) {
        const double* chan = g.u.data().data() + c * H * W;
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W; ++j) {
            const double gx = central_x(chan, i, j, H, W, g.h, g.bc);
            const double gy = central_y(chan, i, j, H, W, g.h, g.bc);
            max_grad = std::max(max_grad, std::hypot(gx, gy));
          }
      }
    }
    double init_max = 0.0;
    for (double v : initial.u.data())
      if (std::isfinite(v)) init_max = std::max(init_max, std::abs(v));
    const double threshold = threshold_factor * std::max(1.0, init_max);
    if (!finite || max_abs > threshold)
      return BlowupDiagnostic{step, max_abs, max_grad, !finite};
    return std::nullopt;
  };

  if (auto d = inspect(initial, 0)) return d;
  PdeGrid state = initial;
  for (std::int64_t step = 1; step <= max_steps; ++step) {
    state = stepper(state);
    if (auto d = inspect(state, step)) return d;
  }
  return std::nullopt;
}

}  // namespace hyperconv
