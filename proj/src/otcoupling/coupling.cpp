#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "osteo/diffcore/errors.hpp"
#include "osteo/otcoupling/otcoupling.hpp"

namespace osteo::ot {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kPlainSweeps = 20;

// Gaussian elimination with partial pivoting on an augmented k x (k+1) system.
bool solve_dense(std::vector<double> sys, std::size_t k, std::vector<double>& x) {
  const std::size_t w = k + 1;
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < k; ++r)
      if (std::abs(sys[r * w + col]) > std::abs(sys[piv * w + col])) piv = r;
    if (std::abs(sys[piv * w + col]) < 1e-300) return false;
    if (piv != col)
      for (std::size_t q = 0; q < w; ++q) std::swap(sys[col * w + q], sys[piv * w + q]);
    for (std::size_t r = 0; r < k; ++r) {
      if (r == col) continue;
      const double factor = sys[r * w + col] / sys[col * w + col];
      if (factor == 0.0) continue;
      for (std::size_t q = col; q < w; ++q) sys[r * w + q] -= factor * sys[col * w + q];
    }
  }
  for (std::size_t r = 0; r < k; ++r) x[r] = sys[r * w + k] / sys[r * w + r];
  return true;
}

void check_beta(std::span<const double> beta, std::size_t cols) {
  if (beta.size() != cols) throw DimensionError("beta length must equal the number of annotations");
  double total = 0.0;
  for (double b : beta) {
    if (b < 0.0) throw ContractError("beta must be nonnegative");
    total += b;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("beta must sum to 1");
}

void check_gamma(double gamma, std::size_t rows) {
  if (gamma * static_cast<double>(rows) < 1.0 - 1e-12) {
    throw InfeasibleError("row cap gamma=" + std::to_string(gamma) + " below 1/N for N=" +
                          std::to_string(rows));
  }
}

double log_sum_exp(const double* v, std::size_t n) {
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - mx);
  return mx + std::log(s);
}

// Projects an approximate plan onto the constraint set: shrink rows over the
// cap and columns over beta, then spread each column's missing mass across
// rows in proportion to their remaining slack. Total slack always covers the
// missing mass because N * gamma >= 1.
void round_to_feasible(std::vector<double>& t, std::size_t n, std::size_t m, std::span<const double> beta,
                       double gamma) {
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < m; ++j) r += t[i * m + j];
    if (r > gamma)
      for (std::size_t j = 0; j < m; ++j) t[i * m + j] *= gamma / r;
  }
  std::vector<double> deficit(m);
  double missing = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += t[i * m + j];
    if (col > beta[j])
      for (std::size_t i = 0; i < n; ++i) t[i * m + j] *= beta[j] / col;
    deficit[j] = std::max(0.0, beta[j] - std::min(col, beta[j]));
    missing += deficit[j];
  }
  if (missing == 0.0) return;
  std::vector<double> slack(n);
  double total_slack = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < m; ++j) r += t[i * m + j];
    slack[i] = std::max(0.0, gamma - r);
    total_slack += slack[i];
  }
  if (total_slack <= 0.0) return;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t[i * m + j] += deficit[j] * slack[i] / total_slack;
}

}  // namespace

CostMatrix::CostMatrix(std::size_t n, std::size_t m, std::vector<double> v)
    : rows(n), cols(m), values(std::move(v)) {
  if (values.size() != n * m) throw DimensionError("cost matrix buffer does not match N x M");
}

std::vector<double> CouplingPlan::row_sums() const {
  std::vector<double> r(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) r[i] += at(i, j);
  return r;
}

std::vector<double> CouplingPlan::col_sums() const {
  std::vector<double> c(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) c[j] += at(i, j);
  return c;
}

double CouplingPlan::transport_cost(const CostMatrix& c) const {
  if (c.rows != rows || c.cols != cols) throw DimensionError("plan and cost shapes differ");
  double s = 0.0;
  for (std::size_t k = 0; k < plan.size(); ++k) s += plan[k] * c.values[k];
  return s;
}

CouplingPlan solve_relaxed(const CostMatrix& c, std::span<const double> beta, double gamma,
                           double epsilon, int iters) {
  const std::size_t n = c.rows, m = c.cols;
  if (n == 0 || m == 0) throw DimensionError("empty cost matrix");
  check_beta(beta, m);
  check_gamma(gamma, n);
  if (!(epsilon > 0.0)) throw ContractError("epsilon must be positive");

  std::vector<double> f(n, 0.0), g(m, 0.0), buf(std::max(n, m));
  const double log_gamma = std::log(gamma);
  auto plan_entry = [&](std::size_t i, std::size_t j, double eps) {
    if (g[j] == kNegInf) return 0.0;
    return std::exp((f[i] + g[j] - c.at(i, j)) / eps);
  };

  CouplingPlan out;
  out.rows = n;
  out.cols = m;
  out.beta.assign(beta.begin(), beta.end());
  out.gamma = gamma;
  out.epsilon = epsilon;
  out.residual = std::numeric_limits<double>::infinity();

  // Start from a coarse temperature and shrink geometrically to `epsilon`
  // over the first half of the sweeps; the duals carry over between stages.
  double cmax = 0.0;
  for (double v : c.values) cmax = std::max(cmax, std::abs(v));
  const double eps_start = std::max(epsilon, cmax);
  const int ramp = std::max(1, iters / 2);
  const double decay = std::pow(epsilon / eps_start, 1.0 / ramp);

  double eps = eps_start;
  auto row_step = [&](double e) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) buf[j] = g[j] == kNegInf ? kNegInf : (g[j] - c.at(i, j)) / e;
      f[i] = std::min(0.0, e * log_gamma - e * log_sum_exp(buf.data(), m));
    }
  };
  auto column_residual = [&](double e, std::vector<double>* cols) {
    double residual = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) col += plan_entry(i, j, e);
      if (cols) (*cols)[j] = col;
      residual = std::max(residual, std::abs(col - beta[j]));
    }
    return residual;
  };

  auto column_step = [&](double e) {
    for (std::size_t j = 0; j < m; ++j) {
      if (beta[j] == 0.0) {
        g[j] = kNegInf;
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - c.at(i, j)) / e;
      g[j] = e * std::log(beta[j]) - e * log_sum_exp(buf.data(), n);
    }
  };

  int sweep = 1;
  for (; sweep <= iters; ++sweep) {
    eps = sweep >= ramp ? epsilon : std::max(epsilon, eps_start * std::pow(decay, sweep));
    column_step(eps);
    row_step(eps);
    // Rows now satisfy the cap exactly; the residual sits in the columns.
    out.sweeps = sweep;
    out.residual = column_residual(eps, nullptr);
    if (eps == epsilon && (out.residual < 1e-9 || sweep >= ramp + kPlainSweeps)) break;
  }

  // At small epsilon the alternating updates crawl once the cap binds.
  // Finish with Newton steps on the column potentials, the row potentials
  // being the exact clipped maximisers for the current columns.
  std::vector<std::size_t> act;
  for (std::size_t j = 0; j < m; ++j)
    if (beta[j] > 0.0) act.push_back(j);
  const std::size_t k = act.size();
  std::vector<double> cols(m), hess(k * (k + 1)), g_prev(m);
  auto dual = [&]() {
    double d = 0.0;
    for (std::size_t q : act) d += beta[q] * g[q];
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0;
      for (std::size_t j : act) r += plan_entry(i, j, epsilon);
      d += gamma * f[i] - epsilon * r;
    }
    return d;
  };
  auto newton_line_search = [&](const std::vector<double>& step) {
    const double d0 = dual();
    double slope = 0.0;
    for (std::size_t a = 0; a < k; ++a) slope += step[a] * hess[a * (k + 1) + k];
    g_prev = g;
    const std::vector<double> f_prev = f;
    double t = 1.0;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      for (std::size_t a = 0; a < k; ++a) g[act[a]] = g_prev[act[a]] + t * step[a];
      row_step(epsilon);
      if (dual() >= d0 + 1e-4 * t * slope) return true;
    }
    g = g_prev;
    f = f_prev;
    return false;
  };
  for (++sweep; sweep <= iters && out.residual >= 1e-9; ++sweep) {
    column_residual(epsilon, &cols);
    std::fill(hess.begin(), hess.end(), 0.0);
    for (std::size_t a = 0; a < k; ++a) {
      hess[a * (k + 1) + a] = cols[act[a]] / epsilon * (1.0 + 1e-10) + 1e-14;
      hess[a * (k + 1) + k] = beta[act[a]] - cols[act[a]];
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (f[i] >= 0.0) continue;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          hess[a * (k + 1) + b] -= plan_entry(i, act[a], epsilon) * plan_entry(i, act[b], epsilon) / (gamma * epsilon);
    }
    std::vector<double> step(k);
    bool accepted = false;
    if (solve_dense(hess, k, step)) {
      // Tiny column mass means tiny curvature and a wild step; the line
      // search on the concave dual reins it in.
      bool finite = true;
      for (double v : step) finite = finite && std::isfinite(v);
      if (finite) accepted = newton_line_search(step);
    }
    if (!accepted) {
      column_step(epsilon);
      row_step(epsilon);
    }
    out.sweeps = sweep;
    out.residual = column_residual(epsilon, nullptr);
  }
  eps = epsilon;

  out.plan.resize(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.plan[i * m + j] = plan_entry(i, j, eps);
  round_to_feasible(out.plan, n, m, beta, gamma);
  return out;
}

CouplingPlan brute_force_coupling(const CostMatrix& c, std::span<const double> beta, double gamma) {
  const std::size_t n = c.rows, m = c.cols;
  if (n * m > 6) throw ContractError("brute_force_coupling is limited to N*M <= 6");
  if (n == 0 || m == 0) throw DimensionError("empty cost matrix");
  check_beta(beta, m);
  check_gamma(gamma, n);

  // Standard form: variables [T (n*m), slack (n)] >= 0,
  //   column j: sum_i T_ij = beta_j;  row i: sum_j T_ij + s_i = gamma.
  const std::size_t nv = n * m + n, nr = m + n;
  std::vector<double> a(nr * nv, 0.0), b(nr);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) a[j * nv + i * m + j] = 1.0;
    b[j] = beta[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) a[(m + i) * nv + i * m + j] = 1.0;
    a[(m + i) * nv + n * m + i] = 1.0;
    b[m + i] = gamma;
  }

  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_x;
  std::vector<std::size_t> basis(nr);
  std::vector<double> sys(nr * (nr + 1));

  // Every basis of size nr; each nonsingular, nonnegative basic solution is a vertex.
  std::vector<bool> pick(nv, false);
  std::fill(pick.begin(), pick.begin() + nr, true);
  do {
    std::size_t k = 0;
    for (std::size_t v = 0; v < nv; ++v)
      if (pick[v]) basis[k++] = v;
    for (std::size_t r = 0; r < nr; ++r) {
      for (std::size_t q = 0; q < nr; ++q) sys[r * (nr + 1) + q] = a[r * nv + basis[q]];
      sys[r * (nr + 1) + nr] = b[r];
    }
    bool singular = false;
    for (std::size_t col = 0; col < nr && !singular; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < nr; ++r)
        if (std::abs(sys[r * (nr + 1) + col]) > std::abs(sys[piv * (nr + 1) + col])) piv = r;
      if (std::abs(sys[piv * (nr + 1) + col]) < 1e-12) {
        singular = true;
        break;
      }
      if (piv != col)
        for (std::size_t q = 0; q <= nr; ++q) std::swap(sys[col * (nr + 1) + q], sys[piv * (nr + 1) + q]);
      for (std::size_t r = 0; r < nr; ++r) {
        if (r == col) continue;
        const double factor = sys[r * (nr + 1) + col] / sys[col * (nr + 1) + col];
        if (factor == 0.0) continue;
        for (std::size_t q = col; q <= nr; ++q) sys[r * (nr + 1) + q] -= factor * sys[col * (nr + 1) + q];
      }
    }
    if (singular) continue;
    std::vector<double> x(nv, 0.0);
    bool feasible = true;
    for (std::size_t r = 0; r < nr; ++r) {
      const double v = sys[r * (nr + 1) + nr] / sys[r * (nr + 1) + r];
      if (v < -1e-12) {
        feasible = false;
        break;
      }
      x[basis[r]] = std::max(v, 0.0);
    }
    if (!feasible) continue;
    double cost = 0.0;
    for (std::size_t q = 0; q < n * m; ++q) cost += x[q] * c.values[q];
    if (cost < best - 1e-15) {
      best = cost;
      best_x = std::move(x);
    }
  } while (std::prev_permutation(pick.begin(), pick.end()));

  if (best_x.empty()) throw InfeasibleError("no feasible coupling");
  CouplingPlan out;
  out.rows = n;
  out.cols = m;
  out.plan.assign(best_x.begin(), best_x.begin() + static_cast<long>(n * m));
  out.beta.assign(beta.begin(), beta.end());
  out.gamma = gamma;
  return out;
}

double anneal_gamma(long step, long total_steps, double gamma0) {
  if (total_steps <= 0) return 1.0;
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return gamma0 + (1.0 - gamma0) * t;
}

}  // namespace osteo::ot
