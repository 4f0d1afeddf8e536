#include "rmgib/info_theory.hpp"

#include <array>
#include <cmath>
#include <numeric>

#include "rmgib/errors.hpp"

namespace rmgib {

JointDistribution::JointDistribution(std::size_t nx, std::size_t ny, std::size_t nz, std::vector<double> table)
    : nx_(nx), ny_(ny), nz_(nz), p_(std::move(table)) {
  if (nx == 0 || ny == 0 || nz == 0) throw ValidationError("joint distribution needs nonempty alphabets");
  if (p_.size() != nx * ny * nz) throw ShapeError("joint table size != nx*ny*nz");
  double total = 0.0;
  for (double v : p_) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("joint entries must be finite and nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("joint entries must sum to 1");
}

JointDistribution JointDistribution::from_kernel(std::size_t nx, std::size_t ny, std::size_t nz,
                                                 const std::vector<double>& pxy, const std::vector<double>& kernel) {
  if (pxy.size() != nx * ny || kernel.size() != nx * nz) throw ShapeError("from_kernel: table sizes");
  std::vector<double> table(nx * ny * nz);
  for (std::size_t x = 0; x < nx; ++x) {
    for (std::size_t y = 0; y < ny; ++y) {
      for (std::size_t z = 0; z < nz; ++z) table[(x * ny + y) * nz + z] = pxy[x * ny + y] * kernel[x * nz + z];
    }
  }
  return JointDistribution(nx, ny, nz, std::move(table));
}

std::size_t JointDistribution::size(Variable v) const {
  switch (v) {
    case Variable::x: return nx_;
    case Variable::y: return ny_;
    case Variable::z: return nz_;
  }
  return 0;
}

double discrete_mi(const JointDistribution& j, Variable a, Variable b, std::optional<Variable> given) {
  if (a == b || (given && (*given == a || *given == b))) throw ValidationError("discrete_mi: variables must differ");
  const std::size_t na = j.size(a);
  const std::size_t nb = j.size(b);
  const std::size_t nc = given ? j.size(*given) : 1;
  // Marginalize to p(a, b, c) with c trivial when unconditioned.
  std::vector<double> abc(na * nb * nc, 0.0);
  std::array<std::size_t, 3> idx{};
  auto slot = [](Variable v) { return static_cast<std::size_t>(v); };
  for (idx[0] = 0; idx[0] < j.size(Variable::x); ++idx[0]) {
    for (idx[1] = 0; idx[1] < j.size(Variable::y); ++idx[1]) {
      for (idx[2] = 0; idx[2] < j.size(Variable::z); ++idx[2]) {
        const std::size_t c = given ? idx[slot(*given)] : 0;
        abc[(idx[slot(a)] * nb + idx[slot(b)]) * nc + c] += j.at(idx[0], idx[1], idx[2]);
      }
    }
  }
  std::vector<double> ac(na * nc, 0.0);
  std::vector<double> bc(nb * nc, 0.0);
  std::vector<double> pc(nc, 0.0);
  for (std::size_t ia = 0; ia < na; ++ia) {
    for (std::size_t ib = 0; ib < nb; ++ib) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double p = abc[(ia * nb + ib) * nc + c];
        ac[ia * nc + c] += p;
        bc[ib * nc + c] += p;
        pc[c] += p;
      }
    }
  }
  double mi = 0.0;
  for (std::size_t ia = 0; ia < na; ++ia) {
    for (std::size_t ib = 0; ib < nb; ++ib) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double p = abc[(ia * nb + ib) * nc + c];
        if (p <= 0.0) continue;
        mi += p * std::log(p * pc[c] / (ac[ia * nc + c] * bc[ib * nc + c]));
      }
    }
  }
  return mi;
}

IbReport verify_ib_inequality(const JointDistribution& j, double tolerance) {
  IbReport r;
  r.i_zy_given_x = discrete_mi(j, Variable::z, Variable::y, Variable::x);
  if (std::abs(r.i_zy_given_x) > tolerance) {
    throw ValidationError("z depends on y beyond x: I(z;y|x) = " + std::to_string(r.i_zy_given_x));
  }
  r.i_zx = discrete_mi(j, Variable::z, Variable::x);
  r.i_zy = discrete_mi(j, Variable::z, Variable::y);
  r.i_zx_given_y = discrete_mi(j, Variable::z, Variable::x, Variable::y);
  r.decomposition_holds = std::abs(r.i_zx - (r.i_zy + r.i_zx_given_y)) <= tolerance;
  r.inequality_holds = r.i_zx >= r.i_zy - tolerance;
  return r;
}

namespace {

std::vector<double> dirichlet_ones(std::size_t n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = e(rng);
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= s;
  return v;
}

}  // namespace

JointDistribution random_kernel_joint(std::size_t nx, std::size_t ny, std::size_t nz, Rng& rng) {
  const auto pxy = dirichlet_ones(nx * ny, rng);
  std::vector<double> kernel;
  for (std::size_t x = 0; x < nx; ++x) {
    const auto row = dirichlet_ones(nz, rng);
    kernel.insert(kernel.end(), row.begin(), row.end());
  }
  return JointDistribution::from_kernel(nx, ny, nz, pxy, kernel);
}

}  // namespace rmgib
