#pragma once

// Exact (conditional) mutual information over small discrete joints
// p(x, y, z), used to check the information-bottleneck inequality.

#include <cstddef>
#include <optional>
#include <vector>

#include "rmgib/random.hpp"

namespace rmgib {

enum class Variable { x, y, z };

class JointDistribution {
 public:
  // Row-major table indexed [x][y][z]; entries >= 0 summing to 1 within 1e-12.
  JointDistribution(std::size_t nx, std::size_t ny, std::size_t nz, std::vector<double> table);

  // p(x, y, z) = p(x, y) k(z | x). pxy: nx*ny row-major; kernel: nx*nz row-major, rows sum to 1.
  static JointDistribution from_kernel(std::size_t nx, std::size_t ny, std::size_t nz, const std::vector<double>& pxy,
                                       const std::vector<double>& kernel);

  std::size_t size(Variable v) const;
  double at(std::size_t x, std::size_t y, std::size_t z) const { return p_[(x * ny_ + y) * nz_ + z]; }

 private:
  std::size_t nx_;
  std::size_t ny_;
  std::size_t nz_;
  std::vector<double> p_;
};

// I(a; b) or I(a; b | c) in nats; a, b (and c) distinct.
double discrete_mi(const JointDistribution& j, Variable a, Variable b, std::optional<Variable> given = std::nullopt);

struct IbReport {
  double i_zx = 0.0;
  double i_zy = 0.0;
  double i_zx_given_y = 0.0;
  double i_zy_given_x = 0.0;
  bool decomposition_holds = false;  // I(z;x) = I(z;y) + I(z;x|y)
  bool inequality_holds = false;     // I(z;x) >= I(z;y)
};

// Throws ValidationError when I(z;y|x) exceeds `tolerance` (z is not a function of x alone).
IbReport verify_ib_inequality(const JointDistribution& j, double tolerance = 1e-9);

// Random Dirichlet(1) p(x, y) and per-x kernel k(z | x).
JointDistribution random_kernel_joint(std::size_t nx, std::size_t ny, std::size_t nz, Rng& rng);

}  // namespace rmgib
