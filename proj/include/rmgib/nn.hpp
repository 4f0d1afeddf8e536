#pragma once

// Parameters, the MLP building block, the Adam optimizer, a finite-difference
// gradient checker and the binary checkpoint archive.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rmgib/autograd.hpp"
#include "rmgib/random.hpp"

namespace rmgib::nn {

// Named tensors owned by one module; `tag` distinguishes sets inside a checkpoint.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var var;
  };

  explicit ParamSet(std::string tag = {}) : tag_(std::move(tag)) {}

  Var& add(std::string name, Matrix init);
  Var& at(std::string_view name);
  const Var& at(std::string_view name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  const std::string& tag() const { return tag_; }
  std::size_t size() const;  // total scalar count

  void zero_grad();
  // Value copy with fresh leaves; gradients are not copied.
  ParamSet clone() const;
  // Copies values from `other`; names and shapes must match.
  void assign(const ParamSet& other);

 private:
  std::string tag_;
  std::vector<Entry> entries_;
};

// Fully connected network with rectifiers between layers (none after the last).
class MLP {
 public:
  MLP() = default;
  MLP(std::vector<Index> widths, std::string tag, std::uint64_t seed);

  Var forward(const Var& inputs) const;
  Matrix forward(const Matrix& inputs) const;

  Index input_dim() const { return widths_.front(); }
  Index output_dim() const { return widths_.back(); }
  const std::vector<Index>& widths() const { return widths_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  std::vector<Index> widths_;
  ParamSet params_;
};

// Glorot-style uniform init: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Matrix uniform_init(Index fan_in, Index fan_out, Rng& rng);

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  // One update of every tensor in `params` from its accumulated gradient.
  // Throws NumericError naming the tensor if a gradient is non-finite.
  void step(ParamSet& params);
  const AdamOptions& options() const { return options_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    long t = 0;
  };
  AdamOptions options_;
  std::map<std::string, Moments> state_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  Index worst_index = -1;
  std::size_t coordinates = 0;
};

// Compares backward() against central differences. Relative error per
// coordinate is |g_fd - g| / max(1, |g_fd|, |g|). At most
// `max_coords_per_tensor` coordinates are probed per tensor (evenly strided).
GradCheckResult gradient_check(const std::function<Var()>& loss_fn, std::vector<ParamSet*> params,
                               double epsilon = 1e-5, std::size_t max_coords_per_tensor = 64);

// Checkpoint archive: "RMGIBCKP" magic, u32 version, u32 tensor count, then per
// tensor u32 name length, name bytes ("tag/name"), u64 rows, u64 cols and
// rows*cols little-endian f64 values in row-major order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<const ParamSet*>& sets);
void load_checkpoint(const std::filesystem::path& path, const std::vector<ParamSet*>& sets);
std::string serialize_params(const std::vector<const ParamSet*>& sets);
std::uint64_t params_hash(const std::vector<const ParamSet*>& sets);

}  // namespace rmgib::nn
