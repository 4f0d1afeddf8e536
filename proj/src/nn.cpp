#include "rmgib/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rmgib/errors.hpp"

namespace rmgib::nn {

Var& ParamSet::add(std::string name, Matrix init) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ValidationError("duplicate parameter '" + name + "'");
  }
  if (!init.allFinite()) throw NumericError("non-finite initial value for '" + name + "'");
  entries_.push_back({std::move(name), Var(std::move(init), true)});
  return entries_.back().var;
}

Var& ParamSet::at(std::string_view name) {
  for (auto& e : entries_) {
    if (e.name == name) return e.var;
  }
  throw ValidationError("unknown parameter '" + std::string(name) + "' in '" + tag_ + "'");
}

const Var& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

ParamSet ParamSet::clone() const {
  ParamSet out(tag_);
  for (const auto& e : entries_) out.entries_.push_back({e.name, Var(e.var.value(), true)});
  return out;
}

void ParamSet::assign(const ParamSet& other) {
  if (other.entries_.size() != entries_.size()) throw ShapeError("assign: parameter count mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& dst = entries_[i];
    const auto& src = other.entries_[i];
    if (dst.name != src.name || dst.var.rows() != src.var.rows() || dst.var.cols() != src.var.cols()) {
      throw ShapeError("assign: mismatch at '" + dst.name + "'");
    }
    dst.var.mutable_value() = src.var.value();
  }
}

Matrix uniform_init(Index fan_in, Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return w;
}

MLP::MLP(std::vector<Index> widths, std::string tag, std::uint64_t seed)
    : widths_(std::move(widths)), params_(std::move(tag)) {
  if (widths_.size() < 2) throw ValidationError("MLP needs at least input and output widths");
  Rng rng(derive_seed(seed, params_.tag()));
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    params_.add("w" + std::to_string(l), uniform_init(widths_[l], widths_[l + 1], rng));
    params_.add("b" + std::to_string(l), Matrix::Zero(1, widths_[l + 1]));
  }
}

Var MLP::forward(const Var& inputs) const {
  if (inputs.cols() != input_dim()) {
    throw ShapeError("MLP '" + params_.tag() + "': expected " + std::to_string(input_dim()) +
                     " input columns, got " + std::to_string(inputs.cols()));
  }
  Var h = inputs;
  const std::size_t layers = widths_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_row(matmul(h, params_.at("w" + std::to_string(l))), params_.at("b" + std::to_string(l)));
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

Matrix MLP::forward(const Matrix& inputs) const { return forward(Var::constant(inputs)).value(); }

void Adam::step(ParamSet& params) {
  for (auto& e : params.entries()) {
    Var& var = e.var;
    const std::string key = params.tag() + "/" + e.name;
    Matrix g = var.grad();
    if (g.size() == 0) g = Matrix::Zero(var.rows(), var.cols());
    if (!g.allFinite()) throw NumericError("non-finite gradient in tensor '" + key + "'");
    if (options_.weight_decay != 0.0) g += options_.weight_decay * var.value();

    auto& st = state_[key];
    if (st.t == 0) {
      st.m = Matrix::Zero(var.rows(), var.cols());
      st.v = Matrix::Zero(var.rows(), var.cols());
    }
    ++st.t;
    st.m = options_.beta1 * st.m + (1.0 - options_.beta1) * g;
    st.v = options_.beta2 * st.v + (1.0 - options_.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(st.t));
    var.mutable_value().array() -=
        options_.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + options_.eps);
  }
}

GradCheckResult gradient_check(const std::function<Var()>& loss_fn, std::vector<ParamSet*> params,
                               double epsilon, std::size_t max_coords_per_tensor) {
  for (auto* p : params) p->zero_grad();
  Var loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("gradient_check: non-finite loss at probe point");
  backward(loss);

  GradCheckResult result;
  for (auto* p : params) {
    for (auto& e : p->entries()) {
      const Matrix analytic = e.var.grad().size() ? e.var.grad() : Matrix::Zero(e.var.rows(), e.var.cols());
      const Index n = e.var.value().size();
      const Index stride = std::max<Index>(1, n / static_cast<Index>(max_coords_per_tensor));
      for (Index i = 0; i < n; i += stride) {
        double& x = e.var.mutable_value().data()[i];
        const double saved = x;
        x = saved + epsilon;
        const double up = loss_fn().item();
        x = saved - epsilon;
        const double down = loss_fn().item();
        x = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          throw NumericError("gradient_check: non-finite loss while probing '" + e.name + "'");
        }
        const double fd = (up - down) / (2.0 * epsilon);
        const double g = analytic.data()[i];
        const double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
        ++result.coordinates;
        if (rel > result.max_rel_error || result.worst_index < 0) {
          result.max_rel_error = rel;
          result.worst_tensor = p->tag() + "/" + e.name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

namespace {

constexpr char kMagic[8] = {'R', 'M', 'G', 'I', 'B', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ValidationError("truncated checkpoint: " + what);
  return v;
}

}  // namespace

std::string serialize_params(const std::vector<const ParamSet*>& sets) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  std::uint32_t count = 0;
  for (const auto* s : sets) count += static_cast<std::uint32_t>(s->entries().size());
  put<std::uint32_t>(out, count);
  for (const auto* s : sets) {
    for (const auto& e : s->entries()) {
      const std::string name = s->tag() + "/" + e.name;
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      put<std::uint64_t>(out, static_cast<std::uint64_t>(e.var.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(e.var.cols()));
      const auto& v = e.var.value();
      out.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(double));
    }
  }
  return out;
}

std::uint64_t params_hash(const std::vector<const ParamSet*>& sets) { return fnv1a(serialize_params(sets)); }

void save_checkpoint(const std::filesystem::path& path, const std::vector<const ParamSet*>& sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = serialize_params(sets);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, const std::vector<ParamSet*>& sets) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("not a checkpoint archive: " + path.string());
  }
  const auto version = take<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = take<std::uint32_t>(in, "count");
  std::map<std::string, Matrix> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw ValidationError("truncated checkpoint: name");
    const auto rows = take<std::uint64_t>(in, "rows");
    const auto cols = take<std::uint64_t>(in, "cols");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)))) {
      throw ValidationError("truncated checkpoint: values of " + name);
    }
    tensors.emplace(std::move(name), std::move(m));
  }
  for (auto* s : sets) {
    for (auto& e : s->entries()) {
      const std::string key = s->tag() + "/" + e.name;
      auto it = tensors.find(key);
      if (it == tensors.end()) throw ValidationError("checkpoint lacks tensor '" + key + "'");
      if (it->second.rows() != e.var.rows() || it->second.cols() != e.var.cols()) {
        throw ShapeError("checkpoint shape mismatch for '" + key + "'");
      }
      e.var.mutable_value() = it->second;
    }
  }
}

}  // namespace rmgib::nn
