#include "kgc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "kgc/error.hpp"

namespace kgc {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapM = Eigen::Map<const MatRM>;
using MMapM = Eigen::Map<MatRM>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;
using MMapA = Eigen::Map<Eigen::ArrayXd>;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// ---- Tensor ---------------------------------------------------------------

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw contract_error("use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw contract_error("use of undefined tensor");
  return *impl_;
}

static void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw shape_error("value count " + std::to_string(values.size()) + " does not fill shape " +
                      kgc::shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const { return impl().shape; }
int Tensor::rank() const { return static_cast<int>(impl().shape.size()); }
std::int64_t Tensor::dim(int i) const { return impl().shape.at(static_cast<std::size_t>(i)); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl().data.size()); }

double* Tensor::data() { return impl().data.data(); }
const double* Tensor::data() const { return impl().data.data(); }
std::vector<double>& Tensor::values() { return impl().data; }
const std::vector<double>& Tensor::values() const { return impl().data; }

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool b) { impl().requires_grad = b; }

std::vector<double>& Tensor::grad_buffer() {
  auto& g = impl().grad;
  if (g.empty()) g.assign(impl().data.size(), 0.0);
  return g;
}

bool Tensor::has_grad() const { return !impl().grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw contract_error("tensor has no stored gradient");
  return impl().grad;
}

void Tensor::clear_grad() { impl().grad.clear(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>(this->impl());
  return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
  for (double v : impl().data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return kgc::shape_str(impl().shape); }

// ---- Tape -------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw contract_error("backward requires a scalar loss, got " +
                         (loss.defined() ? loss.shape_str() : std::string("<undefined>")));
  }
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  steps_.clear();
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool tracked(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Right-operand broadcast: equal shapes, scalar, or shape suffix. With
// row-major storage a suffix broadcast is a cyclic index into b.
void check_elementwise(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  if (b.numel() == 1) return;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() < sa.size() &&
      std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    return;
  }
  throw shape_error(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                    b.shape_str());
}

template <class Fwd>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, Fwd f) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  for (std::int64_t base = 0; base < an; base += bn) {
    for (std::int64_t j = 0; j < bn; ++j) po[base + j] = f(pa[base + j], pb[j]);
  }
  return out;
}

// Accumulates `contrib(i, j)` into the (possibly broadcast) right operand's
// gradient; j indexes b, i indexes the full output.
template <class Contrib>
void reduce_into(Tensor& b, std::int64_t an, Contrib contrib) {
  auto& gb = b.grad_buffer();
  const std::int64_t bn = b.numel();
  for (std::int64_t base = 0; base < an; base += bn) {
    for (std::int64_t j = 0; j < bn; ++j) gb[static_cast<std::size_t>(j)] += contrib(base + j, j);
  }
}

}  // namespace

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    CMapM A(a.data(), m, k), B(b.data(), k, n);
    MMapM O(out.data(), m, n);
    O.noalias() = A * B;
  }
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      CMapM G(out.grad().data(), m, n);
      if (a.requires_grad()) {
        CMapM B(b.data(), k, n);
        MMapM dA(a.grad_buffer().data(), m, k);
        dA.noalias() += G * B.transpose();
      }
      if (b.requires_grad()) {
        CMapM A(a.data(), m, k);
        MMapM dB(b.grad_buffer().data(), k, n);
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
  if (a.rank() != 2) throw shape_error("transpose expects a matrix, got " + a.shape_str());
  const auto m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    CMapM A(a.data(), m, n);
    MMapM O(out.data(), n, m);
    O = A.transpose();
  }
  if (tracked(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      CMapM G(out.grad().data(), n, m);
      MMapM dA(a.grad_buffer().data(), m, n);
      dA += G.transpose();
    });
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  check_elementwise(a, b, "add");
  Tensor out = broadcast_binary(a, b, [](double x, double y) { return x + y; });
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        MMapA(a.grad_buffer().data(), a.numel()) += CMapA(g.data(), a.numel());
      }
      if (b.requires_grad()) {
        reduce_into(b, a.numel(), [&](std::int64_t i, std::int64_t) { return g[i]; });
      }
    });
  }
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape) {
  check_elementwise(a, b, "subtract");
  Tensor out = broadcast_binary(a, b, [](double x, double y) { return x - y; });
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      if (a.requires_grad()) {
        MMapA(a.grad_buffer().data(), a.numel()) += CMapA(g.data(), a.numel());
      }
      if (b.requires_grad()) {
        reduce_into(b, a.numel(), [&](std::int64_t i, std::int64_t) { return -g[i]; });
      }
    });
  }
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b, Tape* tape) {
  check_elementwise(a, b, "hadamard");
  Tensor out = broadcast_binary(a, b, [](double x, double y) { return x * y; });
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      const std::int64_t an = a.numel(), bn = b.numel();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        const double* pb = b.data();
        for (std::int64_t base = 0; base < an; base += bn) {
          for (std::int64_t j = 0; j < bn; ++j) ga[base + j] += g[base + j] * pb[j];
        }
      }
      if (b.requires_grad()) {
        const double* pa = a.data();
        reduce_into(b, an, [&](std::int64_t i, std::int64_t) { return g[i] * pa[i]; });
      }
    });
  }
  return out;
}

Tensor divide(const Tensor& a, const Tensor& b, Tape* tape) {
  check_elementwise(a, b, "divide");
  Tensor out = broadcast_binary(a, b, [](double x, double y) { return x / y; });
  if (tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      const std::int64_t an = a.numel(), bn = b.numel();
      const double* pb = b.data();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::int64_t base = 0; base < an; base += bn) {
          for (std::int64_t j = 0; j < bn; ++j) ga[base + j] += g[base + j] / pb[j];
        }
      }
      if (b.requires_grad()) {
        const double* po = out.data();
        reduce_into(b, an,
                    [&](std::int64_t i, std::int64_t j) { return -g[i] * po[i] / pb[j]; });
      }
    });
  }
  return out;
}

// ---- unary -------------------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Tape* tape, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(x.shape());
  const std::int64_t n = x.numel();
  MMapA(out.data(), n) = fwd(CMapA(x.data(), n));
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, bwd]() mutable {
      if (!out.has_grad()) return;
      const std::int64_t n = x.numel();
      MMapA(x.grad_buffer().data(), n) +=
          bwd(CMapA(x.data(), n), CMapA(out.data(), n)) * CMapA(out.grad().data(), n);
    });
  }
  return out;
}

}  // namespace

Tensor relu(const Tensor& x, Tape* tape) {
  return unary_op(
      x, tape, [](auto v) { return v.max(0.0); },
      [](auto v, auto) { return (v > 0.0).template cast<double>(); });
}

Tensor tanh(const Tensor& x, Tape* tape) {
  return unary_op(
      x, tape, [](auto v) { return v.tanh(); }, [](auto, auto y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x, Tape* tape) {
  return unary_op(
      x, tape, [](auto v) { return v.exp(); }, [](auto, auto y) { return y; });
}

Tensor neg(const Tensor& x, Tape* tape) { return scale(x, -1.0, tape); }

Tensor scale(const Tensor& x, double factor, Tape* tape) {
  return unary_op(
      x, tape, [factor](auto v) { return v * factor; },
      [factor](auto, auto y) { return y * 0.0 + factor; });
}

Tensor shift(const Tensor& x, double offset, Tape* tape) {
  return unary_op(
      x, tape, [offset](auto v) { return v + offset; },
      [](auto, auto y) { return y * 0.0 + 1.0; });
}

// ---- softmax -------------------------------------------------------------------

namespace {

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_at(const Shape& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw shape_error(std::string(op) + ": axis " + std::to_string(axis) +
                      " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis, Tape* tape) {
  const AxisSplit s = split_at(x.shape(), axis, "softmax");
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.n * s.inner + in;
      double mx = px[base];
      for (std::int64_t i = 1; i < s.n; ++i) mx = std::max(mx, px[base + i * s.inner]);
      double z = 0.0;
      for (std::int64_t i = 0; i < s.n; ++i) {
        const double e = std::exp(px[base + i * s.inner] - mx);
        po[base + i * s.inner] = e;
        z += e;
      }
      for (std::int64_t i = 0; i < s.n; ++i) po[base + i * s.inner] /= z;
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      const double* py = out.data();
      auto& gx = x.grad_buffer();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.n * s.inner + in;
          double dot = 0.0;
          for (std::int64_t i = 0; i < s.n; ++i) {
            const std::int64_t k = base + i * s.inner;
            dot += g[k] * py[k];
          }
          for (std::int64_t i = 0; i < s.n; ++i) {
            const std::int64_t k = base + i * s.inner;
            gx[k] += py[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---- convolution ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, Tape* tape) {
  if (input.rank() != 3 || kernels.rank() != 4 || input.dim(0) != kernels.dim(1)) {
    throw shape_error("conv2d: incompatible shapes " + input.shape_str() + " and " +
                      kernels.shape_str());
  }
  const auto c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const auto o = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kh > h || kw > w) {
    throw shape_error("conv2d: kernel " + kernels.shape_str() + " larger than input " +
                      input.shape_str());
  }
  const auto oh = h - kh + 1, ow = w - kw + 1;
  Tensor out = Tensor::zeros({o, oh, ow});
  const double* pi = input.data();
  const double* pk = kernels.data();
  double* po = out.data();
  auto in_at = [&](std::int64_t ci, std::int64_t y, std::int64_t x) {
    return pi[(ci * h + y) * w + x];
  };
  for (std::int64_t oc = 0; oc < o; ++oc) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::int64_t ci = 0; ci < c; ++ci) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const double* krow = pk + ((oc * c + ci) * kh + ky) * kw;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              acc += in_at(ci, y + ky, x + kx) * krow[kx];
            }
          }
        }
        po[(oc * oh + y) * ow + x] = acc;
      }
    }
  }
  if (tracked(tape, {&input, &kernels})) {
    out.set_requires_grad(true);
    tape->record([input, kernels, out, c, h, w, o, kh, kw, oh, ow]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      const double* pi = input.data();
      const double* pk = kernels.data();
      double* gi = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      double* gk = kernels.requires_grad() ? kernels.grad_buffer().data() : nullptr;
      for (std::int64_t oc = 0; oc < o; ++oc) {
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t x = 0; x < ow; ++x) {
            const double gv = g[(oc * oh + y) * ow + x];
            if (gv == 0.0) continue;
            for (std::int64_t ci = 0; ci < c; ++ci) {
              for (std::int64_t ky = 0; ky < kh; ++ky) {
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                  const std::int64_t kidx = ((oc * c + ci) * kh + ky) * kw + kx;
                  const std::int64_t iidx = (ci * h + y + ky) * w + x + kx;
                  if (gi) gi[iidx] += gv * pk[kidx];
                  if (gk) gk[kidx] += gv * pi[iidx];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- losses ---------------------------------------------------------------------

Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<std::int64_t>& targets,
                              double epsilon, Tape* tape) {
  if (logits.rank() != 2) {
    throw shape_error("cross_entropy_smoothed expects [batch x classes] logits, got " +
                      logits.shape_str());
  }
  if (epsilon < 0.0 || epsilon >= 1.0) {
    throw contract_error("label smoothing epsilon must lie in [0, 1)");
  }
  const auto batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != batch) {
    throw shape_error("target count does not match batch size");
  }
  for (auto t : targets) {
    if (t < 0 || t >= classes) {
      throw index_error("target index " + std::to_string(t) + " out of range [0, " +
                        std::to_string(classes) + ")");
    }
  }
  // Stable log-softmax; keep the probabilities for the backward pass.
  std::vector<double> probs(static_cast<std::size_t>(batch * classes));
  const double off_weight = classes > 1 ? epsilon / static_cast<double>(classes - 1) : 0.0;
  const double* pl = logits.data();
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* row = pl + b * classes;
    double mx = row[0];
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    double row_loss = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      const double logp = row[c] - lse;
      probs[static_cast<std::size_t>(b * classes + c)] = std::exp(logp);
      row_loss -= (c == targets[static_cast<std::size_t>(b)] ? 1.0 - epsilon : off_weight) * logp;
    }
    total += row_loss;
  }
  Tensor out = Tensor::from({1}, {total / static_cast<double>(batch)});
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([logits, out, targets, probs = std::move(probs), epsilon, off_weight, batch,
                  classes]() mutable {
      if (!out.has_grad()) return;
      const double go = out.grad()[0] / static_cast<double>(batch);
      auto& gl = logits.grad_buffer();
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < classes; ++c) {
          const std::size_t i = static_cast<std::size_t>(b * classes + c);
          const double w = c == targets[static_cast<std::size_t>(b)] ? 1.0 - epsilon : off_weight;
          gl[i] += go * (probs[i] - w);
        }
      }
    });
  }
  return out;
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& x, Tape* tape) {
  Tensor out = Tensor::from({1}, {CMapA(x.data(), x.numel()).sum()});
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      MMapA(x.grad_buffer().data(), x.numel()) += out.grad()[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x, Tape* tape) { return scale(sum(x, tape), 1.0 / static_cast<double>(x.numel()), tape); }

Tensor sum_axis(const Tensor& x, int axis, Tape* tape) {
  const AxisSplit s = split_at(x.shape(), axis, "sum_axis");
  Shape out_shape;
  for (std::size_t i = 0; i < x.shape().size(); ++i) {
    if (static_cast<int>(i) != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < s.n; ++i) acc += px[o * s.n * s.inner + i * s.inner + in];
      po[o * s.inner + in] = acc;
    }
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, s]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad_buffer();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const double gv = g[o * s.inner + in];
          for (std::int64_t i = 0; i < s.n; ++i) gx[o * s.n * s.inner + i * s.inner + in] += gv;
        }
      }
    });
  }
  return out;
}

// ---- gather / concat / slice ------------------------------------------------------

namespace {

std::int64_t row_width(const Tensor& t) { return t.numel() / t.dim(0); }

Shape with_rows(const Tensor& t, std::int64_t rows) {
  Shape s = t.shape();
  s[0] = rows;
  return s;
}

}  // namespace

Tensor rows(const Tensor& table, const std::vector<std::int64_t>& indices, Tape* tape) {
  if (table.rank() < 1) throw shape_error("rows expects rank >= 1 table");
  if (indices.empty()) throw contract_error("rows: empty index list");
  const std::int64_t n = table.dim(0), width = row_width(table);
  for (auto i : indices) {
    if (i < 0 || i >= n) {
      throw index_error("row index " + std::to_string(i) + " out of range [0, " +
                        std::to_string(n) + ")");
    }
  }
  Tensor out = Tensor::zeros(with_rows(table, static_cast<std::int64_t>(indices.size())));
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(table.data() + indices[b] * width, width, out.data() + static_cast<std::int64_t>(b) * width);
  }
  if (tape && table.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([table, out, indices, width]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gt = table.grad_buffer();
      for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::int64_t dst = indices[b] * width;
        const std::int64_t src = static_cast<std::int64_t>(b) * width;
        for (std::int64_t j = 0; j < width; ++j) gt[dst + j] += g[src + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw contract_error("concat_rows: no parts");
  const Shape& first = parts.front().shape();
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int>(first.size()) ||
        !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw shape_error("concat_rows: mismatched part shapes " + shape_str(first) + " vs " +
                        p.shape_str());
    }
    total += p.dim(0);
  }
  Tensor out = Tensor::zeros(with_rows(parts.front(), total));
  double* po = out.data();
  bool any_grad = false;
  for (const Tensor& p : parts) {
    std::copy_n(p.data(), p.numel(), po);
    po += p.numel();
    any_grad = any_grad || p.requires_grad();
  }
  if (tape && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      std::int64_t offset = 0;
      for (Tensor& p : parts) {
        if (p.requires_grad()) {
          auto& gp = p.grad_buffer();
          for (std::int64_t j = 0; j < p.numel(); ++j) gp[j] += g[offset + j];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len, Tape* tape) {
  if (x.rank() < 1 || start < 0 || len <= 0 || start + len > x.dim(0)) {
    throw shape_error("slice_rows: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") invalid for " + x.shape_str());
  }
  const std::int64_t width = row_width(x);
  Tensor out = Tensor::zeros(with_rows(x, len));
  std::copy_n(x.data() + start * width, len * width, out.data());
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, start, width]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad_buffer();
      for (std::int64_t j = 0; j < out.numel(); ++j) gx[start * width + j] += g[j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw contract_error("concat_cols: no parts");
  const std::int64_t m = parts.front().dim(0);
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw shape_error("concat_cols: mismatched part shapes");
    }
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, total});
  std::int64_t col = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    const std::int64_t w = p.dim(1);
    for (std::int64_t r = 0; r < m; ++r) {
      std::copy_n(p.data() + r * w, w, out.data() + r * total + col);
    }
    col += w;
    any_grad = any_grad || p.requires_grad();
  }
  if (tape && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out, m, total]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      std::int64_t col = 0;
      for (Tensor& p : parts) {
        const std::int64_t w = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = p.grad_buffer();
          for (std::int64_t r = 0; r < m; ++r) {
            for (std::int64_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + col + j];
          }
        }
        col += w;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len, Tape* tape) {
  if (x.rank() != 2 || start < 0 || len <= 0 || start + len > x.dim(1)) {
    throw shape_error("slice_cols: range [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") invalid for " + x.shape_str());
  }
  const std::int64_t m = x.dim(0), w = x.dim(1);
  Tensor out = Tensor::zeros({m, len});
  for (std::int64_t r = 0; r < m; ++r) {
    std::copy_n(x.data() + r * w + start, len, out.data() + r * len);
  }
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out, start, m, w, len]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad_buffer();
      for (std::int64_t r = 0; r < m; ++r) {
        for (std::int64_t j = 0; j < len; ++j) gx[r * w + start + j] += g[r * len + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw shape_error("reshape: cannot view " + x.shape_str() + " as " + shape_str(new_shape));
  }
  Tensor out = Tensor::from(std::move(new_shape), x.values());
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      MMapA(x.grad_buffer().data(), x.numel()) += CMapA(out.grad().data(), x.numel());
    });
  }
  return out;
}

// ---- layer norm --------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps, Tape* tape) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 ||
      gain.dim(0) != x.shape().back() || bias.dim(0) != x.shape().back()) {
    throw shape_error("layer_norm: shapes " + x.shape_str() + ", " + gain.shape_str() + ", " +
                      bias.shape_str() + " are inconsistent");
  }
  const std::int64_t h = x.shape().back();
  const std::int64_t rows_n = x.numel() / h;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<std::size_t>(rows_n));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (std::int64_t r = 0; r < rows_n; ++r) {
    const double* row = px + r * h;
    double mu = 0.0;
    for (std::int64_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::int64_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(h);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < h; ++j) {
      const double xh = (row[j] - mu) * is;
      xhat[static_cast<std::size_t>(r * h + j)] = xh;
      po[r * h + j] = pg[j] * xh + pb[j];
    }
  }
  if (tracked(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), h,
                  rows_n]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.grad();
      const double* pg = gain.data();
      double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      double* gg = gain.requires_grad() ? gain.grad_buffer().data() : nullptr;
      double* gb = bias.requires_grad() ? bias.grad_buffer().data() : nullptr;
      for (std::int64_t r = 0; r < rows_n; ++r) {
        const double* grow = g.data() + r * h;
        const double* xh = xhat.data() + r * h;
        if (gg || gb) {
          for (std::int64_t j = 0; j < h; ++j) {
            if (gg) gg[j] += grow[j] * xh[j];
            if (gb) gb[j] += grow[j];
          }
        }
        if (gx) {
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < h; ++j) {
            const double dxh = grow[j] * pg[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<double>(h);
          m2 /= static_cast<double>(h);
          const double is = inv_std[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < h; ++j) {
            const double dxh = grow[j] * pg[j];
            gx[r * h + j] += is * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace kgc
