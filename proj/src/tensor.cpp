#include "softpipe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace softpipe {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMajor<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
TensorNode<T>& in(TensorNode<T>& out, std::size_t i) {
  return *out.inputs[i];
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item(): tensor " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
  require_rank(shape(), 2, "at");
  return node_->value.at(r * dim(1) + c);
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
  return node_->grad;
}

// ---- Tape -------------------------------------------------------------------

template <typename T>
Tape<T>::~Tape() {
  if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_slot<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot<T>();
}

template <typename T>
Tape<T>* Tape<T>::swap_active(Tape* tape) {
  Tape* previous = active_slot<T>();
  active_slot<T>() = tape;
  return previous;
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorNode<T>> node) {
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (used_) throw StateError("backward: tape already replayed; call reset() first");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss is not on a recorded tape");
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("backward: non-finite loss " + std::to_string(static_cast<double>(loss.item())));
  }
  used_ = true;
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode<T>& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  used_ = false;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      typename TensorNode<T>::BackwardFn backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return out;
  bool track = false;
  for (const auto& t : inputs) track = track || t.requires_grad();
  if (!track) return out;
  TensorNode<T>* node = out.node();
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
  node->backward = std::move(backward);
  tape->record(out.node_ptr());
  return out;
}

// ---- primitives -------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  const bool vec = b.rank() == 1;
  if ((!vec && b.rank() != 2) || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(vec ? 1 : b.dim(1));
  std::vector<T> value(static_cast<std::size_t>(m * n));
  MutMap<T>(value.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  Shape shape = vec ? Shape{a.dim(0)} : Shape{a.dim(0), b.dim(1)};
  return make_result<T>(std::move(shape), std::move(value), {a, b}, [m, k, n](TensorNode<T>& out) {
    ConstMap<T> dc(out.grad.data(), m, n);
    TensorNode<T>& an = in(out, 0);
    TensorNode<T>& bn = in(out, 1);
    if (an.requires_grad) {
      MutMap<T>(an.grad_buffer().data(), m, k).noalias() += dc * ConstMap<T>(bn.value.data(), k, n).transpose();
    }
    if (bn.requires_grad) {
      MutMap<T>(bn.grad_buffer().data(), k, n).noalias() += ConstMap<T>(an.value.data(), m, k).transpose() * dc;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> value(r * c);
  auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) value[j * r + i] = src[i * c + j];
  return make_result<T>({c, r}, std::move(value), {a}, [r, c](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += out.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  std::vector<T> value(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(value), {a, b}, [](TensorNode<T>& out) {
    for (std::size_t k = 0; k < 2; ++k) {
      TensorNode<T>& n = in(out, k);
      if (!n.requires_grad) continue;
      auto g = n.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "add_bias");
  require_rank(b.shape(), 1, "add_bias");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("add_bias: " + shape_str(a.shape()) + " vs bias " + shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> value(a.data().begin(), a.data().end());
  auto bias = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) value[r * cols + c] += bias[c];
  return make_result<T>(a.shape(), std::move(value), {a, b}, [rows, cols](TensorNode<T>& out) {
    TensorNode<T>& an = in(out, 0);
    TensorNode<T>& bn = in(out, 1);
    if (an.requires_grad) {
      auto g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    }
    if (bn.requires_grad) {
      auto g = bn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += out.grad[r * cols + c];
    }
  });
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "multiply");
  std::vector<T> value(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(value), {a, b}, [](TensorNode<T>& out) {
    TensorNode<T>& an = in(out, 0);
    TensorNode<T>& bn = in(out, 1);
    if (an.requires_grad) {
      auto g = an.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto g = bn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * an.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> value(a.data().begin(), a.data().end());
  for (auto& v : value) v *= factor;
  return make_result<T>(a.shape(), std::move(value), {a}, [factor](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_result<T>({}, {total}, {a}, [](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (auto& v : g) v += out.grad[0];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> value(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < value.size(); ++i) {
    const T v = x[i];
    value[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return make_result<T>(a.shape(), std::move(value), {a}, [](TensorNode<T>& out) {
    TensorNode<T>& an = in(out, 0);
    auto g = an.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = an.value[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      g[i] += out.grad[i] * d;
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis) {
  const AxisSplit s = split_axis(logits.shape(), axis, "softmax");
  std::vector<T> value(logits.numel());
  auto x = logits.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(x[base + k * s.inner] - mx);
        value[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) value[base + k * s.inner] /= total;
    }
  }
  return make_result<T>(logits.shape(), std::move(value), {logits}, [s](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t j = base + k * s.inner;
          dot += out.grad[j] * out.value[j];
        }
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t j = base + k * s.inner;
          g[j] += out.value[j] * (out.grad[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, std::size_t axis) {
  const AxisSplit s = split_axis(logits.shape(), axis, "log_softmax");
  std::vector<T> value(logits.numel());
  auto x = logits.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = x[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(x[base + k * s.inner] - mx);
      const T log_total = std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) {
        const std::size_t j = base + k * s.inner;
        value[j] = x[j] - mx - log_total;
      }
    }
  }
  return make_result<T>(logits.shape(), std::move(value), {logits}, [s](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T total = T(0);
        for (std::size_t k = 0; k < s.extent; ++k) total += out.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t j = base + k * s.inner;
          g[j] += out.grad[j] - std::exp(out.value[j]) * total;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  require_rank(gain.shape(), 1, "layer_norm gain");
  require_rank(bias.shape(), 1, "layer_norm bias");
  if (gain.dim(0) != n || bias.dim(0) != n) {
    throw DimensionError("layer_norm: feature size " + std::to_string(n) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> value(x.numel());
  auto normed = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mean = T(0);
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = T(0);
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (row[c] - mean) * inv;
      (*normed)[r * n + c] = h;
      value[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return make_result<T>(x.shape(), std::move(value), {x, gain, bias},
                        [rows, n, normed, inv_std](TensorNode<T>& out) {
    TensorNode<T>& xn = in(out, 0);
    TensorNode<T>& gn = in(out, 1);
    TensorNode<T>& bn = in(out, 2);
    const auto& h = *normed;
    if (gn.requires_grad) {
      auto g = gn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += out.grad[r * n + c] * h[r * n + c];
    }
    if (bn.requires_grad) {
      auto g = bn.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += out.grad[r * n + c];
    }
    if (xn.requires_grad) {
      auto g = xn.grad_buffer();
      std::vector<T> dh(n);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_dh = T(0), mean_dh_h = T(0);
        for (std::size_t c = 0; c < n; ++c) {
          dh[c] = out.grad[r * n + c] * gn.value[c];
          mean_dh += dh[c];
          mean_dh_h += dh[c] * h[r * n + c];
        }
        mean_dh /= T(n);
        mean_dh_h /= T(n);
        const T inv = (*inv_std)[r];
        for (std::size_t c = 0; c < n; ++c) {
          g[r * n + c] += inv * (dh[c] - mean_dh - h[r * n + c] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const TokenIds& ids) {
  require_rank(table.shape(), 2, "embedding_lookup");
  const std::size_t d = table.dim(0), v = table.dim(1);
  std::vector<T> value(ids.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw IndexError("embedding_lookup: token id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(v));
    }
    for (std::size_t r = 0; r < d; ++r) value[i * d + r] = tv[r * v + static_cast<std::size_t>(ids[i])];
  }
  return make_result<T>({ids.size(), d}, std::move(value), {table}, [ids, d, v](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t r = 0; r < d; ++r) g[r * v + static_cast<std::size_t>(ids[i])] += out.grad[i * d + r];
  });
}

template <typename T>
Tensor<T> concatenate(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concatenate: no inputs");
  const Shape& first = parts.front().shape();
  Shape shape = first;
  const AxisSplit s0 = split_axis(first, axis, "concatenate");
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) ok = i == axis || ps[i] == first[i];
    if (!ok) {
      throw DimensionError("concatenate: " + shape_str(ps) + " incompatible with " + shape_str(first) +
                           " along axis " + std::to_string(axis));
    }
    extents.push_back(ps[axis]);
    total += ps[axis];
  }
  shape[axis] = total;
  std::vector<T> value(shape_numel(shape));
  const std::size_t outer = s0.outer, inner = s0.inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * block, block, value.data() + o * total * inner + offset * inner);
    }
    offset += extents[k];
  }
  return make_result<T>(std::move(shape), std::move(value), parts,
                        [extents, outer, inner, total](TensorNode<T>& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      TensorNode<T>& pn = in(out, k);
      const std::size_t block = extents[k] * inner;
      if (pn.requires_grad) {
        auto g = pn.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < block; ++j) g[o * block + j] += out.grad[o * total * inner + off * inner + j];
      }
      off += extents[k];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> value(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(value), {a}, [](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(a.shape(), axis, "slice");
  if (begin > end || end > s.extent) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(a.shape()) + " axis " + std::to_string(axis));
  }
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t len = end - begin;
  std::vector<T> value(shape_numel(shape));
  auto src = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.data() + (o * s.extent + begin) * s.inner, len * s.inner, value.data() + o * len * s.inner);
  }
  return make_result<T>(std::move(shape), std::move(value), {a}, [s, begin, len](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < len * s.inner; ++j) g[(o * s.extent + begin) * s.inner + j] += out.grad[o * len * s.inner + j];
  });
}

template <typename T>
Tensor<T> select_row(const Tensor<T>& a, std::size_t r) {
  require_rank(a.shape(), 2, "select_row");
  if (r >= a.dim(0)) {
    throw IndexError("select_row: row " + std::to_string(r) + " outside " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  std::vector<T> value(a.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                       a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  return make_result<T>({n}, std::move(value), {a}, [r, n](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t c = 0; c < n; ++c) g[r * n + c] += out.grad[c];
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, T rate, std::mt19937_64& rng) {
  if (rate < T(0) || rate >= T(1)) throw ContractError("dropout: rate must be in [0,1)");
  if (rate == T(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T kept_scale = T(1) / (T(1) - rate);
  std::vector<T> factors(a.numel());
  for (auto& f : factors) f = keep(rng) ? kept_scale : T(0);
  std::vector<T> value(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = x[i] * factors[i];
  return make_result<T>(a.shape(), std::move(value), {a}, [factors = std::move(factors)](TensorNode<T>& out) {
    auto g = in(out, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * factors[i];
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& log_probs, const TokenIds& targets, const std::vector<bool>& mask) {
  require_rank(log_probs.shape(), 2, "cross_entropy");
  const std::size_t steps = log_probs.dim(0), vocab = log_probs.dim(1);
  if (targets.size() != steps || mask.size() != steps) {
    throw DimensionError("cross_entropy: " + std::to_string(steps) + " steps vs " +
                         std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t count = 0;
  T total = T(0);
  auto lp = log_probs.data();
  for (std::size_t t = 0; t < steps; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[t]) + " at step " +
                       std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
    total -= lp[t * vocab + static_cast<std::size_t>(targets[t])];
    ++count;
  }
  const T loss = count ? total / T(count) : T(0);
  return make_result<T>({}, {loss}, {log_probs}, [targets, mask, vocab, count](TensorNode<T>& out) {
    if (!count) return;
    auto g = in(out, 0).grad_buffer();
    const T w = out.grad[0] / T(count);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (mask[t]) g[t * vocab + static_cast<std::size_t>(targets[t])] -= w;
    }
  });
}

// ---- grad_check -----------------------------------------------------------

GradCheckResult grad_check_detail(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                                  double eps, double floor) {
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = f();
    tape.backward(loss);
  }
  auto eval = [&f]() {
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };
  GradCheckResult result;
  for (auto& p : params) {
    const std::vector<double> analytic = p.grad();
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = eval();
      values[i] = saved - eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double diff = std::abs(a - numeric);
      result.max_abs_error = std::max(result.max_abs_error, diff);
      result.max_rel_error = std::max(result.max_rel_error, diff / std::max({std::abs(a), std::abs(numeric), floor}));
      ++result.n_checked;
    }
  }
  return result;
}

#define SOFTPIPE_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                           \
  template class Tape<T>;                                                                             \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,             \
                                    typename TensorNode<T>::BackwardFn);                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> multiply<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                   \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                        \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                       \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&, const TokenIds&);                          \
  template Tensor<T> concatenate<T>(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                             \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);               \
  template Tensor<T> select_row<T>(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> dropout<T>(const Tensor<T>&, T, std::mt19937_64&);                               \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const TokenIds&, const std::vector<bool>&);

SOFTPIPE_INSTANTIATE(float)
SOFTPIPE_INSTANTIATE(double)

#undef SOFTPIPE_INSTANTIATE

}  // namespace softpipe
