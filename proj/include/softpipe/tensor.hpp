#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// Operations executed while a Tape is active (see Tape::Scope) and touching
// at least one tensor that requires a gradient are recorded on that tape.
// Tape::backward replays the recorded backward rules in reverse order.
// Without an active tape nothing is recorded, which is the inference path.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "softpipe/errors.hpp"

namespace softpipe {

using Shape = std::vector<std::size_t>;
using TokenIds = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  using BackwardFn = std::function<void(TensorNode&)>;

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn backward;

  // Zero-initialised on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; for initialisation, loading and finite differences.
  std::span<T> mutable_data() { return node_->value; }

  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient as a dense vector; zeros when no gradient has reached this tensor.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  // Value copy without history.
  Tensor detach() const { return from(shape(), node_->value); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Makes a tape the target for recording on the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();
  // Installs `tape` (possibly null) as the active tape; returns the previous one.
  static Tape* swap_active(Tape* tape);

  void record(std::shared_ptr<TensorNode<T>> node);
  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  // requires a gradient. Calling it twice without reset() is a StateError.
  void backward(const Tensor<T>& loss);
  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool used() const { return used_; }

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
  bool used_ = false;
};

// Suspends recording on the current thread, e.g. for inference inside a
// training step.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::swap_active(nullptr)) {}
  ~NoGradScope() { Tape<T>::swap_active(previous_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Builds an op result. When a tape is active and any input requires a
// gradient the result is recorded with `backward`; otherwise it is a plain
// value. Backward rules read `out.grad` and accumulate into
// `out.inputs[i]->grad_buffer()` for inputs with requires_grad set.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      typename TensorNode<T>::BackwardFn backward);

// ---- primitives ----------------------------------------------------------

// a: [m x k], b: [k x n] -> [m x n]; b may also be a vector [k] -> [m].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
// a: [m x n] plus a row vector b: [n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& logits, std::size_t axis);
// Normalises over the last axis, then applies gain and bias of that length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5));
// Looks up column ids[i] of a [D x V] table into row i of the [len x D] result.
template <typename T> Tensor<T> embedding_lookup(const Tensor<T>& table, const TokenIds& ids);
template <typename T>
Tensor<T> concatenate(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
// Half-open range [begin, end) along axis 0 or 1 of a matrix.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
// Row r of a matrix as a vector.
template <typename T> Tensor<T> select_row(const Tensor<T>& a, std::size_t r);
// Inverted dropout; identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, T rate, std::mt19937_64& rng);

// Token-mean negative log-likelihood over unmasked steps.
// log_probs: [T x V]; targets and mask have length T. An all-false mask
// yields zero.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& log_probs, const TokenIds& targets,
                        const std::vector<bool>& mask);

// ---- finite-difference oracle -------------------------------------------

// Compares the tape gradient of `f` w.r.t. every element of `params` with a
// central difference. The per-element error is |a - n| / max(|a|, |n|, floor),
// so gradients smaller than `floor` are judged on absolute error.
struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t n_checked = 0;
};

GradCheckResult grad_check_detail(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                                  double eps = 1e-5, double floor = 1e-8);
inline double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                         double eps = 1e-5, double floor = 1e-8) {
  return grad_check_detail(f, std::move(params), eps, floor).max_rel_error;
}

}  // namespace softpipe
