#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gdt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// Cache-line aligned storage. Vectorized kernels pick their loop peeling from
/// the buffer address, so a fixed alignment keeps results bit-identical across
/// allocations and runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty when absent
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor of float64 values.
///
/// A Tensor is a shared handle: copies alias the same storage. Values produced by
/// an operation are never modified afterwards; only leaf tensors (parameters) are
/// updated in place through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<double> grad_buffer();
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy detached from any tape.
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct TapeNode;
using BackwardFn = std::function<void(const TapeNode&)>;

struct TapeNode {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

/// Ordered record of differentiable operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the list is topologically sorted.
/// backward() may run once per arming; reset_gradients() zeroes every gradient the
/// tape touched and re-arms it, and clear() drops all nodes.
class Tape {
 public:
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  void backward(const Tensor& loss);
  void reset_gradients();
  void clear();

  std::size_t size() const { return nodes_.size(); }
  std::span<const TapeNode> nodes() const { return nodes_; }
  bool consumed() const { return consumed_; }

 private:
  std::vector<TapeNode> nodes_;
  bool consumed_ = false;
};

/// Installs a tape as the calling thread's recording target for its lifetime.
/// Operations executed with no active tape are not recorded.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Convenience wrapper: backward on the currently active tape.
void backward(Tape& tape, const Tensor& loss);

}  // namespace gdt
