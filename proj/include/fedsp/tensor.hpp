#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsp {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised by any op whose operands have incompatible shapes. The message
/// names the op and the offending dimensions.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::runtime_error(op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Dense row-major float64 tensor with an optional gradient buffer.
///
/// `Tensor` is a shared handle: copies alias the same storage. Use `clone()`
/// for a deep copy. A default-constructed tensor is null.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  explicit operator bool() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Shallow const: parameters are updated in place through any handle.
  std::span<double> mutable_data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  /// Allocates a zero gradient buffer if absent and returns it.
  std::span<double> ensure_grad() const;
  void zero_grad() const;
  void clear_grad() const;

  std::uint64_t id() const;
  const std::string& name() const;
  void set_name(std::string name) const;

  Tensor clone() const;
  /// Fresh tensor holding a copy of the values, outside any graph.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable ops. Each thread owns one active tape;
/// ops append to it whenever an operand requires a gradient.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Entry {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  static Tape& active();

  void record(const char* op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const Tensor& t) const;
  void clear() { entries_.clear(); }

  /// Reverse sweep from a scalar loss. Gradients of every tape tensor are
  /// reset first, so each call yields fresh gradients. The tape is cleared
  /// afterwards.
  void backward(const Tensor& loss);

 private:
  std::vector<Entry> entries_;
};

/// Runs backward on the calling thread's active tape.
void backward(const Tensor& loss);

/// While alive, ops on this thread are not recorded.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace fedsp
