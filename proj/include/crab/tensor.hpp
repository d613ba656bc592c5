#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crab {

#ifdef CRAB_USE_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  Tape* tape = nullptr;  // set while the producing op is recorded
  std::ptrdiff_t node = -1;
};

}  // namespace detail

// Dense row-major tensor. Copies share storage (handle semantics); use
// clone() for a deep copy. A tensor with requires_grad and no producing op is
// a leaf whose gradient accumulates across backward() calls.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor from(std::initializer_list<Real> values);
  static Tensor from(Shape shape, std::initializer_list<Real> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<Real> data();
  std::span<const Real> data() const;
  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();
  // Allocates (zero-filled) gradient storage if missing.
  std::span<Real> ensure_grad();

  Tensor clone() const;
  // Same values, no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Receives the gradient of the op output and accumulates into inputs.
using BackwardFn = std::function<void(std::span<const Real> out_grad)>;

// Records differentiable ops for one step. Constructing a Tape makes it the
// active tape of the calling thread until it is destroyed; tapes nest as a
// stack. Ops only record when some input requires grad and a tape is active,
// so code running without a tape is pure inference.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::vector<Tensor> inputs, Tensor& output, BackwardFn fn);
  void backward(const Tensor& loss);

  std::size_t size() const { return ops_.size(); }

 private:
  struct Op {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Op> ops_;
  Tape* previous_ = nullptr;
};

// Runs reverse-mode differentiation from a scalar produced on an active tape.
void backward(const Tensor& loss);

// Number of forward primitives executed on this thread. Used to confirm
// that code paths (e.g. training-only heads) are skipped.
std::uint64_t op_counter();

}  // namespace crab
