#include "crab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "crab/errors.hpp"

namespace crab {

namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::from(std::initializer_list<Real> values) {
  return Tensor({values.size()}, std::vector<Real>(values));
}

Tensor Tensor::from(Shape shape, std::initializer_list<Real> values) {
  return Tensor(std::move(shape), std::vector<Real>(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  const auto& s = shape();
  auto r = static_cast<std::ptrdiff_t>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + shape_str(s));
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::size() const { return numel(shape()); }

std::span<Real> Tensor::data() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

std::span<const Real> Tensor::data() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

Real Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Real Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v >= s[i]) throw DimensionError("index out of range for " + shape_str(s));
    flat = flat * s[i] + v;
    ++i;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("use of an undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<Real> Tensor::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<Real> Tensor::ensure_grad() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), Real(0));
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), Real(0));
}

Tensor Tensor::clone() const {
  auto copy = std::make_shared<detail::TensorImpl>();
  copy->shape = shape();
  copy->data = impl_->data;
  copy->grad = impl_->grad;
  copy->requires_grad = impl_->requires_grad;
  return Tensor(std::move(copy));
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  for (auto& op : ops_) {
    op.output->tape = nullptr;
    op.output->node = -1;
  }
  g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<Tensor> inputs, Tensor& output, BackwardFn fn) {
  Op op;
  op.inputs.reserve(inputs.size());
  for (auto& t : inputs) op.inputs.push_back(t.impl());
  op.output = output.impl();
  op.fn = std::move(fn);
  output.impl()->requires_grad = true;
  output.impl()->tape = this;
  output.impl()->node = static_cast<std::ptrdiff_t>(ops_.size());
  ops_.push_back(std::move(op));
}

void Tape::backward(const Tensor& loss) {
  auto& impl = *loss.impl();
  if (impl.data.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(impl.shape));
  }
  if (impl.tape != this) throw ContractError("loss was not produced on this tape");

  // Intermediate gradients restart from zero; leaf gradients accumulate.
  for (auto& op : ops_) op.output->grad.clear();
  impl.grad.assign(1, Real(1));

  auto last = static_cast<std::size_t>(impl.node);
  for (std::size_t k = last + 1; k-- > 0;) {
    auto& op = ops_[k];
    if (op.output->grad.empty()) continue;
    op.fn(op.output->grad);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  auto* tape = loss.impl()->tape;
  if (tape == nullptr) throw ContractError("backward() needs a loss produced on an active tape");
  tape->backward(loss);
}

}  // namespace crab
