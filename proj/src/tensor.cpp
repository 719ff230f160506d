#include "sate/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace sate {

namespace {
std::atomic<bool> g_debug_checks{false};
thread_local Tape* g_active_tape = nullptr;
std::atomic<uint64_t> g_epoch_counter{1};
}  // namespace

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled); }
bool debug_checks_enabled() { return g_debug_checks.load(); }

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<Impl>()) {}

Tensor Tensor::zeros(Shape shape) {
  auto impl = std::make_shared<Impl>();
  int64_t n = numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0f);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  int64_t n = numel(shape);
  if (n != static_cast<int64_t>(data.size()))
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw ShapeError("dim index out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(int i, int j) const {
  return impl_->data[static_cast<size_t>(i) * static_cast<size_t>(impl_->shape[1]) +
                     static_cast<size_t>(j)];
}

void Tensor::set(int i, int j, float v) {
  impl_->data[static_cast<size_t>(i) * static_cast<size_t>(impl_->shape[1]) +
              static_cast<size_t>(j)] = v;
}

const std::vector<float>& Tensor::grad() const {
  if (impl_->grad.empty())
    throw ContractError("gradient not populated; run backward() first");
  return impl_->grad;
}

float* Tensor::grad_data() {
  ensure_grad();
  return impl_->grad.data();
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
}

Tensor Tensor::clone() const {
  Tensor t = from_data(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::detached() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
  for (float v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

void debug_check(const Tensor& t, const char* op_name) {
  if (!debug_checks_enabled()) return;
  if (!t.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + op_name);
}

Tape::Tape() : epoch_(g_epoch_counter.fetch_add(1)) {}

Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

int Tape::node_id_for(const Tensor& t) {
  if (t.impl_->tape_epoch == epoch_) return t.impl_->node_id;
  int id = static_cast<int>(nodes_.size());
  t.impl_->tape_epoch = epoch_;
  t.impl_->node_id = id;
  nodes_.push_back(t.impl_);
  return id;
}

void Tape::record(std::initializer_list<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward) {
  record(std::vector<Tensor>(inputs), output, std::move(backward));
}

void Tape::record(const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> backward) {
  OpRecord rec;
  rec.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) rec.inputs.push_back(node_id_for(in));
  if (output.impl_->tape_epoch == epoch_)
    throw ContractError("tensor recorded as the output of two operations");
  rec.output = node_id_for(output);
  rec.backward = std::move(backward);
  ops_.push_back(std::move(rec));
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  if (loss.impl_->tape_epoch != epoch_)
    throw ContractError("loss was not produced on this tape");
  // Leaves accumulate across calls; op outputs carry per-pass gradients and
  // must start from zero or a second pass would double-propagate.
  for (const OpRecord& op : ops_) {
    auto& g = nodes_[static_cast<size_t>(op.output)]->grad;
    std::fill(g.begin(), g.end(), 0.0f);
  }
  loss.impl_->grad.assign(1, 1.0f);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (it->backward) it->backward();
  }
}

void Tape::clear() {
  ops_.clear();
  nodes_.clear();
  epoch_ = g_epoch_counter.fetch_add(1);
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace sate
