#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sate {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Log-domain "impossible" marker. Kept finite so the all-finite invariant
// holds; exp(k_neg_inf - x) underflows to exactly 0 for any plausible x.
inline constexpr float k_neg_inf = -1e30f;

// When enabled, every op scans its output for NaN/Inf and throws.
void set_debug_checks(bool enabled);
bool debug_checks_enabled();

class Tape;

// Dense row-major float32 tensor with an optional gradient buffer.
// Copies share storage; deep copies go through clone().
class Tensor {
 public:
  Tensor();
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor scalar(float value);

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const;
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  const std::vector<float>& values() const { return impl_->data; }
  std::vector<float>& raw() { return impl_->data; }

  float item() const;
  float at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
  float at(int i, int j) const;
  void set(int i, float v) { impl_->data[static_cast<size_t>(i)] = v; }
  void set(int i, int j, float v);

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<float>& grad() const;
  float* grad_data();
  void zero_grad();
  // Allocates the grad buffer (zeros) if absent.
  void ensure_grad();

  Tensor clone() const;
  Tensor detached() const;  // shares data, drops grad/requires_grad/tape id

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const;

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    uint64_t tape_epoch = 0;
    int node_id = -1;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

// Records operations in execution order; the backward pass replays them once,
// in reverse. One tape per training thread.
class Tape {
 public:
  struct OpRecord {
    std::vector<int> inputs;  // node ids, all < output by construction
    int output = -1;
    std::function<void()> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers the op. Inputs that are not yet on the tape are registered as
  // leaves first, so topological order (inputs precede output) always holds.
  void record(std::initializer_list<Tensor> inputs, const Tensor& output,
              std::function<void()> backward);
  void record(const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once, in
  // reverse order. Grads accumulate across calls until zeroed or cleared.
  void backward(const Tensor& loss);

  void clear();
  size_t num_ops() const { return ops_.size(); }
  size_t num_nodes() const { return nodes_.size(); }
  const std::vector<OpRecord>& ops() const { return ops_; }

  static Tape* active();

 private:
  friend class TapeScope;
  int node_id_for(const Tensor& t);

  std::vector<OpRecord> ops_;
  std::vector<std::shared_ptr<Tensor::Impl>> nodes_;
  uint64_t epoch_;
};

// RAII: makes a tape the active recording target for this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Throws NumericError if t holds NaN/Inf and debug checks are on.
void debug_check(const Tensor& t, const char* op_name);

}  // namespace sate
