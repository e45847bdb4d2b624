#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "ega/common.hpp"

namespace ega {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float32 tensor. Gradient buffer exists iff requires_grad;
// ops accumulate into it, zeroing is the owner's job (the trainer between
// steps, tests explicitly).
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;
  // scalar reductions stash a double copy of their value here; numerical
  // test oracles difference against it instead of the float32 payload
  double precise = std::numeric_limits<double>::quiet_NaN();

  static TensorPtr make(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + detail::shape_str(shape));
      n *= d;
    }
    t->shape = std::move(shape);
    t->data.assign(size_t(n), 0.0f);
    t->requires_grad = requires_grad;
    if (requires_grad) t->grad.assign(size_t(n), 0.0f);
    return t;
  }

  static TensorPtr from(std::vector<int> shape, std::vector<float> values, bool requires_grad = false) {
    auto t = make(std::move(shape), requires_grad);
    if (values.size() != t->data.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(t->shape));
    t->data = std::move(values);
    return t;
  }

  static TensorPtr scalar(float v, bool requires_grad = false) {
    auto t = make({1}, requires_grad);
    t->data[0] = v;
    return t;
  }

  int64_t numel() const { return int64_t(data.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  int rank() const { return int(shape.size()); }
  bool is_scalar() const { return numel() == 1; }
  float value() const {
    if (!is_scalar()) throw ContractError("value() requires a scalar tensor, shape " + detail::shape_str(shape));
    return data[0];
  }
  double value_precise() const {
    if (!is_scalar()) throw ContractError("value_precise() requires a scalar tensor");
    return std::isnan(precise) ? double(data[0]) : precise;
  }
  void set_scalar(double v) {
    data[0] = float(v);
    precise = v;
  }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg && grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }

  TensorPtr clone() const {
    auto t = std::make_shared<Tensor>(*this);
    return t;
  }
};

// Records ops in execution order; backward replays them in reverse exactly
// once. A Tape owns its nodes and keeps every participating tensor alive.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward;
  };

  void record(const char* op, std::vector<TensorPtr> inputs, TensorPtr output,
              std::function<void()> backward) {
    if (consumed_) throw GraphError("cannot record onto a consumed graph; re-execute the forward pass");
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from loss.
  void backward(const TensorPtr& loss) {
    if (consumed_) throw GraphError("backward() called twice on the same graph without re-execution");
    if (!loss || !loss->is_scalar())
      throw GraphError("backward() requires a scalar loss tensor");
    bool found = false;
    for (const auto& n : nodes_)
      if (n.output == loss) { found = true; break; }
    if (!found) throw GraphError("loss tensor is not an output of this graph");
    consumed_ = true;
    if (!loss->requires_grad) return;
    loss->grad[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->requires_grad && it->backward) it->backward();
    }
  }

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline bool all_finite(const std::vector<float>& v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace ega
