// Copyright 2026 The HFUS Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hfus/error.hpp"

namespace hfus {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  Tape* tape = nullptr;  // set for op outputs recorded on a tape

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of doubles with shared ownership. Copies are shallow;
// use clone() for an independent buffer.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : data_(std::make_shared<detail::TensorData>()) {
    if (shape.empty()) throw ShapeError("tensor: shape must have at least one dimension");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == 0) {
        throw ShapeError("tensor: dimension " + std::to_string(i) + " of " + shape_str(shape) +
                         " is zero");
      }
    }
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t dim(std::size_t i) const { return data_->shape.at(i); }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  bool requires_grad() const { return data_->requires_grad; }

  std::span<const double> values() const { return data_->values; }
  // Direct write access, meant for parameter initialization and optimizers.
  std::span<double> mutable_values() { return data_->values; }
  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return data_->values[0];
  }
  double operator[](std::size_t i) const { return data_->values[i]; }

  // Accumulated gradient; empty span when nothing has flowed into this tensor.
  std::span<const double> grad() const { return data_->grad; }
  void zero_grad() { std::fill(data_->grad.begin(), data_->grad.end(), 0.0); }

  Tensor clone(bool requires_grad = false) const {
    return Tensor(data_->shape, data_->values, requires_grad);
  }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  const std::shared_ptr<detail::TensorData>& data() const { return data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

// Ordered record of differentiable ops. Constructing a Tape makes it the active
// tape of the current thread until it is destroyed; ops record onto the active
// tape whenever one of their inputs requires a gradient. Tapes nest.
class Tape {
 public:
  using Backward = std::function<void(const std::vector<double>& grad_out)>;

  Tape() : previous_(active_) { active_ = this; }
  ~Tape() {
    clear();
    active_ = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  std::size_t size() const { return nodes_.size(); }

  void record(const std::shared_ptr<detail::TensorData>& out, Backward backward) {
    out->requires_grad = true;
    out->tape = this;
    nodes_.push_back({out, std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded node once, newest first.
  // Gradients are summed into the buffers of all tensors that require them.
  // The tape is consumed.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.data()->tape != this) {
      throw TapeError("backward: tensor was not produced on this tape");
    }
    if (loss.numel() != 1) {
      throw TapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    loss.data()->ensure_grad();
    loss.data()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // not on a path to the loss
      it->backward(it->out->grad);
    }
    clear();
  }

  void clear() {
    for (auto& node : nodes_) node.out->tape = nullptr;
    nodes_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    Backward backward;
  };

  std::vector<Node> nodes_;
  Tape* previous_;
  static inline thread_local Tape* active_ = nullptr;
};

// Backward through the tape that produced `loss`.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.data()->tape == nullptr) {
    throw TapeError("backward: tensor is detached (not produced under an active tape)");
  }
  loss.data()->tape->backward(loss);
}

namespace detail {

// Returns the tape an op with these inputs should record on, or nullptr.
inline Tape* tracking_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

inline Tape* tracking_tape(std::span<const Tensor> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
  }
}

// Adds g into input's gradient buffer when the input participates in autodiff.
inline void accumulate(const Tensor& input, std::span<const double> g) {
  auto& d = *input.data();
  if (!d.requires_grad) return;
  d.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) d.grad[i] += g[i];
}

}  // namespace detail

}  // namespace hfus
