#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace segkan {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Buffer = Eigen::ArrayXd;

std::string shape_str(const Shape& s);
Index shape_size(const Shape& s);

class Array;

namespace detail {
struct ArrayImpl;
std::shared_ptr<ArrayImpl> impl_of(const Array& a);
}

// Dense f64 array in row-major order with optional reverse-mode gradient
// tracking. Copies are shallow handles to a shared payload; the payload is
// treated as immutable once it has entered an op, except through values_mut()
// (intended for optimizer updates between backward passes).
class Array {
 public:
  Array() = default;

  static Array zeros(Shape shape, bool requires_grad = false);
  static Array full(Shape shape, double value, bool requires_grad = false);
  static Array scalar(double value, bool requires_grad = false);
  static Array from_data(Shape shape, Buffer data, bool requires_grad = false);
  static Array from_data(Shape shape, const std::vector<double>& data,
                         bool requires_grad = false);

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const;
  Index rank() const;
  Index size() const;

  const Buffer& values() const;
  // Direct access to the payload; used by the optimizer and checkpoint I/O.
  // Must not be called between recording an op and running backward.
  Buffer& values_mut();

  double item() const;  // rank-0 or single-element convenience accessor

  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  const Buffer& grad() const;
  void zero_grad();

  // True when this array is an op output still attached to the live graph.
  bool attached() const;

 private:
  friend Array make_from_impl(std::shared_ptr<detail::ArrayImpl> impl);
  friend std::shared_ptr<detail::ArrayImpl> detail::impl_of(const Array& a);
  std::shared_ptr<detail::ArrayImpl> impl_;
};

// Backward rule callback for one recorded op. `upstream` is dL/d(output) as a
// flat buffer; implementations call `accumulate(i, g)` to add the gradient
// contribution for input i (flat, same length as that input).
using GradSink = std::function<void(std::size_t input_index, const Buffer& grad)>;
using BackwardFn = std::function<void(const Buffer& upstream, const GradSink& accumulate)>;

// Records one differentiable op on the active graph. The value must already be
// computed; recording only happens when gradients can flow from the inputs.
// Inputs that carry no gradient are treated as constants.
Array custom_op(const std::string& kind, const std::vector<Array>& inputs,
                Shape out_shape, Buffer out_values, BackwardFn backward);

// Evaluates value-only (no graph recording) for the lifetime of the guard.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

enum class EwKind { add, sub, mul };
enum class UnaryKind { sigmoid, tanh, silu, sin, cos, neg, recip };
enum class ReduceKind { sum, mean };

// Elementwise binary ops. Shapes must match exactly, or one operand may be
// rank-0 (the only supported broadcast).
Array elementwise(const Array& a, const Array& b, EwKind kind);
Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);

Array matmul(const Array& a, const Array& b);

// 3D convolution over [C_in, D, H, W] with kernel [C_out, C_in, kd, kh, kw],
// zero padding. Output extent: floor((D + 2*pad - k) / stride) + 1.
Array conv3d(const Array& input, const Array& kernel,
             std::array<Index, 3> stride = {1, 1, 1},
             std::array<Index, 3> pad = {0, 0, 0});

Array unary(const Array& x, UnaryKind kind);
Array sigmoid(const Array& x);
Array tanh(const Array& x);
Array silu(const Array& x);
Array sin(const Array& x);
Array cos(const Array& x);
Array neg(const Array& x);
Array recip(const Array& x);

// Reduction over the given axes; an empty axis list reduces everything to a
// rank-0 array. Reduced axes are removed from the shape.
Array reduce(const Array& x, ReduceKind kind, const std::vector<Index>& axes = {});
Array reduce_sum(const Array& x, const std::vector<Index>& axes = {});
Array reduce_mean(const Array& x, const std::vector<Index>& axes = {});

Array reshape(const Array& x, Shape shape);
Array transpose(const Array& x);              // rank-2 only
Array concat(const Array& a, const Array& b); // rank-1 only
// Adds b[c] to every element of slice x[c, ...]; b is rank-1 matching extent 0.
Array bias_add(const Array& x, const Array& b);

// Reverse sweep from a rank-0 loss attached to the live graph. Runs every
// recorded backward rule exactly once, accumulates gradients into the
// requires_grad leaves, then frees the graph. Leaf gradients add up across
// calls until zero_grad().
void backward(const Array& loss);

struct TapeStats {
  std::size_t op_nodes = 0;
  std::size_t leaf_nodes = 0;
  std::size_t backward_rules_run = 0;
};

// Stats of the graph consumed by the most recent backward() on this thread.
TapeStats last_backward_stats();
// Node count of the live (not yet consumed) graph.
std::size_t live_graph_op_count();

}  // namespace segkan
