#include "segkan/array.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace segkan {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void check_finite(const Buffer& buf, const std::string& what) {
  if (!buf.allFinite()) {
    throw std::runtime_error("non-finite values in " + what);
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

namespace detail {

struct ArrayImpl {
  Shape shape;
  Buffer data;
  bool requires_grad = false;
  std::optional<Buffer> grad;

  // Linkage to the live graph: valid while epoch matches the active tape.
  std::uint64_t epoch = 0;
  int node_id = -1;
};

}  // namespace detail

using detail::ArrayImpl;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {

struct Node {
  std::string kind;
  bool is_leaf = false;
  std::vector<int> inputs;  // node id per op input, -1 for constants
  Index out_size = 0;
  BackwardFn backward;                    // op nodes
  std::shared_ptr<ArrayImpl> leaf_impl;   // leaf nodes
};

struct Tape {
  std::vector<Node> nodes;
  std::uint64_t epoch = 1;
  TapeStats last_stats;

  void reset() {
    nodes.clear();
    ++epoch;
  }
};

thread_local Tape g_tape;
thread_local int g_no_grad_depth = 0;

bool attached_here(const ArrayImpl& impl) {
  return impl.epoch == g_tape.epoch && impl.node_id >= 0;
}

// Node id for `a` on the live tape, creating a leaf node if it needs one.
// Returns -1 for constants (no gradient flows).
int resolve_input(const Array& a, const std::shared_ptr<ArrayImpl>& impl) {
  if (attached_here(*impl)) return impl->node_id;
  if (!impl->requires_grad) return -1;
  Node leaf;
  leaf.kind = "leaf";
  leaf.is_leaf = true;
  leaf.out_size = a.size();
  leaf.leaf_impl = impl;
  const int id = static_cast<int>(g_tape.nodes.size());
  g_tape.nodes.push_back(std::move(leaf));
  impl->epoch = g_tape.epoch;
  impl->node_id = id;
  return id;
}

Array wrap(std::shared_ptr<ArrayImpl> impl);

}  // namespace

Array make_from_impl(std::shared_ptr<detail::ArrayImpl> impl);

// ---------------------------------------------------------------------------
// Array
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<ArrayImpl> new_impl(Shape shape, Buffer data, bool requires_grad) {
  if (data.size() != shape_size(shape)) {
    throw std::invalid_argument("array data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  for (Index e : shape) {
    if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<ArrayImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Array make_from_impl(std::shared_ptr<detail::ArrayImpl> impl) {
  Array a;
  a.impl_ = std::move(impl);
  return a;
}

namespace detail {
std::shared_ptr<ArrayImpl> impl_of(const Array& a) { return a.impl_; }
}  // namespace detail

namespace {
using detail::impl_of;
Array wrap(std::shared_ptr<ArrayImpl> impl) { return make_from_impl(std::move(impl)); }
}  // namespace

Array Array::zeros(Shape shape, bool requires_grad) {
  Buffer b = Buffer::Zero(shape_size(shape));
  return make_from_impl(new_impl(std::move(shape), std::move(b), requires_grad));
}

Array Array::full(Shape shape, double value, bool requires_grad) {
  Buffer b = Buffer::Constant(shape_size(shape), value);
  check_finite(b, "array constant fill");
  return make_from_impl(new_impl(std::move(shape), std::move(b), requires_grad));
}

Array Array::scalar(double value, bool requires_grad) {
  return full({}, value, requires_grad);
}

Array Array::from_data(Shape shape, Buffer data, bool requires_grad) {
  check_finite(data, "array construction");
  return make_from_impl(new_impl(std::move(shape), std::move(data), requires_grad));
}

Array Array::from_data(Shape shape, const std::vector<double>& data, bool requires_grad) {
  Buffer b(static_cast<Index>(data.size()));
  std::copy(data.begin(), data.end(), b.data());
  return from_data(std::move(shape), std::move(b), requires_grad);
}

static const std::shared_ptr<ArrayImpl>& require_impl(const std::shared_ptr<ArrayImpl>& p) {
  if (!p) throw std::logic_error("use of empty Array");
  return p;
}

const Shape& Array::shape() const { return require_impl(impl_)->shape; }
Index Array::rank() const { return static_cast<Index>(require_impl(impl_)->shape.size()); }
Index Array::size() const { return require_impl(impl_)->data.size(); }
const Buffer& Array::values() const { return require_impl(impl_)->data; }
Buffer& Array::values_mut() { return require_impl(impl_)->data; }

double Array::item() const {
  const auto& impl = require_impl(impl_);
  if (impl->data.size() != 1) {
    throw std::invalid_argument("item() on array of size " + std::to_string(impl->data.size()));
  }
  return impl->data[0];
}

bool Array::requires_grad() const { return require_impl(impl_)->requires_grad; }
void Array::set_requires_grad(bool v) { require_impl(impl_)->requires_grad = v; }

bool Array::has_grad() const { return require_impl(impl_)->grad.has_value(); }

const Buffer& Array::grad() const {
  const auto& impl = require_impl(impl_);
  if (!impl->grad) throw std::logic_error("array has no gradient; run backward first");
  return *impl->grad;
}

void Array::zero_grad() { require_impl(impl_)->grad.reset(); }

bool Array::attached() const { return impl_ && attached_here(*impl_); }

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(g_no_grad_depth > 0) { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; (void)prev_; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Array custom_op(const std::string& kind, const std::vector<Array>& inputs,
                Shape out_shape, Buffer out_values, BackwardFn backward) {
  if (out_values.size() != shape_size(out_shape)) {
    throw std::logic_error("op '" + kind + "': value size does not match shape " +
                           shape_str(out_shape));
  }
  check_finite(out_values, "output of op '" + kind + "'");

  bool want_grad = false;
  if (grad_enabled()) {
    for (const Array& in : inputs) {
      const auto impl = impl_of(in);
      if (!impl) throw std::logic_error("op '" + kind + "': empty input array");
      if (impl->requires_grad || attached_here(*impl)) {
        want_grad = true;
        break;
      }
    }
  }

  auto out = new_impl(std::move(out_shape), std::move(out_values), false);
  if (!want_grad) return wrap(std::move(out));

  Node node;
  node.kind = kind;
  node.out_size = out->data.size();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Array& in : inputs) {
    node.inputs.push_back(resolve_input(in, impl_of(in)));
  }
  const int id = static_cast<int>(g_tape.nodes.size());
  g_tape.nodes.push_back(std::move(node));
  out->requires_grad = true;
  out->epoch = g_tape.epoch;
  out->node_id = id;
  return wrap(std::move(out));
}

void backward(const Array& loss) {
  const auto impl = impl_of(loss);
  require_impl(impl);
  if (!impl->shape.empty()) {
    throw std::invalid_argument("backward: loss must be rank-0, got shape " +
                                shape_str(impl->shape));
  }
  if (impl->epoch != g_tape.epoch || impl->node_id < 0) {
    if (impl->epoch != 0 && impl->epoch < g_tape.epoch) {
      throw std::runtime_error("backward: graph already consumed");
    }
    throw std::runtime_error("backward: loss is not connected to a recorded graph");
  }

  auto& nodes = g_tape.nodes;
  std::vector<Buffer> grads(nodes.size());  // empty buffer = all zeros
  grads[impl->node_id] = Buffer::Ones(1);

  TapeStats stats;
  for (const Node& n : nodes) {
    if (n.is_leaf) ++stats.leaf_nodes;
    else ++stats.op_nodes;
  }

  for (int id = static_cast<int>(nodes.size()) - 1; id >= 0; --id) {
    Node& n = nodes[id];
    if (n.is_leaf) continue;
    if (grads[id].size() == 0) grads[id] = Buffer::Zero(n.out_size);
    const GradSink sink = [&](std::size_t input_index, const Buffer& contrib) {
      if (input_index >= n.inputs.size()) {
        throw std::logic_error("op '" + n.kind + "': gradient for unknown input");
      }
      const int tgt = n.inputs[input_index];
      if (tgt < 0) return;  // constant input
      if (contrib.size() != nodes[tgt].out_size) {
        throw std::logic_error("op '" + n.kind + "': gradient size mismatch for input " +
                               std::to_string(input_index));
      }
      if (grads[tgt].size() == 0) grads[tgt] = contrib;
      else grads[tgt] += contrib;
    };
    n.backward(grads[id], sink);
    ++stats.backward_rules_run;
  }

  for (std::size_t id = 0; id < nodes.size(); ++id) {
    Node& n = nodes[id];
    if (!n.is_leaf || grads[id].size() == 0) continue;
    auto& g = n.leaf_impl->grad;
    if (!g) g = Buffer::Zero(n.out_size);
    *g += grads[id];
  }

  g_tape.last_stats = stats;
  g_tape.reset();
}

TapeStats last_backward_stats() { return g_tape.last_stats; }

std::size_t live_graph_op_count() {
  std::size_t n = 0;
  for (const Node& node : g_tape.nodes) {
    if (!node.is_leaf) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {
const char* ew_name(EwKind k) {
  switch (k) {
    case EwKind::add: return "add";
    case EwKind::sub: return "sub";
    case EwKind::mul: return "mul";
  }
  return "?";
}
}  // namespace

Array elementwise(const Array& a, const Array& b, EwKind kind) {
  const bool a_scalar = a.rank() == 0;
  const bool b_scalar = b.rank() == 0;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(ew_name(kind)) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const Buffer& av = a.values();
  const Buffer& bv = b.values();

  Buffer out;
  switch (kind) {
    case EwKind::add:
      if (a_scalar && !b_scalar) out = av[0] + bv;
      else if (b_scalar && !a_scalar) out = av + bv[0];
      else out = av + bv;
      break;
    case EwKind::sub:
      if (a_scalar && !b_scalar) out = av[0] - bv;
      else if (b_scalar && !a_scalar) out = av - bv[0];
      else out = av - bv;
      break;
    case EwKind::mul:
      if (a_scalar && !b_scalar) out = av[0] * bv;
      else if (b_scalar && !a_scalar) out = av * bv[0];
      else out = av * bv;
      break;
  }

  auto backward = [kind, a, b, a_scalar, b_scalar](const Buffer& up, const GradSink& sink) {
    switch (kind) {
      case EwKind::add:
        sink(0, a_scalar && up.size() > 1 ? Buffer::Constant(1, up.sum()) : up);
        sink(1, b_scalar && up.size() > 1 ? Buffer::Constant(1, up.sum()) : up);
        break;
      case EwKind::sub:
        sink(0, a_scalar && up.size() > 1 ? Buffer::Constant(1, up.sum()) : up);
        sink(1, b_scalar && up.size() > 1 ? Buffer::Constant(1, (-up).sum()) : Buffer(-up));
        break;
      case EwKind::mul: {
        const Buffer& av = a.values();
        const Buffer& bv = b.values();
        if (a_scalar && !b_scalar) {
          sink(0, Buffer::Constant(1, (up * bv).sum()));
          sink(1, Buffer(up * av[0]));
        } else if (b_scalar && !a_scalar) {
          sink(0, Buffer(up * bv[0]));
          sink(1, Buffer::Constant(1, (up * av).sum()));
        } else {
          sink(0, Buffer(up * bv));
          sink(1, Buffer(up * av));
        }
        break;
      }
    }
  };
  return custom_op(ew_name(kind), {a, b}, out_shape, std::move(out), std::move(backward));
}

Array add(const Array& a, const Array& b) { return elementwise(a, b, EwKind::add); }
Array sub(const Array& a, const Array& b) { return elementwise(a, b, EwKind::sub); }
Array mul(const Array& a, const Array& b) { return elementwise(a, b, EwKind::mul); }

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: both operands must be rank-2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Index m = a.shape()[0], k = a.shape()[1];
  const Index k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  Buffer out(m * n);
  {
    ConstMap A(a.values().data(), m, k), B(b.values().data(), k, n);
    MutMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto backward = [a, b, m, k, n](const Buffer& up, const GradSink& sink) {
    ConstMap A(a.values().data(), m, k), B(b.values().data(), k, n);
    ConstMap dC(up.data(), m, n);
    Buffer da(m * k), db(k * n);
    MutMap dA(da.data(), m, k), dB(db.data(), k, n);
    dA.noalias() = dC * B.transpose();
    dB.noalias() = A.transpose() * dC;
    sink(0, da);
    sink(1, db);
  };
  return custom_op("matmul", {a, b}, {m, n}, std::move(out), std::move(backward));
}

// ---------------------------------------------------------------------------
// conv3d (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  Index ci, d, h, w;
  Index co, kd, kh, kw;
  std::array<Index, 3> stride, pad;
  Index od, oh, ow;
  Index patch() const { return ci * kd * kh * kw; }
  Index cols() const { return od * oh * ow; }
};

Buffer build_im2col(const Buffer& in, const ConvGeom& g) {
  Buffer cols = Buffer::Zero(g.patch() * g.cols());
  MutMap M(cols.data(), g.patch(), g.cols());
  for (Index c = 0; c < g.ci; ++c) {
    for (Index dk = 0; dk < g.kd; ++dk) {
      for (Index hk = 0; hk < g.kh; ++hk) {
        for (Index wk = 0; wk < g.kw; ++wk) {
          const Index row = ((c * g.kd + dk) * g.kh + hk) * g.kw + wk;
          for (Index od = 0; od < g.od; ++od) {
            const Index id = od * g.stride[0] + dk - g.pad[0];
            if (id < 0 || id >= g.d) continue;
            for (Index oh = 0; oh < g.oh; ++oh) {
              const Index ih = oh * g.stride[1] + hk - g.pad[1];
              if (ih < 0 || ih >= g.h) continue;
              for (Index ow = 0; ow < g.ow; ++ow) {
                const Index iw = ow * g.stride[2] + wk - g.pad[2];
                if (iw < 0 || iw >= g.w) continue;
                M(row, (od * g.oh + oh) * g.ow + ow) =
                    in[((c * g.d + id) * g.h + ih) * g.w + iw];
              }
            }
          }
        }
      }
    }
  }
  return cols;
}

void scatter_col2im(const Buffer& dcols, const ConvGeom& g, Buffer& din) {
  ConstMap M(dcols.data(), g.patch(), g.cols());
  for (Index c = 0; c < g.ci; ++c) {
    for (Index dk = 0; dk < g.kd; ++dk) {
      for (Index hk = 0; hk < g.kh; ++hk) {
        for (Index wk = 0; wk < g.kw; ++wk) {
          const Index row = ((c * g.kd + dk) * g.kh + hk) * g.kw + wk;
          for (Index od = 0; od < g.od; ++od) {
            const Index id = od * g.stride[0] + dk - g.pad[0];
            if (id < 0 || id >= g.d) continue;
            for (Index oh = 0; oh < g.oh; ++oh) {
              const Index ih = oh * g.stride[1] + hk - g.pad[1];
              if (ih < 0 || ih >= g.h) continue;
              for (Index ow = 0; ow < g.ow; ++ow) {
                const Index iw = ow * g.stride[2] + wk - g.pad[2];
                if (iw < 0 || iw >= g.w) continue;
                din[((c * g.d + id) * g.h + ih) * g.w + iw] +=
                    M(row, (od * g.oh + oh) * g.ow + ow);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Array conv3d(const Array& input, const Array& kernel, std::array<Index, 3> stride,
             std::array<Index, 3> pad) {
  if (input.rank() != 4) {
    throw std::invalid_argument("conv3d: input must be [C_in,D,H,W], got " +
                                shape_str(input.shape()));
  }
  if (kernel.rank() != 5) {
    throw std::invalid_argument("conv3d: kernel must be [C_out,C_in,kd,kh,kw], got " +
                                shape_str(kernel.shape()));
  }
  ConvGeom g;
  g.ci = input.shape()[0];
  g.d = input.shape()[1];
  g.h = input.shape()[2];
  g.w = input.shape()[3];
  g.co = kernel.shape()[0];
  g.kd = kernel.shape()[2];
  g.kh = kernel.shape()[3];
  g.kw = kernel.shape()[4];
  g.stride = stride;
  g.pad = pad;
  if (kernel.shape()[1] != g.ci) {
    throw std::invalid_argument("conv3d: kernel C_in " + std::to_string(kernel.shape()[1]) +
                                " does not match input C_in " + std::to_string(g.ci));
  }
  for (int i = 0; i < 3; ++i) {
    if (stride[i] < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
    if (pad[i] < 0) throw std::invalid_argument("conv3d: pad must be >= 0");
  }
  g.od = (g.d + 2 * pad[0] - g.kd) / stride[0] + 1;
  g.oh = (g.h + 2 * pad[1] - g.kh) / stride[1] + 1;
  g.ow = (g.w + 2 * pad[2] - g.kw) / stride[2] + 1;
  if (g.d + 2 * pad[0] < g.kd || g.h + 2 * pad[1] < g.kh || g.w + 2 * pad[2] < g.kw) {
    throw std::invalid_argument("conv3d: kernel larger than padded input");
  }

  Buffer cols = build_im2col(input.values(), g);
  Buffer out(g.co * g.cols());
  {
    ConstMap K(kernel.values().data(), g.co, g.patch());
    ConstMap C(cols.data(), g.patch(), g.cols());
    MutMap O(out.data(), g.co, g.cols());
    O.noalias() = K * C;
  }

  auto backward = [input, kernel, g, cols = std::move(cols)](const Buffer& up,
                                                             const GradSink& sink) {
    ConstMap dO(up.data(), g.co, g.cols());
    ConstMap K(kernel.values().data(), g.co, g.patch());
    ConstMap C(cols.data(), g.patch(), g.cols());

    Buffer dk(g.co * g.patch());
    MutMap dK(dk.data(), g.co, g.patch());
    dK.noalias() = dO * C.transpose();
    sink(1, dk);

    Buffer dcols(g.patch() * g.cols());
    MutMap dC(dcols.data(), g.patch(), g.cols());
    dC.noalias() = K.transpose() * dO;
    Buffer din = Buffer::Zero(input.size());
    scatter_col2im(dcols, g, din);
    sink(0, din);
  };
  return custom_op("conv3d", {input, kernel}, {g.co, g.od, g.oh, g.ow}, std::move(out),
                   std::move(backward));
}

// ---------------------------------------------------------------------------
// Unary
// ---------------------------------------------------------------------------

namespace {

Buffer stable_sigmoid(const Buffer& x) {
  // Branch on sign so exp never overflows.
  Buffer pos = 1.0 / (1.0 + (-x).exp());
  Buffer ex = x.exp();
  Buffer neg = ex / (1.0 + ex);
  return (x >= 0.0).select(pos, neg);
}

const char* unary_name(UnaryKind k) {
  switch (k) {
    case UnaryKind::sigmoid: return "sigmoid";
    case UnaryKind::tanh: return "tanh";
    case UnaryKind::silu: return "silu";
    case UnaryKind::sin: return "sin";
    case UnaryKind::cos: return "cos";
    case UnaryKind::neg: return "neg";
    case UnaryKind::recip: return "recip";
  }
  return "?";
}

}  // namespace

Array unary(const Array& x, UnaryKind kind) {
  const Buffer& xv = x.values();
  Buffer out;
  switch (kind) {
    case UnaryKind::sigmoid: out = stable_sigmoid(xv); break;
    case UnaryKind::tanh: out = xv.tanh(); break;
    case UnaryKind::silu: out = xv * stable_sigmoid(xv); break;
    case UnaryKind::sin: out = xv.sin(); break;
    case UnaryKind::cos: out = xv.cos(); break;
    case UnaryKind::neg: out = -xv; break;
    case UnaryKind::recip: out = xv.inverse(); break;
  }

  auto backward = [x, kind](const Buffer& up, const GradSink& sink) {
    const Buffer& xv = x.values();
    Buffer d;
    switch (kind) {
      case UnaryKind::sigmoid: {
        Buffer s = stable_sigmoid(xv);
        d = s * (1.0 - s);
        break;
      }
      case UnaryKind::tanh: {
        Buffer t = xv.tanh();
        d = 1.0 - t.square();
        break;
      }
      case UnaryKind::silu: {
        // silu'(x) = s(x) * (1 + x * (1 - s(x)))
        Buffer s = stable_sigmoid(xv);
        d = s * (1.0 + xv * (1.0 - s));
        break;
      }
      case UnaryKind::sin: d = xv.cos(); break;
      case UnaryKind::cos: d = -xv.sin(); break;
      case UnaryKind::neg: d = Buffer::Constant(xv.size(), -1.0); break;
      case UnaryKind::recip: d = -xv.inverse().square(); break;
    }
    sink(0, Buffer(up * d));
  };
  return custom_op(unary_name(kind), {x}, x.shape(), std::move(out), std::move(backward));
}

Array sigmoid(const Array& x) { return unary(x, UnaryKind::sigmoid); }
Array tanh(const Array& x) { return unary(x, UnaryKind::tanh); }
Array silu(const Array& x) { return unary(x, UnaryKind::silu); }
Array sin(const Array& x) { return unary(x, UnaryKind::sin); }
Array cos(const Array& x) { return unary(x, UnaryKind::cos); }
Array neg(const Array& x) { return unary(x, UnaryKind::neg); }
Array recip(const Array& x) { return unary(x, UnaryKind::recip); }

// ---------------------------------------------------------------------------
// Reduce
// ---------------------------------------------------------------------------

namespace {

std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace

Array reduce(const Array& x, ReduceKind kind, const std::vector<Index>& axes) {
  const Shape& shape = x.shape();
  const Index rank = x.rank();
  std::vector<bool> reduced(rank, false);
  if (axes.empty()) {
    reduced.assign(rank, true);
  } else {
    for (Index ax : axes) {
      if (ax < 0 || ax >= rank) {
        throw std::invalid_argument("reduce: axis " + std::to_string(ax) +
                                    " out of range for shape " + shape_str(shape));
      }
      if (reduced[ax]) throw std::invalid_argument("reduce: duplicate axis " + std::to_string(ax));
      reduced[ax] = true;
    }
  }

  Shape out_shape;
  Index count = 1;
  for (Index i = 0; i < rank; ++i) {
    if (reduced[i]) count *= shape[i];
    else out_shape.push_back(shape[i]);
  }
  const double scale = kind == ReduceKind::mean ? 1.0 / static_cast<double>(count) : 1.0;

  // Fast path: full reduction.
  const bool all = static_cast<Index>(out_shape.size()) == 0;
  Buffer out;
  std::vector<Index> out_map;  // input flat index -> output flat index
  if (all) {
    out = Buffer::Constant(1, x.values().sum() * scale);
  } else {
    const auto in_strides = strides_of(shape);
    const auto out_strides = strides_of(out_shape);
    out = Buffer::Zero(shape_size(out_shape));
    out_map.resize(x.size());
    for (Index i = 0; i < x.size(); ++i) {
      Index rem = i, o = 0;
      std::size_t oaxis = 0;
      for (Index axis = 0; axis < rank; ++axis) {
        const Index coord = rem / in_strides[axis];
        rem %= in_strides[axis];
        if (!reduced[axis]) o += coord * out_strides[oaxis++];
      }
      out_map[i] = o;
      out[o] += x.values()[i] * scale;
    }
  }

  auto backward = [n = x.size(), all, scale, out_map = std::move(out_map)](
                      const Buffer& up, const GradSink& sink) {
    Buffer dx(n);
    if (all) {
      dx.setConstant(up[0] * scale);
    } else {
      for (Index i = 0; i < n; ++i) dx[i] = up[out_map[i]] * scale;
    }
    sink(0, dx);
  };
  return custom_op(kind == ReduceKind::sum ? "sum" : "mean", {x}, std::move(out_shape),
                   std::move(out), std::move(backward));
}

Array reduce_sum(const Array& x, const std::vector<Index>& axes) {
  return reduce(x, ReduceKind::sum, axes);
}
Array reduce_mean(const Array& x, const std::vector<Index>& axes) {
  return reduce(x, ReduceKind::mean, axes);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Array reshape(const Array& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  auto backward = [](const Buffer& up, const GradSink& sink) { sink(0, up); };
  return custom_op("reshape", {x}, std::move(shape), Buffer(x.values()), std::move(backward));
}

Array transpose(const Array& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument("transpose: rank-2 required, got " + shape_str(x.shape()));
  }
  const Index m = x.shape()[0], n = x.shape()[1];
  Buffer out(n * m);
  {
    ConstMap X(x.values().data(), m, n);
    MutMap O(out.data(), n, m);
    O = X.transpose();
  }
  auto backward = [m, n](const Buffer& up, const GradSink& sink) {
    Buffer dx(m * n);
    ConstMap U(up.data(), n, m);
    MutMap D(dx.data(), m, n);
    D = U.transpose();
    sink(0, dx);
  };
  return custom_op("transpose", {x}, {n, m}, std::move(out), std::move(backward));
}

Array concat(const Array& a, const Array& b) {
  if (a.rank() != 1 || b.rank() != 1) {
    throw std::invalid_argument("concat: rank-1 required, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const Index na = a.size(), nb = b.size();
  Buffer out(na + nb);
  out.head(na) = a.values();
  out.tail(nb) = b.values();
  auto backward = [na, nb](const Buffer& up, const GradSink& sink) {
    sink(0, Buffer(up.head(na)));
    sink(1, Buffer(up.tail(nb)));
  };
  return custom_op("concat", {a, b}, {na + nb}, std::move(out), std::move(backward));
}

Array bias_add(const Array& x, const Array& b) {
  if (x.rank() < 1 || b.rank() != 1 || b.size() != x.shape()[0]) {
    throw std::invalid_argument("bias_add: bias " + shape_str(b.shape()) +
                                " does not match leading extent of " + shape_str(x.shape()));
  }
  const Index c = x.shape()[0];
  const Index inner = x.size() / c;
  Buffer out(x.size());
  for (Index i = 0; i < c; ++i) {
    out.segment(i * inner, inner) = x.values().segment(i * inner, inner) + b.values()[i];
  }
  auto backward = [c, inner](const Buffer& up, const GradSink& sink) {
    sink(0, up);
    Buffer db(c);
    for (Index i = 0; i < c; ++i) db[i] = up.segment(i * inner, inner).sum();
    sink(1, db);
  };
  return custom_op("bias_add", {x, b}, x.shape(), std::move(out), std::move(backward));
}

}  // namespace segkan
