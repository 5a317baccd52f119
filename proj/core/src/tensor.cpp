#include "clforge/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace clforge {

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Buffer;
using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// A value is non-finite exactly when its exponent bits are all set. The
// integer test is branch-free, so the loop vectorises.
void check_finite(std::span<const double> values, const char* op) {
  constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
  if (bad != 0) throw NumericError(std::string("non-finite value produced by ") + op);
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Layout of a broadcast binary op: `big` is indexed directly, `small`
// repeats every `inner` elements.
struct Broadcast {
  bool a_is_big = true;
  std::size_t inner = 0;
  std::size_t total = 0;
  Shape out_shape;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast plan;
  if (a.numel() >= b.numel() && is_suffix(b.shape(), a.shape())) {
    plan.a_is_big = true;
    plan.out_shape = a.shape();
    plan.inner = b.numel();
  } else if (is_suffix(a.shape(), b.shape())) {
    plan.a_is_big = false;
    plan.out_shape = b.shape();
    plan.inner = a.numel();
  } else {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                     " with " + shape_str(b.shape()));
  }
  plan.total = shape_numel(plan.out_shape);
  return plan;
}

}  // namespace

Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn, const char* op) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->leaf = false;
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  check_finite(data, "tensor construction");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data.assign(data.begin(), data.end());
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) throw ShapeError("axis out of range");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw PreconditionError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  return Tensor(node_->shape, std::vector<double>(node_->data.begin(), node_->data.end()), false);
}

bool Tensor::same_values(const Tensor& other) const {
  return shape() == other.shape() && std::ranges::equal(node_->data, other.node_->data);
}

// ---- grad mode ------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  Node* root = loss.node_.get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->leaf) continue;
    if (!node->grad.empty() && node->backward_fn) node->backward_fn(*node);
  }
  for (Node* node : order) {
    if (node->leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

GradientMap backward(const Tensor& loss, const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    const_cast<Tensor&>(p).zero_grad();
  }
  backward(loss);
  GradientMap out;
  for (const auto& [name, p] : params) {
    if (p.has_grad()) {
      out.emplace(name, Tensor(p.shape(), std::vector<double>(p.grad().begin(), p.grad().end())));
    } else {
      out.emplace(name, Tensor::zeros(p.shape()));
    }
  }
  return out;
}

// ---- elementwise binary ---------------------------------------------------

namespace {

template <class Fwd, class GradA, class GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, GradA ga, GradB gb) {
  const Broadcast plan = plan_broadcast(a, b, op);
  Buffer out(plan.total);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t inner = plan.inner;
  // The small operand repeats every `inner` elements of the big one.
  for (std::size_t base = 0; base < plan.total; base += inner) {
    if (plan.a_is_big) {
      for (std::size_t j = 0; j < inner; ++j) out[base + j] = fwd(ad[base + j], bd[j]);
    } else {
      for (std::size_t j = 0; j < inner; ++j) out[base + j] = fwd(ad[j], bd[base + j]);
    }
  }
  return make_result(
      plan.out_shape, std::move(out), {a, b},
      [plan, ga, gb](Node& self) {
        Node& na = parent(self, 0);
        Node& nb = parent(self, 1);
        const double* g = self.grad.data();
        const std::size_t inner = plan.inner;
        Node& big = plan.a_is_big ? na : nb;
        Node& small = plan.a_is_big ? nb : na;
        const double* bigd = big.data.data();
        const double* smalld = small.data.data();
        auto grad_a = [&](double x_big, double x_small) {
          return plan.a_is_big ? ga(x_big, x_small) : ga(x_small, x_big);
        };
        auto grad_b = [&](double x_big, double x_small) {
          return plan.a_is_big ? gb(x_big, x_small) : gb(x_small, x_big);
        };
        if (na.requires_grad) {
          double* out = na.grad_buffer().data();
          for (std::size_t base = 0; base < plan.total; base += inner) {
            for (std::size_t j = 0; j < inner; ++j) {
              const std::size_t i = base + j;
              out[plan.a_is_big ? i : j] += g[i] * grad_a(bigd[i], smalld[j]);
            }
          }
        }
        if (nb.requires_grad) {
          double* out = nb.grad_buffer().data();
          for (std::size_t base = 0; base < plan.total; base += inner) {
            for (std::size_t j = 0; j < inner; ++j) {
              const std::size_t i = base + j;
              out[plan.a_is_big ? j : i] += g[i] * grad_b(bigd[i], smalld[j]);
            }
          }
        }
      },
      op);
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  const auto ad = a.data();
  Buffer out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(
      a.shape(), std::move(out), {a},
      [deriv](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += self.grad[i] * deriv(na.data[i], self.data[i]);
        }
      },
      op);
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(
      a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Buffer out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result(
      {a.dim(0), b.dim(1)}, std::move(out), {a, b},
      [m, k, n](Node& self) {
        Node& na = parent(self, 0);
        Node& nb = parent(self, 1);
        ConstMap g(self.grad.data(), m, n);
        if (na.requires_grad) {
          MutMap(na.grad_buffer().data(), m, k).noalias() += g * ConstMap(nb.data.data(), k, n).transpose();
        }
        if (nb.requires_grad) {
          MutMap(nb.grad_buffer().data(), k, n).noalias() += ConstMap(na.data.data(), m, k).transpose() * g;
        }
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a 2-D tensor");
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto n = static_cast<Eigen::Index>(a.dim(1));
  Buffer out(a.numel());
  MutMap(out.data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
  return make_result(
      {a.dim(1), a.dim(0)}, std::move(out), {a},
      [m, n](Node& self) {
        Node& na = parent(self, 0);
        MutMap(na.grad_buffer().data(), m, n) += ConstMap(self.grad.data(), n, m).transpose();
      },
      "transpose");
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  long double acc = 0.0L;
  for (double v : a.data()) acc += v;
  return make_result(
      {}, Buffer{static_cast<double>(acc)}, {a},
      [](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  long double acc = 0.0L;
  for (double v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  return make_result(
      {}, Buffer{static_cast<double>(acc / n)}, {a},
      [n](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        const double d = self.grad[0] / n;
        for (auto& v : g) v += d;
      },
      "mean");
}

Tensor sum_last(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("sum_last on a scalar");
  const std::size_t inner = a.shape().back();
  const std::size_t outer = a.numel() / inner;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Buffer out(outer);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < inner; ++i) acc += ad[o * inner + i];
    out[o] = static_cast<double>(acc);
  }
  return make_result(
      std::move(out_shape), std::move(out), {a},
      [inner, outer](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += self.grad[o];
        }
      },
      "sum_last");
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("mean_rows on a scalar");
  const std::size_t rows = a.dim(0);
  const std::size_t width = a.numel() / rows;
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<long double> acc(width, 0.0L);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < width; ++i) acc[i] += ad[r * width + i];
  }
  Buffer out(width);
  for (std::size_t i = 0; i < width; ++i) out[i] = static_cast<double>(acc[i] / rows);
  return make_result(
      std::move(out_shape), std::move(out), {a},
      [rows, width](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < width; ++i) g[r * width + i] += self.grad[i] * inv;
        }
      },
      "mean_rows");
}

// ---- structural -----------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Buffer out(a.data().begin(), a.data().end());
  return make_result(
      std::move(shape), std::move(out), {a},
      [](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat of scalars");
  Shape out_shape = first;
  out_shape[0] = 0;
  Buffer out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat: " + shape_str(first) + " vs " + shape_str(p.shape()));
    }
    out_shape[0] += p.dim(0);
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result(
      std::move(out_shape), std::move(out), parts,
      [offsets](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          Node& np = parent(self, k);
          if (!np.requires_grad) continue;
          auto& g = np.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
        }
      },
      "concat");
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length) {
  if (a.rank() == 0 || length == 0 || start + length > a.shape().back()) {
    throw ShapeError("slice_last out of range on " + shape_str(a.shape()));
  }
  const std::size_t width = a.shape().back();
  const std::size_t outer = a.numel() / width;
  Shape out_shape = a.shape();
  out_shape.back() = length;
  Buffer out(outer * length);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(o * width + start), length,
                out.begin() + static_cast<std::ptrdiff_t>(o * length));
  }
  return make_result(
      std::move(out_shape), std::move(out), {a},
      [outer, width, start, length](Node& self) {
        Node& na = parent(self, 0);
        auto& g = na.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < length; ++i) g[o * width + start + i] += self.grad[o * length + i];
        }
      },
      "slice_last");
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a 2-D table");
  if (rows.empty()) throw ShapeError("gather_rows with no indices");
  const std::size_t width = table.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Buffer out(idx.size() * width);
  const auto td = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= table.dim(0)) throw ShapeError("gather_rows index out of range");
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(idx[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return make_result(
      {idx.size(), width}, std::move(out), {table},
      [idx, width](Node& self) {
        Node& nt = parent(self, 0);
        auto& g = nt.grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t i = 0; i < width; ++i) g[idx[r] * width + i] += self.grad[r * width + i];
        }
      },
      "gather_rows");
}

}  // namespace clforge
