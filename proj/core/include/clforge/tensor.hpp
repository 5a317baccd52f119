#pragma once

// Dense float64 tensors with reverse-mode gradient recording.
//
// A Tensor is a cheap handle to a shared node. Leaves created by the user own
// their data and (optionally) a gradient buffer; every op output that depends
// on a requires_grad input records its parents and a backward closure. The
// graph is released by backward(), so a second backward needs a new forward.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clforge/error.hpp"

namespace clforge {

using Shape = std::vector<std::size_t>;
using ParamId = std::string;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;

// Allocator that leaves doubles uninitialised on resize, so op outputs that
// are fully overwritten skip the zero fill.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <class U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using Buffer = std::vector<double, DefaultInitAllocator<double>>;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, for initialisation and optimizer updates only.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of the values, detached from any graph.
  Tensor clone() const;
  bool same_values(const Tensor& other) const;

  const detail::Node* node() const noexcept { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct detail::Node;
  friend Tensor make_result(Shape shape, detail::Buffer data,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward,
                            const char* op);
  friend void backward(const Tensor& loss);
};

using NamedTensors = std::map<ParamId, Tensor>;
using GradientMap = std::map<ParamId, Tensor>;

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// loss, then frees the recorded graph.
void backward(const Tensor& loss);

// Runs backward and collects the gradients of `params`. Parameters that the
// loss does not depend on get an all-zero gradient. Existing gradients on the
// parameters are cleared first.
GradientMap backward(const Tensor& loss, const NamedTensors& params);

// ---- ops ------------------------------------------------------------------
//
// Binary elementwise ops broadcast the operand with fewer elements over the
// leading axes of the other: its shape must be a suffix of the larger shape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D only

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor log(const Tensor& a);   // log(max(x, kLogFloor))
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
Tensor sum_last(const Tensor& a);   // reduce the trailing axis
Tensor mean_rows(const Tensor& a);  // reduce the leading axis

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts);  // along axis 0
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline constexpr double kLogFloor = 1e-12;

}  // namespace clforge
