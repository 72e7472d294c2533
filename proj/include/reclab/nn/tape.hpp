#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "reclab/common.hpp"

namespace reclab::nn {

// Define-by-run reverse-mode tape over dense matrices.
//
// Every tensor in the repository is a 2-D row-major matrix; batches of
// sequences are stacked along rows ((b, s) -> row b*N + s), scalars are
// 1x1. Operations in ops.hpp evaluate eagerly and, while the tape is
// recording, register a backward closure. backward() replays closures in
// reverse creation order, which is a valid topological order for a
// define-by-run graph.
template <typename Scalar>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Mat<Scalar>&)>;

  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;  // allocated lazily on first accumulation
    BackFn backward;
    bool requires_grad = false;
  };

  struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat<Scalar>& value() const { return tape->node(id).value; }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Scalar scalar() const {
      require(value().size() == 1, "Var::scalar: not a 1x1 value");
      return value()(0, 0);
    }
  };

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }
  void clear() { nodes_.clear(); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  bool wants_grad(int id) const { return node(id).requires_grad; }

  Mat<Scalar>& grad_ref(int id) {
    Node& n = node(id);
    if (n.grad.size() == 0) n.grad = Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Gradient of the last backward() pass; zero matrix if the node was
  // never reached.
  Mat<Scalar> grad(const Var& v) {
    Node& n = node(v.id);
    if (n.grad.size() == 0) return Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var leaf(Mat<Scalar> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad && recording_, BackFn{});
  }
  Var constant(Mat<Scalar> value) { return leaf(std::move(value), false); }

  Var push(Mat<Scalar> value, bool requires_grad, BackFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void backward(const Var& root) {
    require(root.value().size() == 1, "backward: root must be a scalar loss");
    if (!node(root.id).requires_grad) return;  // loss independent of parameters
    grad_ref(root.id).setConstant(Scalar(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  // Test hook: verifies the no-NaN/Inf forward invariant over all values.
  bool values_finite() const {
    for (const Node& n : nodes_)
      if (!n.value.allFinite()) return false;
    return true;
  }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

template <typename Scalar>
using Var = typename Tape<Scalar>::Var;

}  // namespace reclab::nn
