#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

namespace cvl::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Handle to a node on a Tape. Cheap to copy; values and gradients live on
// the tape. A default-constructed Var is invalid.
class Var {
 public:
  Var() = default;

  const Mat& val() const;
  const Mat& grad() const;
  Eigen::Index rows() const;
  Eigen::Index cols() const;
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int idx) : tape_(tape), idx_(idx) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

// Reverse-mode tape over dense double matrices.
//
// Nodes are recorded in creation order, which is a valid topological order,
// so backward() is a single reverse sweep. Gradients of constants are never
// allocated or computed: a forward pass whose leaves are all constants
// (e.g. the momentum teacher) is structurally gradient-free.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Mat v);
  Var param(Mat v);  // tracked leaf

  // Elementwise and broadcast arithmetic.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var add_rowvec(Var a, Var row);  // row is 1xC, broadcast over rows of a
  Var cmul(Var a, Var b);
  Var scale(Var a, double c);
  Var mul_scalar(Var a, Var s);  // s is 1x1
  Var div_scalar(Var a, Var s);  // s is 1x1
  Var exp(Var a);
  Var gelu(Var a);
  // Identity whose output is always gradient-tracked, even over constants.
  // Lets callers request d(target)/d(node) at inference time.
  Var grad_root(Var a);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var transpose(Var a);

  // Row-wise normalizations.
  Var softmax_rows(Var a);
  Var log_softmax_rows(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var l2_normalize_rows(Var x, double eps = 1e-12);

  // Structure.
  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var gather_rows(Var table, std::vector<int> ids);

  // Reductions to 1x1.
  Var sum(Var a);
  Var mean(Var a);
  Var weighted_sum(Var a, Mat weights);  // sum(a .* weights)

  // Seeds `loss` (must be 1x1) with gradient 1 and sweeps the tape in
  // reverse. May be called once per tape.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Mat value;
    Mat grad;  // allocated iff requires_grad
    bool requires_grad = false;
    bool touched = false;  // gradient has been accumulated into
    std::function<void()> back;
  };

  friend class Var;

  Var push(Mat value, bool requires_grad);
  Node& node(Var v) { return nodes_[v.idx_]; }
  const Node& node(Var v) const { return nodes_[v.idx_]; }
  void check_same_tape(Var v) const;
  // Marks v touched and returns its grad buffer for accumulation.
  Mat& gbuf(int idx);

  std::vector<Node> nodes_;
  bool swept_ = false;
};

}  // namespace cvl::ad
