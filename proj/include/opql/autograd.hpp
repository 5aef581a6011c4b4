#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <vector>

namespace opql {

// Row-major throughout: row i of a sequence matrix is token i's vector, and
// serialized tensors are contiguous row blocks.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int index) : tape_(tape), index_(index) {}

  const Mat& value() const;
  const Mat& grad() const;
  int index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int index_ = -1;
};

// Reverse-mode tape. Nodes are appended in forward order; backward() walks
// them in reverse, so gradient accumulation order is fixed by construction.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // allocated lazily, zero-initialized
    bool requires_grad = false;
    std::function<void(Tape&, const Mat&)> backward;  // empty for leaves
  };

  Var leaf(Mat value, bool requires_grad = true);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  // Runs reverse-mode accumulation from a scalar (1x1) output.
  void backward(const Var& output);

  const Mat& value(int index) const { return nodes_[index].value; }
  const Mat& grad(int index);
  Mat& grad_ref(int index);
  bool requires_grad(int index) const { return nodes_[index].requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  Var emit(Mat value, std::vector<int> parents, std::function<void(Tape&, const Mat&)> backward);

  void accumulate(int index, const Mat& g) {
    if (!nodes_[index].requires_grad) return;
    Mat& dst = grad_ref(index);
    dst += g;
  }

 private:
  std::vector<Node> nodes_;
};

// ---- operations ------------------------------------------------------------

Var add(const Var& a, const Var& b);               // same shape
Var sub(const Var& a, const Var& b);               // same shape
Var add_rowvec(const Var& a, const Var& row);      // broadcast 1xC over rows
Var mul(const Var& a, const Var& b);               // elementwise, same shape
Var mul_scalar(const Var& a, const Var& s);        // s is 1x1
Var scale(const Var& a, double c);
Var affine(const Var& a, double alpha, double beta);  // alpha*a + beta
Var matmul(const Var& a, const Var& b);            // a * b
Var matmul_nt(const Var& a, const Var& b);         // a * b^T
Var gather_rows(const Var& a, std::vector<int> rows);
Var gather_cols(const Var& a, std::vector<int> cols);
Var concat_cols(const std::vector<Var>& parts);    // equal row counts
Var concat_rows(const std::vector<Var>& parts);    // equal col counts
Var softmax_rows(const Var& a);
Var logsumexp_row(const Var& a);                   // 1xN -> 1x1
Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps);
Var gelu(const Var& a);                            // exact erf form
Var sum_all(const Var& a);                         // -> 1x1
Var mean_all(const Var& a);                        // -> 1x1
Var exp(const Var& a);
Var log(const Var& a);
Var clamp_min(const Var& a, double floor);         // gradient 0 on the floor
Var add_n(const std::vector<Var>& parts);          // elementwise sum

// -log( sum_{i in correct} softmax(logits)_i ) for a 1xN logits row.
// `correct` must be non-empty; callers handle the empty case themselves.
Var marginal_cross_entropy(const Var& logits, const std::vector<int>& correct);

}  // namespace ad
}  // namespace opql
