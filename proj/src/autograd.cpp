#include "opql/autograd.hpp"

#include <cassert>
#include <cmath>
#include <utility>

#include "opql/errors.hpp"

namespace opql::ad {

const Mat& Var::value() const { return tape_->value(index_); }
const Mat& Var::grad() const { return tape_->grad(index_); }

Var Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::emit(Mat value, std::vector<int> parents, std::function<void(Tape&, const Mat&)> backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) {
    if (nodes_[p].requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Mat& Tape::grad(int index) { return grad_ref(index); }

Mat& Tape::grad_ref(int index) {
  Node& n = nodes_[index];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& output) {
  assert(output.tape() == this);
  const int out = output.index();
  if (nodes_[out].value.rows() != 1 || nodes_[out].value.cols() != 1) {
    throw Error("backward() requires a scalar (1x1) output node");
  }
  grad_ref(out)(0, 0) += 1.0;
  for (int i = out; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.size() == 0) continue;  // not on any path to the output
    n.backward(*this, n.grad);
  }
}

namespace {

Tape* tape_of(const Var& a) { return a.tape(); }

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ib = b.index();
  return t.emit(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ib = b.index();
  return t.emit(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, Mat(-g));
  });
}

Var add_rowvec(const Var& a, const Var& row) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ir = row.index();
  Mat v = a.value();
  v.rowwise() += row.value().row(0);
  return t.emit(std::move(v), {ia, ir}, [ia, ir](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ir, Mat(g.colwise().sum()));
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ib = b.index();
  return t.emit(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g.cwiseProduct(t.value(ib))));
    t.accumulate(ib, Mat(g.cwiseProduct(t.value(ia))));
  });
}

Var mul_scalar(const Var& a, const Var& s) {
  Tape& t = *tape_of(a);
  int ia = a.index(), is = s.index();
  const double sv = s.value()(0, 0);
  return t.emit(a.value() * sv, {ia, is}, [ia, is, sv](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g * sv));
    Mat gs(1, 1);
    gs(0, 0) = (g.cwiseProduct(t.value(ia))).sum();
    t.accumulate(is, gs);
  });
}

Var scale(const Var& a, double c) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  return t.emit(a.value() * c, {ia}, [ia, c](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g * c));
  });
}

Var affine(const Var& a, double alpha, double beta) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat v = (a.value().array() * alpha + beta).matrix();
  return t.emit(std::move(v), {ia}, [ia, alpha](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g * alpha));
  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ib = b.index();
  return t.emit(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g * t.value(ib).transpose()));
    t.accumulate(ib, Mat(t.value(ia).transpose() * g));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ib = b.index();
  return t.emit(a.value() * b.value().transpose(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g * t.value(ib)));
    t.accumulate(ib, Mat(g.transpose() * t.value(ia)));
  });
}

Var gather_rows(const Var& a, std::vector<int> rows) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  const Mat& src = a.value();
  Mat out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= src.rows()) throw IndexOutOfRangeError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  return t.emit(std::move(out), {ia}, [ia, rows = std::move(rows)](Tape& t, const Mat& g) {
    if (!t.requires_grad(ia)) return;
    Mat& dst = t.grad_ref(ia);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      dst.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var gather_cols(const Var& a, std::vector<int> cols) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  const Mat& src = a.value();
  Mat out(src.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] < 0 || cols[i] >= src.cols()) throw IndexOutOfRangeError("gather_cols: col index out of range");
    out.col(static_cast<Eigen::Index>(i)) = src.col(cols[i]);
  }
  return t.emit(std::move(out), {ia}, [ia, cols = std::move(cols)](Tape& t, const Mat& g) {
    if (!t.requires_grad(ia)) return;
    Mat& dst = t.grad_ref(ia);
    for (std::size_t i = 0; i < cols.size(); ++i) {
      dst.col(cols[i]) += g.col(static_cast<Eigen::Index>(i));
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  Tape& t = *tape_of(parts.front());
  Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> idx;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    cols += p.cols();
    idx.push_back(p.index());
    widths.push_back(p.cols());
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.emit(std::move(out), idx, [idx, widths](Tape& t, const Mat& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], Mat(g.middleCols(off, widths[i])));
      off += widths[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  Tape& t = *tape_of(parts.front());
  Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> idx;
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) {
    rows += p.rows();
    idx.push_back(p.index());
    heights.push_back(p.rows());
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.emit(std::move(out), idx, [idx, heights](Tape& t, const Mat& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      t.accumulate(idx[i], Mat(g.middleRows(off, heights[i])));
      off += heights[i];
    }
  });
}

Var softmax_rows(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  int self = static_cast<int>(t.size());
  return t.emit(std::move(y), {ia}, [ia, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    Mat dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).cwiseProduct(y.row(r)).sum();
      dx.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    t.accumulate(ia, dx);
  });
}

Var logsumexp_row(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  const Mat& x = a.value();
  const double m = x.maxCoeff();
  const double s = (x.array() - m).exp().sum();
  Mat out(1, 1);
  out(0, 0) = m + std::log(s);
  const double lse = out(0, 0);
  return t.emit(std::move(out), {ia}, [ia, lse](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    Mat dx = (x.array() - lse).exp().matrix() * g(0, 0);
    t.accumulate(ia, dx);
  });
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps) {
  Tape& t = *tape_of(a);
  int ia = a.index(), ig = gain.index(), ib = bias.index();
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Mat inv_sigma(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(r, 0) = is;
    xhat.row(r) = (x.row(r).array() - mu) * is;
  }
  Mat y = xhat;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    y.row(r) = y.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
  }
  // Capture normalized activations by value; backward needs them.
  return t.emit(std::move(y), {ia, ig, ib},
                [ia, ig, ib, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Tape& t, const Mat& g) {
    const Eigen::Index n = xhat.cols();
    t.accumulate(ib, Mat(g.colwise().sum()));
    t.accumulate(ig, Mat(g.cwiseProduct(xhat).colwise().sum()));
    if (!t.requires_grad(ia)) return;
    const Mat& gain = t.value(ig);
    Mat dx(xhat.rows(), n);
    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
      Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gain.row(0));
      const double mean_dxhat = dxhat.mean();
      const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).mean();
      dx.row(r) = (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat) * inv_sigma(r, 0);
    }
    t.accumulate(ia, dx);
  });
}

Var gelu(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  const Mat& x = a.value();
  Mat y(x.rows(), x.cols());
  const double inv_sqrt2 = 0.7071067811865475244;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    y.data()[i] = v * 0.5 * (1.0 + std::erf(v * inv_sqrt2));
  }
  return t.emit(std::move(y), {ia}, [ia](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    Mat dx(x.rows(), x.cols());
    const double inv_sqrt2 = 0.7071067811865475244;
    const double inv_sqrt2pi = 0.3989422804014326779;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      dx.data()[i] = g.data()[i] * (cdf + v * pdf);
    }
    t.accumulate(ia, dx);
  });
}

Var sum_all(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.emit(std::move(out), {ia}, [ia](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    t.accumulate(ia, Mat(Mat::Constant(x.rows(), x.cols(), g(0, 0))));
  });
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var exp(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat y = a.value().array().exp().matrix();
  int self = static_cast<int>(t.size());
  return t.emit(std::move(y), {ia}, [ia, self](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g.cwiseProduct(t.value(self))));
  });
}

Var log(const Var& a) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat y = a.value().array().log().matrix();
  return t.emit(std::move(y), {ia}, [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat(g.cwiseQuotient(t.value(ia))));
  });
}

Var clamp_min(const Var& a, double floor) {
  Tape& t = *tape_of(a);
  int ia = a.index();
  Mat y = a.value().cwiseMax(floor);
  return t.emit(std::move(y), {ia}, [ia, floor](Tape& t, const Mat& g) {
    const Mat& x = t.value(ia);
    Mat dx = (x.array() > floor).cast<double>() * g.array();
    t.accumulate(ia, dx);
  });
}

Var add_n(const std::vector<Var>& parts) {
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

Var marginal_cross_entropy(const Var& logits, const std::vector<int>& correct) {
  if (correct.empty()) throw Error("marginal_cross_entropy: empty correct set");
  Var lse_all = logsumexp_row(logits);
  Var picked = gather_cols(logits, correct);
  Var lse_correct = logsumexp_row(picked);
  return sub(lse_all, lse_correct);
}

}  // namespace opql::ad
