#include "cvl/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace cvl::ad {

namespace {

void require_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("autodiff: shape mismatch in " + what);
}

}  // namespace

const Mat& Var::val() const { return tape_->node(*this).value; }
const Mat& Var::grad() const { return tape_->node(*this).grad; }
Eigen::Index Var::rows() const { return val().rows(); }
Eigen::Index Var::cols() const { return val().cols(); }
bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }

Var Tape::push(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_same_tape(Var v) const {
  if (v.tape_ != this) throw std::invalid_argument("autodiff: Var belongs to a different tape");
}

Mat& Tape::gbuf(int idx) {
  nodes_[idx].touched = true;
  return nodes_[idx].grad;
}

void Tape::clear() {
  nodes_.clear();
  swept_ = false;
}

Var Tape::constant(Mat v) { return push(std::move(v), false); }
Var Tape::param(Mat v) { return push(std::move(v), true); }

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Var out = push(node(a).value + node(b).value, node(a).requires_grad || node(b).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(out).back = [this, ai, bi, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += g;
      if (nodes_[bi].requires_grad) gbuf(bi) += g;
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Var out = push(node(a).value - node(b).value, node(a).requires_grad || node(b).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(out).back = [this, ai, bi, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += g;
      if (nodes_[bi].requires_grad) gbuf(bi) -= g;
    };
  }
  return out;
}

Var Tape::add_rowvec(Var a, Var row) {
  check_same_tape(a);
  check_same_tape(row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_rowvec");
  Mat v = node(a).value;
  v.rowwise() += node(row).value.row(0);
  Var out = push(std::move(v), node(a).requires_grad || node(row).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, ri = row.idx_, oi = out.idx_;
    node(out).back = [this, ai, ri, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += g;
      if (nodes_[ri].requires_grad) gbuf(ri) += g.colwise().sum();
    };
  }
  return out;
}

Var Tape::cmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "cmul");
  Var out = push(node(a).value.cwiseProduct(node(b).value),
                 node(a).requires_grad || node(b).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(out).back = [this, ai, bi, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += g.cwiseProduct(nodes_[bi].value);
      if (nodes_[bi].requires_grad) gbuf(bi) += g.cwiseProduct(nodes_[ai].value);
    };
  }
  return out;
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a);
  Var out = push(node(a).value * c, node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, c] { gbuf(ai) += c * nodes_[oi].grad; };
  }
  return out;
}

Var Tape::mul_scalar(Var a, Var s) {
  check_same_tape(a);
  check_same_tape(s);
  require_shape(s.rows() == 1 && s.cols() == 1, "mul_scalar");
  const double sv = node(s).value(0, 0);
  Var out = push(node(a).value * sv, node(a).requires_grad || node(s).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, si = s.idx_, oi = out.idx_;
    node(out).back = [this, ai, si, oi, sv] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += sv * g;
      if (nodes_[si].requires_grad) gbuf(si)(0, 0) += g.cwiseProduct(nodes_[ai].value).sum();
    };
  }
  return out;
}

Var Tape::div_scalar(Var a, Var s) {
  check_same_tape(a);
  check_same_tape(s);
  require_shape(s.rows() == 1 && s.cols() == 1, "div_scalar");
  const double sv = node(s).value(0, 0);
  if (sv == 0.0) throw std::invalid_argument("autodiff: div_scalar by zero");
  Var out = push(node(a).value / sv, node(a).requires_grad || node(s).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, si = s.idx_, oi = out.idx_;
    node(out).back = [this, ai, si, oi, sv] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai) += g / sv;
      if (nodes_[si].requires_grad)
        gbuf(si)(0, 0) -= g.cwiseProduct(nodes_[ai].value).sum() / (sv * sv);
    };
  }
  return out;
}

Var Tape::exp(Var a) {
  check_same_tape(a);
  Var out = push(node(a).value.array().exp().matrix(), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi] {
      gbuf(ai) += nodes_[oi].grad.cwiseProduct(nodes_[oi].value);
    };
  }
  return out;
}

Var Tape::grad_root(Var a) {
  check_same_tape(a);
  Var out = push(node(a).value, true);
  const int ai = a.idx_, oi = out.idx_;
  node(out).back = [this, ai, oi] {
    if (nodes_[ai].requires_grad) gbuf(ai) += nodes_[oi].grad;
  };
  return out;
}

Var Tape::gelu(Var a) {
  check_same_tape(a);
  const auto cdf = [](double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); };
  Mat v = node(a).value.unaryExpr([&](double x) { return x * cdf(x); });
  Var out = push(std::move(v), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, cdf] {
      const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      Mat d = nodes_[ai].value.unaryExpr([&](double x) {
        return cdf(x) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
      gbuf(ai) += nodes_[oi].grad.cwiseProduct(d);
    };
  }
  return out;
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_shape(a.cols() == b.rows(), "matmul");
  Mat v;
  v.noalias() = node(a).value * node(b).value;
  Var out = push(std::move(v), node(a).requires_grad || node(b).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(out).back = [this, ai, bi, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai).noalias() += g * nodes_[bi].value.transpose();
      if (nodes_[bi].requires_grad) gbuf(bi).noalias() += nodes_[ai].value.transpose() * g;
    };
  }
  return out;
}

Var Tape::matmul_nt(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  require_shape(a.cols() == b.cols(), "matmul_nt");
  Mat v;
  v.noalias() = node(a).value * node(b).value.transpose();
  Var out = push(std::move(v), node(a).requires_grad || node(b).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, bi = b.idx_, oi = out.idx_;
    node(out).back = [this, ai, bi, oi] {
      const Mat& g = nodes_[oi].grad;
      if (nodes_[ai].requires_grad) gbuf(ai).noalias() += g * nodes_[bi].value;
      if (nodes_[bi].requires_grad) gbuf(bi).noalias() += g.transpose() * nodes_[ai].value;
    };
  }
  return out;
}

Var Tape::transpose(Var a) {
  check_same_tape(a);
  Var out = push(node(a).value.transpose(), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi] { gbuf(ai) += nodes_[oi].grad.transpose(); };
  }
  return out;
}

Var Tape::softmax_rows(Var a) {
  check_same_tape(a);
  Mat p(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const auto row = node(a).value.row(r).array();
    const Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
    p.row(r) = (e / e.sum()).matrix();
  }
  Var out = push(std::move(p), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi] {
      const Mat& g = nodes_[oi].grad;
      const Mat& pv = nodes_[oi].value;
      Mat& ga = gbuf(ai);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double dot = g.row(r).cwiseProduct(pv.row(r)).sum();
        ga.row(r) += pv.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
      }
    };
  }
  return out;
}

Var Tape::log_softmax_rows(Var a) {
  check_same_tape(a);
  Mat lp(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const auto row = node(a).value.row(r).array();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row - m).exp().sum());
    lp.row(r) = (row - lse).matrix();
  }
  Var out = push(std::move(lp), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi] {
      const Mat& g = nodes_[oi].grad;
      const Mat p = nodes_[oi].value.array().exp().matrix();
      Mat& ga = gbuf(ai);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        ga.row(r) += g.row(r) - g.row(r).sum() * p.row(r);
      }
    };
  }
  return out;
}

Var Tape::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check_same_tape(x);
  check_same_tape(gamma);
  check_same_tape(beta);
  require_shape(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm_rows gamma");
  require_shape(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm_rows beta");
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto row = node(x).value.row(r).array();
    const double mu = row.mean();
    const double var = (row - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((row - mu) * is).matrix();
  }
  Mat v = xhat;
  v.array().rowwise() *= node(gamma).value.row(0).array();
  v.rowwise() += node(beta).value.row(0);
  const bool rg = node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
  Var out = push(std::move(v), rg);
  if (rg) {
    const int xi = x.idx_, gi = gamma.idx_, bi = beta.idx_, oi = out.idx_;
    node(out).back = [this, xi, gi, bi, oi, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)] {
      using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
      const Mat& g = nodes_[oi].grad;
      if (nodes_[bi].requires_grad) gbuf(bi) += g.colwise().sum();
      if (nodes_[gi].requires_grad) gbuf(gi) += g.cwiseProduct(xhat).colwise().sum();
      if (nodes_[xi].requires_grad) {
        Mat& gx = gbuf(xi);
        const RowArr gammav = nodes_[gi].value.row(0).array();
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const RowArr gy = g.row(r).array() * gammav;
          const RowArr xh = xhat.row(r).array();
          const double mean_gy = gy.mean();
          const double mean_gy_xh = (gy * xh).mean();
          gx.row(r) += (inv_std(r) * (gy - mean_gy - xh * mean_gy_xh)).matrix();
        }
      }
    };
  }
  return out;
}

Var Tape::l2_normalize_rows(Var x, double eps) {
  check_same_tape(x);
  Mat v(x.rows(), x.cols());
  Eigen::VectorXd norms(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = std::sqrt(node(x).value.row(r).squaredNorm() + eps);
    norms(r) = n;
    v.row(r) = node(x).value.row(r) / n;
  }
  Var out = push(std::move(v), node(x).requires_grad);
  if (node(out).requires_grad) {
    const int xi = x.idx_, oi = out.idx_;
    node(out).back = [this, xi, oi, norms = std::move(norms)] {
      const Mat& g = nodes_[oi].grad;
      const Mat& xv = nodes_[xi].value;
      Mat& gx = gbuf(xi);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double n = norms(r);
        const double dot = xv.row(r).cwiseProduct(g.row(r)).sum();
        gx.row(r) += g.row(r) / n - xv.row(r) * (dot / (n * n * n));
      }
    };
  }
  return out;
}

Var Tape::slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  check_same_tape(a);
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows");
  Var out = push(node(a).value.middleRows(start, count), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, start, count] {
      gbuf(ai).middleRows(start, count) += nodes_[oi].grad;
    };
  }
  return out;
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  check_same_tape(a);
  require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols");
  Var out = push(node(a).value.middleCols(start, count), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, start, count] {
      gbuf(ai).middleCols(start, count) += nodes_[oi].grad;
    };
  }
  return out;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autodiff: concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool rg = false;
  for (Var p : parts) {
    check_same_tape(p);
    require_shape(p.cols() == cols, "concat_rows");
    rows += p.rows();
    rg = rg || node(p).requires_grad;
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  std::vector<int> idxs;
  idxs.reserve(parts.size());
  for (Var p : parts) {
    v.middleRows(at, p.rows()) = node(p).value;
    at += p.rows();
    idxs.push_back(p.idx_);
  }
  Var out = push(std::move(v), rg);
  if (rg) {
    const int oi = out.idx_;
    node(out).back = [this, oi, idxs = std::move(idxs)] {
      const Mat& g = nodes_[oi].grad;
      Eigen::Index at = 0;
      for (int pi : idxs) {
        const Eigen::Index r = nodes_[pi].value.rows();
        if (nodes_[pi].requires_grad) gbuf(pi) += g.middleRows(at, r);
        at += r;
      }
    };
  }
  return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("autodiff: concat_cols of nothing");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool rg = false;
  for (Var p : parts) {
    check_same_tape(p);
    require_shape(p.rows() == rows, "concat_cols");
    cols += p.cols();
    rg = rg || node(p).requires_grad;
  }
  Mat v(rows, cols);
  Eigen::Index at = 0;
  std::vector<int> idxs;
  idxs.reserve(parts.size());
  for (Var p : parts) {
    v.middleCols(at, p.cols()) = node(p).value;
    at += p.cols();
    idxs.push_back(p.idx_);
  }
  Var out = push(std::move(v), rg);
  if (rg) {
    const int oi = out.idx_;
    node(out).back = [this, oi, idxs = std::move(idxs)] {
      const Mat& g = nodes_[oi].grad;
      Eigen::Index at = 0;
      for (int pi : idxs) {
        const Eigen::Index c = nodes_[pi].value.cols();
        if (nodes_[pi].requires_grad) gbuf(pi) += g.middleCols(at, c);
        at += c;
      }
    };
  }
  return out;
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  check_same_tape(table);
  Mat v(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw std::invalid_argument("autodiff: gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(i)) = node(table).value.row(ids[i]);
  }
  Var out = push(std::move(v), node(table).requires_grad);
  if (node(out).requires_grad) {
    const int ti = table.idx_, oi = out.idx_;
    node(out).back = [this, ti, oi, ids = std::move(ids)] {
      const Mat& g = nodes_[oi].grad;
      Mat& gt = gbuf(ti);
      for (size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  }
  return out;
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  Mat v(1, 1);
  v(0, 0) = node(a).value.sum();
  Var out = push(std::move(v), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi] { gbuf(ai).array() += nodes_[oi].grad(0, 0); };
  }
  return out;
}

Var Tape::mean(Var a) {
  check_same_tape(a);
  const double inv = 1.0 / static_cast<double>(a.rows() * a.cols());
  Mat v(1, 1);
  v(0, 0) = node(a).value.sum() * inv;
  Var out = push(std::move(v), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, inv] { gbuf(ai).array() += nodes_[oi].grad(0, 0) * inv; };
  }
  return out;
}

Var Tape::weighted_sum(Var a, Mat weights) {
  check_same_tape(a);
  require_shape(weights.rows() == a.rows() && weights.cols() == a.cols(), "weighted_sum");
  Mat v(1, 1);
  v(0, 0) = node(a).value.cwiseProduct(weights).sum();
  Var out = push(std::move(v), node(a).requires_grad);
  if (node(out).requires_grad) {
    const int ai = a.idx_, oi = out.idx_;
    node(out).back = [this, ai, oi, w = std::move(weights)] {
      gbuf(ai) += nodes_[oi].grad(0, 0) * w;
    };
  }
  return out;
}

void Tape::backward(Var loss) {
  check_same_tape(loss);
  if (swept_) throw std::logic_error("autodiff: backward called twice on one tape");
  require_shape(loss.rows() == 1 && loss.cols() == 1, "backward (loss must be 1x1)");
  if (!node(loss).requires_grad)
    throw std::invalid_argument("autodiff: backward on a non-tracked value");
  swept_ = true;
  gbuf(loss.idx_)(0, 0) = 1.0;
  for (int i = loss.idx_; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.touched && n.back) n.back();
  }
}

}  // namespace cvl::ad
