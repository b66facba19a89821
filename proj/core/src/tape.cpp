#include "slf/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace slf {

namespace {

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapCM = Eigen::Map<const EMat>;

MapCM as_matrix(const Tensor& t) {
  return MapCM(t.data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}

MapM as_matrix(Tensor& t) {
  return MapM(t.data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

constexpr double kLayerNormEps = 1e-5;

double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double norm_pdf(double x) {
  return std::exp(-0.5 * x * x) * 0.3989422804014326779399460599344;
}

}  // namespace

namespace {

bool fast_all_finite(const Tensor& t) {
  return Eigen::Map<const Eigen::ArrayXd>(t.data(),
                                          static_cast<Eigen::Index>(t.size()))
      .allFinite();
}

template <typename Dst, typename A, typename B>
void accum_product(Dst dst, const A& a, const B& b) {
  dst.noalias() += a * b;
}

template <typename Dst, typename A, typename B>
void assign_product(Dst dst, const A& a, const B& b) {
  dst.noalias() = a * b;
}

}  // namespace

Var Tape::push(Node n, const char* opname) {
  if (!fast_all_finite(n.value))
    throw NumericError(std::string("tape: non-finite value produced by ") +
                       opname);
  if (nodes_.capacity() == nodes_.size())
    nodes_.reserve(nodes_.size() < 256 ? 512 : nodes_.size() * 2);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(const std::string& name, const Tensor& value) {
  if (leaf_names_.count(name))
    throw InputError("tape: duplicate trainable leaf '" + name + "'");
  Node n;
  n.op = Op::kLeaf;
  n.value = value;
  n.name = name;
  Var v = push(std::move(n), "leaf");
  leaves_.push_back(v.idx);
  leaf_names_[name] = v.idx;
  return v;
}

Var Tape::input(Tensor value) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(value);
  return push(std::move(n), "input");
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (ta.cols() != tb.rows())
    throw ShapeError("matmul: inner dimensions disagree");
  Node n;
  n.op = Op::kMatMul;
  n.a = a.idx;
  n.b = b.idx;
  n.value = Tensor({ta.rows(), tb.cols()});
  assign_product(as_matrix(n.value), as_matrix(ta), as_matrix(tb));
  return push(std::move(n), "matmul");
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (ta.cols() != tb.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree");
  Node n;
  n.op = Op::kMatMulNT;
  n.a = a.idx;
  n.b = b.idx;
  n.value = Tensor({ta.rows(), tb.rows()});
  assign_product(as_matrix(n.value), as_matrix(ta),
                 as_matrix(tb).transpose());
  return push(std::move(n), "matmul_nt");
}

Var Tape::transpose(Var a) {
  const Tensor& ta = node(a).value;
  Node n;
  n.op = Op::kTranspose;
  n.a = a.idx;
  n.value = Tensor({ta.cols(), ta.rows()});
  as_matrix(n.value) = as_matrix(ta).transpose();
  return push(std::move(n), "transpose");
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_matrix_shape(tb)) throw ShapeError("add: shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.a = a.idx;
  n.b = b.idx;
  n.value = ta;
  for (std::size_t i = 0; i < tb.size(); ++i) n.value[i] += tb[i];
  return push(std::move(n), "add");
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_matrix_shape(tb)) throw ShapeError("mul: shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.a = a.idx;
  n.b = b.idx;
  n.value = ta;
  for (std::size_t i = 0; i < tb.size(); ++i) n.value[i] *= tb[i];
  return push(std::move(n), "mul");
}

Var Tape::scale(Var a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.a = a.idx;
  n.factor = factor;
  n.value = node(a).value;
  Eigen::Map<Eigen::ArrayXd>(n.value.data(),
                             static_cast<Eigen::Index>(n.value.size())) *=
      factor;
  return push(std::move(n), "scale");
}

Var Tape::add_row_broadcast(Var a, Var bias) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(bias).value;
  if (tb.rows() != 1 || tb.cols() != ta.cols())
    throw ShapeError("add_row_broadcast: bias length must equal column count");
  Node n;
  n.op = Op::kAddRowBroadcast;
  n.a = a.idx;
  n.b = bias.idx;
  n.value = ta;
  const std::size_t r = ta.rows(), c = ta.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) n.value(i, j) += tb[j];
  return push(std::move(n), "add_row_broadcast");
}

Var Tape::gelu(Var a) {
  Node n;
  n.op = Op::kGelu;
  n.a = a.idx;
  n.value = node(a).value;
  for (std::size_t i = 0; i < n.value.size(); ++i)
    n.value[i] = n.value[i] * norm_cdf(n.value[i]);
  return push(std::move(n), "gelu");
}

Var Tape::masked_softmax(Var scores, const BoolMask* mask) {
  const Tensor& ts = node(scores).value;
  const std::size_t r = ts.rows(), c = ts.cols();
  if (mask && (mask->rows != r || mask->cols != c))
    throw ShapeError("masked_softmax: mask shape mismatch");
  Node n;
  n.op = Op::kMaskedSoftmax;
  n.a = scores.idx;
  if (mask) n.mask = *mask;
  n.value = Tensor({r, c});
  if (!mask) {
    using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
    for (std::size_t i = 0; i < r; ++i) {
      Eigen::Map<const RowArr> row(ts.data() + i * c,
                                   static_cast<Eigen::Index>(c));
      Eigen::Map<RowArr> out(n.value.data() + i * c,
                             static_cast<Eigen::Index>(c));
      out = (row - row.maxCoeff()).exp();
      out /= out.sum();
    }
  } else {
    for (std::size_t i = 0; i < r; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j)
        if (mask->at(i, j)) mx = std::max(mx, ts(i, j));
      if (!std::isfinite(mx))
        throw InputError("masked_softmax: fully masked row");
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (mask->at(i, j)) {
          const double e = std::exp(ts(i, j) - mx);
          n.value(i, j) = e;
          total += e;
        }
      }
      for (std::size_t j = 0; j < c; ++j) n.value(i, j) /= total;
    }
  }
  return push(std::move(n), "masked_softmax");
}

Var Tape::layer_norm(Var x, Var gain, Var shift) {
  const Tensor& tx = node(x).value;
  const Tensor& tg = node(gain).value;
  const Tensor& tb = node(shift).value;
  const std::size_t r = tx.rows(), d = tx.cols();
  if (d < 2) throw ShapeError("layer_norm: feature dimension must be >= 2");
  if (tg.size() != d || tb.size() != d)
    throw ShapeError("layer_norm: gain/shift length must equal columns");
  Node n;
  n.op = Op::kLayerNorm;
  n.a = x.idx;
  n.b = gain.idx;
  n.c = shift.idx;
  n.value = Tensor({r, d});
  n.aux = Tensor({r, 2});  // per-row mean and 1/sqrt(var + eps)
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += tx(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = tx(i, j) - mean;
      var += delta * delta;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    n.aux(i, 0) = mean;
    n.aux(i, 1) = inv;
    for (std::size_t j = 0; j < d; ++j)
      n.value(i, j) = (tx(i, j) - mean) * inv * tg[j] + tb[j];
  }
  return push(std::move(n), "layer_norm");
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t c = node(parts[0]).value.cols();
  std::size_t r = 0;
  for (Var p : parts) {
    if (node(p).value.cols() != c)
      throw ShapeError("concat_rows: column mismatch");
    r += node(p).value.rows();
  }
  Node n;
  n.op = Op::kConcatRows;
  n.value = Tensor({r, c});
  std::size_t off = 0;
  for (Var p : parts) {
    n.many.push_back(p.idx);
    const Tensor& tp = node(p).value;
    std::copy(tp.data(), tp.data() + tp.size(), n.value.data() + off);
    off += tp.size();
  }
  return push(std::move(n), "concat_rows");
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t r = node(parts[0]).value.rows();
  std::size_t c = 0;
  for (Var p : parts) {
    if (node(p).value.rows() != r)
      throw ShapeError("concat_cols: row mismatch");
    c += node(p).value.cols();
  }
  Node n;
  n.op = Op::kConcatCols;
  n.value = Tensor({r, c});
  std::size_t coff = 0;
  for (Var p : parts) {
    n.many.push_back(p.idx);
    const Tensor& tp = node(p).value;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < tp.cols(); ++j)
        n.value(i, coff + j) = tp(i, j);
    coff += tp.cols();
  }
  return push(std::move(n), "concat_cols");
}

Var Tape::row_range(Var a, std::size_t row0, std::size_t count) {
  const Tensor& ta = node(a).value;
  if (count == 0 || row0 + count > ta.rows())
    throw ShapeError("row_range: slice outside matrix");
  Node n;
  n.op = Op::kRowRange;
  n.a = a.idx;
  n.row0 = row0;
  n.value = Tensor({count, ta.cols()});
  std::copy(ta.data() + row0 * ta.cols(),
            ta.data() + (row0 + count) * ta.cols(), n.value.data());
  return push(std::move(n), "row_range");
}

Var Tape::sum(Var a) {
  const Tensor& ta = node(a).value;
  double s = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i];
  Node n;
  n.op = Op::kSum;
  n.a = a.idx;
  n.value = Tensor::scalar(s);
  return push(std::move(n), "sum");
}

Var Tape::dropout(Var a, Tensor keep_mask, double keep_prob) {
  const Tensor& ta = node(a).value;
  if (!keep_mask.same_matrix_shape(ta))
    throw ShapeError("dropout: mask shape mismatch");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw InputError("dropout: keep probability must be in (0,1]");
  Node n;
  n.op = Op::kDropout;
  n.a = a.idx;
  n.factor = 1.0 / keep_prob;
  n.aux = std::move(keep_mask);
  n.value = ta;
  for (std::size_t i = 0; i < n.value.size(); ++i)
    n.value[i] *= n.aux[i] * n.factor;
  return push(std::move(n), "dropout");
}

double Tape::scalar_value(Var v) const {
  const Tensor& t = node(v).value;
  if (t.size() != 1) throw ShapeError("scalar_value: tensor is not scalar");
  return t[0];
}

Tensor& Tape::touch_grad(int idx) {
  Node& n = nodes_[static_cast<std::size_t>(idx)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  Node& r = node(root);
  if (r.value.size() != 1)
    throw ShapeError("backward: root must be a scalar");
  for (Node& n : nodes_) n.grad = Tensor();
  touch_grad(root.idx)[0] = 1.0;

  for (int i = root.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.empty()) continue;  // unreachable from the root
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kInput:
        break;
      case Op::kMatMul: {
        const Tensor& ta = nodes_[n.a].value;
        const Tensor& tb = nodes_[n.b].value;
        accum_product(as_matrix(touch_grad(n.a)), as_matrix(g),
                      as_matrix(tb).transpose());
        accum_product(as_matrix(touch_grad(n.b)), as_matrix(ta).transpose(),
                      as_matrix(g));
        break;
      }
      case Op::kMatMulNT: {
        // y = a b^T: da += g b, db += g^T a.
        const Tensor& ta = nodes_[n.a].value;
        const Tensor& tb = nodes_[n.b].value;
        accum_product(as_matrix(touch_grad(n.a)), as_matrix(g),
                      as_matrix(tb));
        accum_product(as_matrix(touch_grad(n.b)), as_matrix(g).transpose(),
                      as_matrix(ta));
        break;
      }
      case Op::kTranspose:
        as_matrix(touch_grad(n.a)) += as_matrix(g).transpose();
        break;
      case Op::kAdd: {
        Tensor& ga = touch_grad(n.a);
        Tensor& gb = touch_grad(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k];
          gb[k] += g[k];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& ta = nodes_[n.a].value;
        const Tensor& tb = nodes_[n.b].value;
        Tensor& ga = touch_grad(n.a);
        Tensor& gb = touch_grad(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k] * tb[k];
          gb[k] += g[k] * ta[k];
        }
        break;
      }
      case Op::kScale: {
        Tensor& ga = touch_grad(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * n.factor;
        break;
      }
      case Op::kAddRowBroadcast: {
        Tensor& ga = touch_grad(n.a);
        Tensor& gb = touch_grad(n.b);
        const std::size_t rr = g.rows(), cc = g.cols();
        for (std::size_t ii = 0; ii < rr; ++ii)
          for (std::size_t jj = 0; jj < cc; ++jj) {
            ga(ii, jj) += g(ii, jj);
            gb[jj] += g(ii, jj);
          }
        break;
      }
      case Op::kGelu: {
        const Tensor& tx = nodes_[n.a].value;
        Tensor& ga = touch_grad(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double x = tx[k];
          ga[k] += g[k] * (norm_cdf(x) + x * norm_pdf(x));
        }
        break;
      }
      case Op::kMaskedSoftmax: {
        const Tensor& y = n.value;
        Tensor& ga = touch_grad(n.a);
        const std::size_t rr = y.rows(), cc = y.cols();
        for (std::size_t ii = 0; ii < rr; ++ii) {
          double dot = 0.0;
          for (std::size_t jj = 0; jj < cc; ++jj)
            dot += g(ii, jj) * y(ii, jj);
          for (std::size_t jj = 0; jj < cc; ++jj) {
            if (n.mask && !n.mask->at(ii, jj)) continue;
            ga(ii, jj) += y(ii, jj) * (g(ii, jj) - dot);
          }
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& tx = nodes_[n.a].value;
        const Tensor& tg = nodes_[n.b].value;
        Tensor& gx = touch_grad(n.a);
        Tensor& ggain = touch_grad(n.b);
        Tensor& gshift = touch_grad(n.c);
        const std::size_t rr = tx.rows(), d = tx.cols();
        const double dd = static_cast<double>(d);
        for (std::size_t ii = 0; ii < rr; ++ii) {
          const double mean = n.aux(ii, 0);
          const double inv = n.aux(ii, 1);
          double sum_gh = 0.0, sum_ghx = 0.0;
          for (std::size_t jj = 0; jj < d; ++jj) {
            const double xhat = (tx(ii, jj) - mean) * inv;
            const double gh = g(ii, jj) * tg[jj];
            ggain[jj] += g(ii, jj) * xhat;
            gshift[jj] += g(ii, jj);
            sum_gh += gh;
            sum_ghx += gh * xhat;
          }
          for (std::size_t jj = 0; jj < d; ++jj) {
            const double xhat = (tx(ii, jj) - mean) * inv;
            const double gh = g(ii, jj) * tg[jj];
            gx(ii, jj) += inv * (gh - sum_gh / dd - xhat * sum_ghx / dd);
          }
        }
        break;
      }
      case Op::kConcatRows: {
        std::size_t off = 0;
        for (int p : n.many) {
          Tensor& gp = touch_grad(p);
          for (std::size_t k = 0; k < gp.size(); ++k) gp[k] += g[off + k];
          off += gp.size();
        }
        break;
      }
      case Op::kConcatCols: {
        std::size_t coff = 0;
        const std::size_t rr = g.rows();
        for (int p : n.many) {
          Tensor& gp = touch_grad(p);
          const std::size_t pc = gp.cols();
          for (std::size_t ii = 0; ii < rr; ++ii)
            for (std::size_t jj = 0; jj < pc; ++jj)
              gp(ii, jj) += g(ii, coff + jj);
          coff += pc;
        }
        break;
      }
      case Op::kRowRange: {
        Tensor& ga = touch_grad(n.a);
        const std::size_t cc = ga.cols();
        for (std::size_t k = 0; k < g.size(); ++k)
          ga[n.row0 * cc + k] += g[k];
        break;
      }
      case Op::kSum: {
        Tensor& ga = touch_grad(n.a);
        for (std::size_t k = 0; k < ga.size(); ++k) ga[k] += g[0];
        break;
      }
      case Op::kDropout: {
        Tensor& ga = touch_grad(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          ga[k] += g[k] * n.aux[k] * n.factor;
        break;
      }
    }
  }
}

std::map<std::string, Tensor> Tape::gradient_map() const {
  std::map<std::string, Tensor> out;
  for (int idx : leaves_) {
    const Node& n = nodes_[static_cast<std::size_t>(idx)];
    out[n.name] = n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }
  return out;
}

void Tape::for_each_leaf_gradient(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  for (int idx : leaves_) {
    const Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (n.grad.empty()) {
      Tensor zero(n.value.shape());
      fn(n.name, zero);
    } else {
      fn(n.name, n.grad);
    }
  }
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) {
    const_cast<Tape*>(this)->zero_cache_ = Tensor(n.value.shape());
    return zero_cache_;
  }
  return n.grad;
}

}  // namespace slf
