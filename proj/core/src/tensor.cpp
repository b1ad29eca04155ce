#include "voxsteer/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numeric>
#include <sstream>

namespace voxsteer {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e <= 0) throw ContractError("shape has non-positive extent " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::MulScalar: return "mul-scalar";
    case OpKind::MulElem: return "mul-elementwise";
    case OpKind::LayerNorm: return "layer-norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::Gelu: return "gelu";
    case OpKind::EmbeddingLookup: return "embedding-lookup";
    case OpKind::Concat: return "concat";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::ReduceMean: return "reduce-mean";
    case OpKind::ReduceSum: return "reduce-sum";
    case OpKind::Square: return "square";
    case OpKind::LogSigmoid: return "log-sigmoid";
    case OpKind::MaskedSelect: return "masked-select";
  }
  return "?";
}

namespace {

void blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              int(m), int(n), int(k), alpha, a, int(ta ? m : k), b, int(tb ? k : n), beta, c, int(n));
}
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  blas_single_thread();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              int(m), int(n), int(k), alpha, a, int(ta ? m : k), b, int(tb ? k : n), beta, c, int(n));
}

Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ContractError(std::string(op_name(kind)) + ": shapes " + shape_str(a) + " and " +
                          shape_str(b) + " are not broadcastable");
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Per-dimension input strides aligned to the (padded) output shape, with 0 on
// broadcast dimensions.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  size_t off = out.size() - in.size();
  for (size_t i = in.size(); i-- > 0;) {
    strides[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : s;
    s *= in[i];
  }
  return strides;
}

bool contiguous_match(const Shape& in, const Shape& out) { return in == out; }

// Returns tail length when `in` broadcasts as a pure suffix of `out`
// (leading dims of size 1), else -1.
int64_t suffix_tail(const Shape& in, const Shape& out) {
  size_t off = out.size() - in.size();
  int64_t tail = 1;
  size_t i = in.size();
  while (i > 0 && in[i - 1] == out[off + i - 1]) {
    tail *= in[i - 1];
    --i;
  }
  for (size_t j = 0; j < i; ++j)
    if (in[j] != 1) return -1;
  return tail;
}

template <class R, class F>
void bcast_forward(const Shape& ash, const R* a, const Shape& bsh, const R* b, const Shape& out,
                   R* dst, F f) {
  int64_t n = 1;
  for (int64_t e : out) n *= e;
  if (contiguous_match(ash, out) && contiguous_match(bsh, out)) {
    for (int64_t i = 0; i < n; ++i) dst[i] = f(a[i], b[i]);
    return;
  }
  int64_t ta = suffix_tail(ash, out), tb = suffix_tail(bsh, out);
  if (contiguous_match(ash, out) && tb >= 0) {
    for (int64_t i = 0; i < n; ++i) dst[i] = f(a[i], b[i % tb]);
    return;
  }
  if (ta >= 0 && contiguous_match(bsh, out)) {
    for (int64_t i = 0; i < n; ++i) dst[i] = f(a[i % ta], b[i]);
    return;
  }
  auto sa = bcast_strides(ash, out), sb = bcast_strides(bsh, out);
  std::vector<int64_t> coord(out.size(), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = f(a[ia], b[ib]);
    for (size_t d = out.size(); d-- > 0;) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      coord[d] = 0;
    }
  }
}

// Accumulates dst[map(i)] += g[i] * w(i) where map follows broadcast strides.
template <class R, class W>
void bcast_backward(const Shape& in, R* dst, const Shape& out, const R* g, W w) {
  int64_t n = 1;
  for (int64_t e : out) n *= e;
  if (contiguous_match(in, out)) {
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * w(i);
    return;
  }
  int64_t t = suffix_tail(in, out);
  if (t >= 0) {
    for (int64_t i = 0; i < n; ++i) dst[i % t] += g[i] * w(i);
    return;
  }
  auto s = bcast_strides(in, out);
  std::vector<int64_t> coord(out.size(), 0);
  int64_t ii = 0;
  for (int64_t i = 0; i < n; ++i) {
    dst[ii] += g[i] * w(i);
    for (size_t d = out.size(); d-- > 0;) {
      ++coord[d];
      ii += s[d];
      if (coord[d] < out[d]) break;
      ii -= s[d] * out[d];
      coord[d] = 0;
    }
  }
}

template <class R>
void permute_raw(const Shape& in_shape, const R* in, const std::vector<int>& axes, Shape& out_shape,
                 R* out) {
  size_t rank = in_shape.size();
  std::vector<int64_t> out_strides(rank);
  int64_t s = 1;
  for (size_t i = rank; i-- > 0;) {
    out_strides[i] = s;
    s *= out_shape[i];
  }
  // stride in the output for a unit step along input dim d
  std::vector<int64_t> step(rank);
  for (size_t o = 0; o < rank; ++o) step[size_t(axes[o])] = out_strides[o];
  std::vector<int64_t> coord(rank, 0);
  int64_t n = s, oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[oi] = in[i];
    for (size_t d = rank; d-- > 0;) {
      ++coord[d];
      oi += step[d];
      if (coord[d] < in_shape[d]) break;
      oi -= step[d] * in_shape[d];
      coord[d] = 0;
    }
  }
}

template <class R>
bool all_finite(const R* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(double(p[i]))) return false;
  return true;
}

struct MatmulDims {
  int64_t batch = 1, m = 0, k = 0, n = 0;
  bool b_is_2d = false;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ContractError("matmul: operands must have rank >= 2, got " + shape_str(a) + " and " +
                        shape_str(b));
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  if (b.size() == 2) {
    d.b_is_2d = true;
    if (b[0] != d.k)
      throw ContractError("matmul: inner extents differ, " + shape_str(a) + " x " + shape_str(b));
    d.n = b[1];
    for (size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
    return d;
  }
  if (a.size() != b.size())
    throw ContractError("matmul: rank mismatch " + shape_str(a) + " x " + shape_str(b));
  if (b[b.size() - 2] != d.k)
    throw ContractError("matmul: inner extents differ, " + shape_str(a) + " x " + shape_str(b));
  d.n = b[b.size() - 1];
  for (size_t i = 0; i + 2 < a.size(); ++i) {
    if (a[i] != b[i])
      throw ContractError("matmul: batch extents differ, " + shape_str(a) + " x " + shape_str(b));
    d.batch *= a[i];
  }
  return d;
}

}  // namespace

template <class R>
bool Graph<R>::tracked(const Tensor<R>& t) const {
  if (t.owner == this && t.node >= 0) return true;
  return t.requires_grad && (t.owner == nullptr || t.owner == this);
}

template <class R>
int Graph<R>::leaf_id(const Tensor<R>& t) {
  auto it = leaves_.find(t.data.get());
  if (it != leaves_.end()) return it->second;
  int id = int(nodes_.size());
  nodes_.push_back(Node{OpKind::Reshape, {}, t.size(), nullptr});
  leaves_.emplace(t.data.get(), id);
  leaf_keepalive_.push_back(t.data);
  return id;
}

template <class R>
int Graph<R>::input_id(const Tensor<R>& t) {
  if (!t.data) throw ContractError("op input has no data");
  if (t.owner == this && t.node >= 0) return t.node;
  if (t.requires_grad && (t.owner == nullptr || t.owner == this)) return leaf_id(t);
  return -1;
}

template <class R>
void Graph<R>::check_finite(const Tensor<R>& t, OpKind kind, const char* role) const {
  if (!check_numerics_) return;
  if (!all_finite(t.ptr(), t.size()))
    throw NumericFault(std::string(op_name(kind)) + ": non-finite " + role + " tensor " +
                       shape_str(t.shape));
}

template <class R>
Tensor<R> Graph<R>::make_output(Shape shape, std::vector<R> vals, OpKind kind,
                                std::vector<int> input_ids, std::function<void(Graph&, int)> back) {
  Tensor<R> out;
  out.shape = std::move(shape);
  out.data = std::make_shared<std::vector<R>>(std::move(vals));
  check_finite(out, kind, "output");
  bool any = false;
  for (int id : input_ids)
    if (id >= 0) any = true;
  if (any) {
    int id = int(nodes_.size());
    nodes_.push_back(Node{kind, std::move(input_ids), out.size(), std::move(back)});
    out.node = id;
    out.owner = this;
    out.requires_grad = true;
  }
  return out;
}

template <class R>
std::vector<R>& Graph<R>::grad_buf(int id, int64_t numel) {
  if (grads_[size_t(id)].empty()) grads_[size_t(id)].assign(size_t(numel), R(0));
  return grads_[size_t(id)];
}

template <class R>
void Graph<R>::backward(const Tensor<R>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
  if (nodes_.empty()) throw ContractError("backward: graph is empty");
  grads_.assign(nodes_.size(), {});
  if (!(loss.owner == this && loss.node >= 0))
    throw ContractError("backward: loss was not produced by this graph");
  grads_[size_t(loss.node)] = {R(1)};
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[size_t(i)].empty()) continue;
    if (nodes_[size_t(i)].back) nodes_[size_t(i)].back(*this, i);
  }
}

template <class R>
const std::vector<R>* Graph<R>::grad_of(const Tensor<R>& leaf) const {
  auto it = leaves_.find(leaf.data.get());
  if (it == leaves_.end()) return nullptr;
  const auto& g = grads_[size_t(it->second)];
  return g.empty() ? nullptr : &g;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> Graph<R>::matmul(const Tensor<R>& a, const Tensor<R>& b) {
  auto d = matmul_dims(a.shape, b.shape);
  check_finite(a, OpKind::Matmul, "input");
  check_finite(b, OpKind::Matmul, "input");
  Shape out_shape;
  if (d.b_is_2d) {
    out_shape = a.shape;
    out_shape.back() = d.n;
  } else {
    out_shape = a.shape;
    out_shape[out_shape.size() - 2] = d.m;
    out_shape.back() = d.n;
  }
  std::vector<R> out(size_t(d.batch * d.m * d.n));
  const R* ap = a.ptr();
  const R* bp = b.ptr();
  if (d.b_is_2d) {
    gemm(false, false, d.batch * d.m, d.n, d.k, R(1), ap, bp, R(0), out.data());
  } else {
    for (int64_t i = 0; i < d.batch; ++i)
      gemm(false, false, d.m, d.n, d.k, R(1), ap + i * d.m * d.k, bp + i * d.k * d.n, R(0),
           out.data() + i * d.m * d.n);
  }
  int ia = input_id(a), ib = input_id(b);
  auto adata = a.data;
  auto bdata = b.data;
  return make_output(
      std::move(out_shape), std::move(out), OpKind::Matmul, {ia, ib},
      [=](Graph& g, int self) {
        const auto& gy = g.grads_[size_t(self)];
        if (ia >= 0) {
          auto& ga = g.grad_buf(ia, int64_t(adata->size()));
          if (d.b_is_2d) {
            gemm(false, true, d.batch * d.m, d.k, d.n, R(1), gy.data(), bdata->data(), R(1),
                 ga.data());
          } else {
            for (int64_t i = 0; i < d.batch; ++i)
              gemm(false, true, d.m, d.k, d.n, R(1), gy.data() + i * d.m * d.n,
                   bdata->data() + i * d.k * d.n, R(1), ga.data() + i * d.m * d.k);
          }
        }
        if (ib >= 0) {
          auto& gb = g.grad_buf(ib, int64_t(bdata->size()));
          if (d.b_is_2d) {
            gemm(true, false, d.k, d.n, d.batch * d.m, R(1), adata->data(), gy.data(), R(1),
                 gb.data());
          } else {
            for (int64_t i = 0; i < d.batch; ++i)
              gemm(true, false, d.k, d.n, d.m, R(1), adata->data() + i * d.m * d.k,
                   gy.data() + i * d.m * d.n, R(1), gb.data() + i * d.k * d.n);
          }
        }
      });
}

template <class R>
Tensor<R> Graph<R>::add(const Tensor<R>& a, const Tensor<R>& b) {
  Shape out_shape = broadcast_shape(a.shape, b.shape, OpKind::Add);
  check_finite(a, OpKind::Add, "input");
  check_finite(b, OpKind::Add, "input");
  std::vector<R> out(size_t(shape_numel(out_shape)));
  bcast_forward(a.shape, a.ptr(), b.shape, b.ptr(), out_shape, out.data(),
                [](R x, R y) { return x + y; });
  int ia = input_id(a), ib = input_id(b);
  Shape ash = a.shape, bsh = b.shape, osh = out_shape;
  int64_t na = a.size(), nb = b.size();
  return make_output(std::move(out_shape), std::move(out), OpKind::Add, {ia, ib},
                     [=](Graph& g, int self) {
                       const auto& gy = g.grads_[size_t(self)];
                       auto one = [](int64_t) { return R(1); };
                       if (ia >= 0) bcast_backward(ash, g.grad_buf(ia, na).data(), osh, gy.data(), one);
                       if (ib >= 0) bcast_backward(bsh, g.grad_buf(ib, nb).data(), osh, gy.data(), one);
                     });
}

template <class R>
Tensor<R> Graph<R>::sub(const Tensor<R>& a, const Tensor<R>& b) {
  Shape out_shape = broadcast_shape(a.shape, b.shape, OpKind::Sub);
  check_finite(a, OpKind::Sub, "input");
  check_finite(b, OpKind::Sub, "input");
  std::vector<R> out(size_t(shape_numel(out_shape)));
  bcast_forward(a.shape, a.ptr(), b.shape, b.ptr(), out_shape, out.data(),
                [](R x, R y) { return x - y; });
  int ia = input_id(a), ib = input_id(b);
  Shape ash = a.shape, bsh = b.shape, osh = out_shape;
  int64_t na = a.size(), nb = b.size();
  return make_output(std::move(out_shape), std::move(out), OpKind::Sub, {ia, ib},
                     [=](Graph& g, int self) {
                       const auto& gy = g.grads_[size_t(self)];
                       if (ia >= 0)
                         bcast_backward(ash, g.grad_buf(ia, na).data(), osh, gy.data(),
                                        [](int64_t) { return R(1); });
                       if (ib >= 0)
                         bcast_backward(bsh, g.grad_buf(ib, nb).data(), osh, gy.data(),
                                        [](int64_t) { return R(-1); });
                     });
}

template <class R>
Tensor<R> Graph<R>::mul_scalar(const Tensor<R>& a, R s) {
  check_finite(a, OpKind::MulScalar, "input");
  std::vector<R> out(size_t(a.size()));
  const R* ap = a.ptr();
  for (int64_t i = 0; i < a.size(); ++i) out[size_t(i)] = ap[i] * s;
  int ia = input_id(a);
  int64_t na = a.size();
  return make_output(a.shape, std::move(out), OpKind::MulScalar, {ia},
                     [=](Graph& g, int self) {
                       if (ia < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& ga = g.grad_buf(ia, na);
                       for (int64_t i = 0; i < na; ++i) ga[size_t(i)] += gy[size_t(i)] * s;
                     });
}

template <class R>
Tensor<R> Graph<R>::mul(const Tensor<R>& a, const Tensor<R>& b) {
  Shape out_shape = broadcast_shape(a.shape, b.shape, OpKind::MulElem);
  check_finite(a, OpKind::MulElem, "input");
  check_finite(b, OpKind::MulElem, "input");
  std::vector<R> out(size_t(shape_numel(out_shape)));
  bcast_forward(a.shape, a.ptr(), b.shape, b.ptr(), out_shape, out.data(),
                [](R x, R y) { return x * y; });
  int ia = input_id(a), ib = input_id(b);
  Shape ash = a.shape, bsh = b.shape, osh = out_shape;
  int64_t na = a.size(), nb = b.size();
  auto adata = a.data;
  auto bdata = b.data;
  return make_output(
      std::move(out_shape), std::move(out), OpKind::MulElem, {ia, ib},
      [=](Graph& g, int self) {
        const auto& gy = g.grads_[size_t(self)];
        // value of the other operand at output position i
        auto gather = [&](const Shape& sh, const std::vector<R>& v) {
          std::vector<R> res(gy.size());
          bcast_forward(sh, v.data(), osh, gy.data(), osh, res.data(), [](R x, R) { return x; });
          return res;
        };
        if (ia >= 0) {
          std::vector<R> bv = gather(bsh, *bdata);
          bcast_backward(ash, g.grad_buf(ia, na).data(), osh, gy.data(),
                         [&](int64_t i) { return bv[size_t(i)]; });
        }
        if (ib >= 0) {
          std::vector<R> av = gather(ash, *adata);
          bcast_backward(bsh, g.grad_buf(ib, nb).data(), osh, gy.data(),
                         [&](int64_t i) { return av[size_t(i)]; });
        }
      });
}

template <class R>
Tensor<R> Graph<R>::layer_norm(const Tensor<R>& x) {
  if (x.shape.empty()) throw ContractError("layer-norm: rank-0 input");
  check_finite(x, OpKind::LayerNorm, "input");
  const R kEps = R(1e-5);
  int64_t dim = x.shape.back();
  int64_t rows = x.size() / dim;
  auto xhat = std::make_shared<std::vector<R>>(size_t(x.size()));
  auto inv = std::make_shared<std::vector<R>>(size_t(rows));
  const R* xp = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const R* row = xp + r * dim;
    double mean = 0;
    for (int64_t j = 0; j < dim; ++j) mean += double(row[j]);
    mean /= double(dim);
    double var = 0;
    for (int64_t j = 0; j < dim; ++j) {
      double d = double(row[j]) - mean;
      var += d * d;
    }
    var /= double(dim);
    R is = R(1.0 / std::sqrt(var + double(kEps)));
    (*inv)[size_t(r)] = is;
    for (int64_t j = 0; j < dim; ++j)
      (*xhat)[size_t(r * dim + j)] = R((double(row[j]) - mean)) * is;
  }
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output(
      x.shape, std::vector<R>(*xhat), OpKind::LayerNorm, {ix},
      [=](Graph& g, int self) {
        if (ix < 0) return;
        const auto& gy = g.grads_[size_t(self)];
        auto& gx = g.grad_buf(ix, nx);
        for (int64_t r = 0; r < rows; ++r) {
          const R* h = xhat->data() + r * dim;
          const R* gr = gy.data() + r * dim;
          double mg = 0, mgh = 0;
          for (int64_t j = 0; j < dim; ++j) {
            mg += double(gr[j]);
            mgh += double(gr[j]) * double(h[j]);
          }
          mg /= double(dim);
          mgh /= double(dim);
          R is = (*inv)[size_t(r)];
          for (int64_t j = 0; j < dim; ++j)
            gx[size_t(r * dim + j)] += is * R(double(gr[j]) - mg - double(h[j]) * mgh);
        }
      });
}

template <class R>
Tensor<R> Graph<R>::softmax(const Tensor<R>& x) {
  if (x.shape.empty()) throw ContractError("softmax: rank-0 input");
  check_finite(x, OpKind::Softmax, "input");
  int64_t dim = x.shape.back();
  int64_t rows = x.size() / dim;
  auto y = std::make_shared<std::vector<R>>(size_t(x.size()));
  const R* xp = x.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const R* row = xp + r * dim;
    R* yr = y->data() + r * dim;
    R mx = row[0];
    for (int64_t j = 1; j < dim; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < dim; ++j) {
      double e = std::exp(double(row[j] - mx));
      yr[j] = R(e);
      sum += e;
    }
    R isum = R(1.0 / sum);
    for (int64_t j = 0; j < dim; ++j) yr[j] *= isum;
  }
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output(x.shape, std::vector<R>(*y), OpKind::Softmax, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t r = 0; r < rows; ++r) {
                         const R* yr = y->data() + r * dim;
                         const R* gr = gy.data() + r * dim;
                         double dot = 0;
                         for (int64_t j = 0; j < dim; ++j) dot += double(gr[j]) * double(yr[j]);
                         for (int64_t j = 0; j < dim; ++j)
                           gx[size_t(r * dim + j)] += yr[j] * R(double(gr[j]) - dot);
                       }
                     });
}

template <class R>
Tensor<R> Graph<R>::gelu(const Tensor<R>& x) {
  check_finite(x, OpKind::Gelu, "input");
  const double kInvSqrt2 = 0.7071067811865475244;
  const double kInvSqrt2Pi = 0.3989422804014326779;
  std::vector<R> out(size_t(x.size()));
  const R* xp = x.ptr();
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = double(xp[i]);
    out[size_t(i)] = R(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  int ix = input_id(x);
  int64_t nx = x.size();
  auto xdata = x.data;
  return make_output(x.shape, std::move(out), OpKind::Gelu, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t i = 0; i < nx; ++i) {
                         double v = double((*xdata)[size_t(i)]);
                         double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                         double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                         gx[size_t(i)] += gy[size_t(i)] * R(phi + v * pdf);
                       }
                     });
}

template <class R>
Tensor<R> Graph<R>::embedding_lookup(const Tensor<R>& table, const std::vector<int64_t>& ids) {
  if (table.shape.size() != 2)
    throw ContractError("embedding-lookup: table must be rank 2, got " + shape_str(table.shape));
  check_finite(table, OpKind::EmbeddingLookup, "input");
  int64_t vocab = table.shape[0], dim = table.shape[1];
  for (int64_t id : ids)
    if (id < 0 || id >= vocab)
      throw ContractError("embedding-lookup: id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab));
  std::vector<R> out(ids.size() * size_t(dim));
  const R* tp = table.ptr();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * size_t(dim), tp + ids[i] * dim, size_t(dim) * sizeof(R));
  int it = input_id(table);
  int64_t nt = table.size();
  auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
  return make_output({int64_t(ids.size()), dim}, std::move(out), OpKind::EmbeddingLookup, {it},
                     [=](Graph& g, int self) {
                       if (it < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gt = g.grad_buf(it, nt);
                       for (size_t i = 0; i < ids_copy->size(); ++i) {
                         R* dst = gt.data() + (*ids_copy)[i] * dim;
                         const R* src = gy.data() + int64_t(i) * dim;
                         for (int64_t j = 0; j < dim; ++j) dst[j] += src[j];
                       }
                     });
}

template <class R>
Tensor<R> Graph<R>::concat(const std::vector<Tensor<R>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  size_t rank = xs[0].shape.size();
  if (axis < 0 || size_t(axis) >= rank) throw ContractError("concat: axis out of range");
  Shape out_shape = xs[0].shape;
  out_shape[size_t(axis)] = 0;
  for (const auto& x : xs) {
    if (x.shape.size() != rank)
      throw ContractError("concat: rank mismatch " + shape_str(x.shape));
    for (size_t d = 0; d < rank; ++d)
      if (d != size_t(axis) && x.shape[d] != xs[0].shape[d])
        throw ContractError("concat: extent mismatch at axis " + std::to_string(d) + ": " +
                            shape_str(x.shape) + " vs " + shape_str(xs[0].shape));
    check_finite(x, OpKind::Concat, "input");
    out_shape[size_t(axis)] += x.shape[size_t(axis)];
  }
  int64_t outer = 1, inner = 1;
  for (size_t d = 0; d < size_t(axis); ++d) outer *= out_shape[d];
  for (size_t d = size_t(axis) + 1; d < rank; ++d) inner *= out_shape[d];
  int64_t out_ax = out_shape[size_t(axis)];
  std::vector<R> out(size_t(outer * out_ax * inner));
  std::vector<int> in_ids;
  std::vector<int64_t> ax_sizes, in_numels;
  int64_t off = 0;
  for (const auto& x : xs) {
    int64_t ax = x.shape[size_t(axis)];
    const R* xp = x.ptr();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * out_ax + off) * inner, xp + o * ax * inner,
                  size_t(ax * inner) * sizeof(R));
    off += ax;
    in_ids.push_back(input_id(x));
    ax_sizes.push_back(ax);
    in_numels.push_back(x.size());
  }
  return make_output(std::move(out_shape), std::move(out), OpKind::Concat, in_ids,
                     [=](Graph& g, int self) {
                       const auto& gy = g.grads_[size_t(self)];
                       int64_t o2 = 0;
                       for (size_t i = 0; i < in_ids.size(); ++i) {
                         int64_t ax = ax_sizes[i];
                         if (in_ids[i] >= 0) {
                           auto& gx = g.grad_buf(in_ids[i], in_numels[i]);
                           for (int64_t o = 0; o < outer; ++o) {
                             const R* src = gy.data() + (o * out_ax + o2) * inner;
                             R* dst = gx.data() + o * ax * inner;
                             for (int64_t j = 0; j < ax * inner; ++j) dst[j] += src[j];
                           }
                         }
                         o2 += ax;
                       }
                     });
}

template <class R>
Tensor<R> Graph<R>::reshape(const Tensor<R>& x, Shape target) {
  if (shape_numel(target) != x.size())
    throw ContractError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(target));
  check_finite(x, OpKind::Reshape, "input");
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output(std::move(target), std::vector<R>(*x.data), OpKind::Reshape, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t i = 0; i < nx; ++i) gx[size_t(i)] += gy[size_t(i)];
                     });
}

template <class R>
Tensor<R> Graph<R>::permute(const Tensor<R>& x, const std::vector<int>& axes) {
  size_t rank = x.shape.size();
  if (axes.size() != rank) throw ContractError("permute: axes size mismatch");
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (axes[i] < 0 || size_t(axes[i]) >= rank || seen[size_t(axes[i])])
      throw ContractError("permute: invalid axes");
    seen[size_t(axes[i])] = true;
    out_shape[i] = x.shape[size_t(axes[i])];
  }
  check_finite(x, OpKind::Permute, "input");
  std::vector<R> out(size_t(x.size()));
  permute_raw(x.shape, x.ptr(), axes, out_shape, out.data());
  int ix = input_id(x);
  Shape in_shape = x.shape;
  Shape gy_shape = out_shape;
  std::vector<int> inv(rank);
  for (size_t i = 0; i < rank; ++i) inv[size_t(axes[i])] = int(i);
  return make_output(std::move(out_shape), std::move(out), OpKind::Permute, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, int64_t(gy.size()));
                       // gy carries the permuted shape; undo with the inverse axes
                       std::vector<R> tmp(gy.size());
                       Shape tmp_shape = in_shape;
                       permute_raw(gy_shape, gy.data(), inv, tmp_shape, tmp.data());
                       for (size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                     });
}

template <class R>
Tensor<R> Graph<R>::reduce_mean(const Tensor<R>& x) {
  check_finite(x, OpKind::ReduceMean, "input");
  double sum = 0;
  const R* xp = x.ptr();
  for (int64_t i = 0; i < x.size(); ++i) sum += double(xp[i]);
  R v = R(sum / double(x.size()));
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output({1}, {v}, OpKind::ReduceMean, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       R gy = g.grads_[size_t(self)][0];
                       auto& gx = g.grad_buf(ix, nx);
                       R w = gy / R(nx);
                       for (int64_t i = 0; i < nx; ++i) gx[size_t(i)] += w;
                     });
}

template <class R>
Tensor<R> Graph<R>::reduce_sum(const Tensor<R>& x) {
  check_finite(x, OpKind::ReduceSum, "input");
  double sum = 0;
  const R* xp = x.ptr();
  for (int64_t i = 0; i < x.size(); ++i) sum += double(xp[i]);
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output({1}, {R(sum)}, OpKind::ReduceSum, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       R gy = g.grads_[size_t(self)][0];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t i = 0; i < nx; ++i) gx[size_t(i)] += gy;
                     });
}

template <class R>
Tensor<R> Graph<R>::square(const Tensor<R>& x) {
  check_finite(x, OpKind::Square, "input");
  std::vector<R> out(size_t(x.size()));
  const R* xp = x.ptr();
  for (int64_t i = 0; i < x.size(); ++i) out[size_t(i)] = xp[i] * xp[i];
  int ix = input_id(x);
  int64_t nx = x.size();
  auto xdata = x.data;
  return make_output(x.shape, std::move(out), OpKind::Square, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t i = 0; i < nx; ++i)
                         gx[size_t(i)] += R(2) * (*xdata)[size_t(i)] * gy[size_t(i)];
                     });
}

template <class R>
Tensor<R> Graph<R>::log_sigmoid(const Tensor<R>& x) {
  check_finite(x, OpKind::LogSigmoid, "input");
  std::vector<R> out(size_t(x.size()));
  const R* xp = x.ptr();
  for (int64_t i = 0; i < x.size(); ++i) out[size_t(i)] = log_sigmoid_value(xp[i]);
  int ix = input_id(x);
  int64_t nx = x.size();
  auto xdata = x.data;
  return make_output(x.shape, std::move(out), OpKind::LogSigmoid, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (int64_t i = 0; i < nx; ++i) {
                         double v = double((*xdata)[size_t(i)]);
                         // sigmoid(-v)
                         double s = v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v))
                                           : 1.0 / (1.0 + std::exp(v));
                         gx[size_t(i)] += gy[size_t(i)] * R(s);
                       }
                     });
}

template <class R>
Tensor<R> Graph<R>::masked_select(const Tensor<R>& x, const Tensor<R>& mask) {
  if (x.shape != mask.shape)
    throw ContractError("masked-select: mask shape " + shape_str(mask.shape) +
                        " differs from input " + shape_str(x.shape));
  check_finite(x, OpKind::MaskedSelect, "input");
  auto idx = std::make_shared<std::vector<int64_t>>();
  const R* mp = mask.ptr();
  for (int64_t i = 0; i < mask.size(); ++i)
    if (mp[i] != R(0)) idx->push_back(i);
  if (idx->empty()) throw ContractError("masked-select: mask selects zero elements");
  std::vector<R> out(idx->size());
  const R* xp = x.ptr();
  for (size_t i = 0; i < idx->size(); ++i) out[i] = xp[(*idx)[i]];
  int ix = input_id(x);
  int64_t nx = x.size();
  return make_output({int64_t(idx->size())}, std::move(out), OpKind::MaskedSelect, {ix},
                     [=](Graph& g, int self) {
                       if (ix < 0) return;
                       const auto& gy = g.grads_[size_t(self)];
                       auto& gx = g.grad_buf(ix, nx);
                       for (size_t i = 0; i < idx->size(); ++i) gx[size_t((*idx)[i])] += gy[i];
                     });
}

template <class R>
Tensor<R> Graph<R>::forward_op(OpKind kind, std::span<const Tensor<R>> in, const OpAttrs& attrs) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                          " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::Matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Sub: need(2); return sub(in[0], in[1]);
    case OpKind::MulScalar: need(1); return mul_scalar(in[0], R(attrs.scalar));
    case OpKind::MulElem: need(2); return mul(in[0], in[1]);
    case OpKind::LayerNorm: need(1); return layer_norm(in[0]);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::Gelu: need(1); return gelu(in[0]);
    case OpKind::EmbeddingLookup: need(1); return embedding_lookup(in[0], attrs.ids);
    case OpKind::Concat: return concat(std::vector<Tensor<R>>(in.begin(), in.end()), attrs.axis);
    case OpKind::Reshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::Permute: need(1); return permute(in[0], attrs.perm);
    case OpKind::ReduceMean: need(1); return reduce_mean(in[0]);
    case OpKind::ReduceSum: need(1); return reduce_sum(in[0]);
    case OpKind::Square: need(1); return square(in[0]);
    case OpKind::LogSigmoid: need(1); return log_sigmoid(in[0]);
    case OpKind::MaskedSelect: need(2); return masked_select(in[0], in[1]);
  }
  throw ContractError("forward_op: unknown op kind");
}

template class Graph<float>;
template class Graph<double>;

}  // namespace voxsteer
