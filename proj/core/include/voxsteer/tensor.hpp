#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxsteer/errors.hpp"

namespace voxsteer {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class OpKind {
  Matmul,
  Add,
  Sub,
  MulScalar,
  MulElem,
  LayerNorm,
  Softmax,
  Gelu,
  EmbeddingLookup,
  Concat,
  Reshape,
  Permute,
  ReduceMean,
  ReduceSum,
  Square,
  LogSigmoid,
  MaskedSelect,
};

const char* op_name(OpKind k);

template <class R>
class Graph;

// Dense row-major tensor. Data is shared; ops return fresh tensors and never
// mutate inputs. `node`/`owner` tie a tensor to the graph that produced it;
// leaves (parameters, constants) have node == -1.
template <class R>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<R>> data;
  bool requires_grad = false;
  int node = -1;
  const Graph<R>* owner = nullptr;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<R>>(size_t(shape_numel(t.shape)), R(0));
    return t;
  }
  static Tensor full(Shape s, R v) {
    Tensor t = zeros(std::move(s));
    for (auto& x : *t.data) x = v;
    return t;
  }
  static Tensor from(Shape s, std::vector<R> vals) {
    if (shape_numel(s) != int64_t(vals.size()))
      throw ContractError("Tensor::from: element count does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<R>>(std::move(vals));
    return t;
  }
  static Tensor scalar_tensor(R v) { return from({1}, {v}); }

  int64_t size() const { return data ? int64_t(data->size()) : 0; }
  R* ptr() { return data->data(); }
  const R* ptr() const { return data->data(); }
  R scalar() const {
    if (size() != 1) throw ContractError("Tensor::scalar: tensor has " + std::to_string(size()) + " elements");
    return (*data)[0];
  }
  Tensor detached_copy() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<R>>(*data);
    return t;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Extra arguments for ops that need more than tensor inputs (used by the
// generic forward_op dispatcher; the named methods take them directly).
struct OpAttrs {
  double scalar = 0.0;
  int axis = 0;
  Shape shape;
  std::vector<int> perm;
  std::vector<int64_t> ids;
};

// Reverse-mode tape. One graph per training step; independent graphs may live
// on different threads. Nodes are recorded only when an input requires grad.
template <class R>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b);
  Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b);
  Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b);
  Tensor<R> mul_scalar(const Tensor<R>& a, R s);
  Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b);
  Tensor<R> layer_norm(const Tensor<R>& x);
  Tensor<R> softmax(const Tensor<R>& x);
  Tensor<R> gelu(const Tensor<R>& x);
  Tensor<R> embedding_lookup(const Tensor<R>& table, const std::vector<int64_t>& ids);
  Tensor<R> concat(const std::vector<Tensor<R>>& xs, int axis);
  Tensor<R> reshape(const Tensor<R>& x, Shape target);
  Tensor<R> permute(const Tensor<R>& x, const std::vector<int>& axes);
  Tensor<R> reduce_mean(const Tensor<R>& x);
  Tensor<R> reduce_sum(const Tensor<R>& x);
  Tensor<R> square(const Tensor<R>& x);
  Tensor<R> log_sigmoid(const Tensor<R>& x);
  Tensor<R> masked_select(const Tensor<R>& x, const Tensor<R>& mask);

  // Generic dispatcher over the op vocabulary above.
  Tensor<R> forward_op(OpKind kind, std::span<const Tensor<R>> inputs, const OpAttrs& attrs = {});

  // Reverse sweep from a scalar loss. May be called more than once; gradients
  // are reset each call.
  void backward(const Tensor<R>& loss);

  // Gradient of a leaf tensor (parameter/constant fed into this graph), or
  // nullptr if the leaf was never reached.
  const std::vector<R>* grad_of(const Tensor<R>& leaf) const;

  void set_check_numerics(bool on) { check_numerics_ = on; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    int64_t numel = 0;
    std::function<void(Graph&, int)> back;  // back(graph, self_id)
  };

  friend struct GraphTestPeer;

  int leaf_id(const Tensor<R>& t);
  int input_id(const Tensor<R>& t);  // -1 when untracked
  bool tracked(const Tensor<R>& t) const;
  Tensor<R> make_output(Shape shape, std::vector<R> vals, OpKind kind,
                        std::vector<int> input_ids, std::function<void(Graph&, int)> back);
  std::vector<R>& grad_buf(int id, int64_t numel);
  void check_finite(const Tensor<R>& t, OpKind kind, const char* role) const;

  std::vector<Node> nodes_;
  std::vector<std::vector<R>> grads_;
  std::unordered_map<const void*, int> leaves_;
  std::vector<std::shared_ptr<const std::vector<R>>> leaf_keepalive_;
  bool check_numerics_ = true;
};

// Numerically stable helpers shared with non-graph code.
template <class R>
inline R log_sigmoid_value(R x) {
  // -softplus(-x)
  if (x >= R(0)) return R(-std::log1p(std::exp(-double(x))));
  return R(double(x) - std::log1p(std::exp(double(x))));
}

}  // namespace voxsteer
