#include "doctest.h"

#include <cmath>
#include <vector>

#include "voxsteer/param_store.hpp"
#include "voxsteer/rng.hpp"
#include "voxsteer/tensor.hpp"

using namespace voxsteer;

namespace {

TensorD randn(ParameterStore<double>& store, const std::string& name, Shape shape, Rng rng,
              ParamSet set = ParamSet::Base) {
  TensorD& t = store.create(name, std::move(shape), set);
  rng.fill_normal(t.ptr(), size_t(t.size()));
  return t;
}

}  // namespace

TEST_CASE("matmul identity") {
  Graph<double> g;
  auto a = TensorD::from({2, 2}, {1, 2, 3, 4});
  auto id = TensorD::from({2, 2}, {1, 0, 0, 1});
  auto c = g.matmul(a, id);
  CHECK(*c.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("log-sigmoid at zero is -ln 2") {
  Graph<double> g;
  auto y = g.log_sigmoid(TensorD::from({1}, {0.0}));
  CHECK(y.scalar() == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("layer-norm of a constant vector is zero") {
  Graph<double> g;
  auto y = g.layer_norm(TensorD::full({4}, 3.25));
  for (double v : *y.data) CHECK(v == 0.0);
}

TEST_CASE("shape mismatch errors name the op and extents") {
  Graph<double> g;
  auto a = TensorD::zeros({2, 3});
  auto b = TensorD::zeros({4, 2});
  try {
    g.matmul(a, b);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,2)") != std::string::npos);
  }
}

TEST_CASE("non-finite input raises a numeric fault") {
  Graph<double> g;
  auto a = TensorD::from({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(g.square(a), NumericFault);
}

TEST_CASE("backward requires a scalar loss") {
  Graph<double> g;
  ParameterStore<double> store;
  auto w = randn(store, "w", {3}, Rng(1));
  auto y = g.square(w);
  CHECK_THROWS_AS(g.backward(y), ContractError);
}

TEST_CASE("analytic derivative of mean(w^2)") {
  ParameterStore<double> store;
  TensorD& w = store.create("w", {1}, ParamSet::Base);
  (*w.data)[0] = 3.0;
  Graph<double> g;
  auto loss = g.reduce_mean(g.square(w));
  auto grads = backward(g, loss, store);
  CHECK(grads.at("w").scalar() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("frozen parameters get zero gradients") {
  ParameterStore<double> store;
  auto theta = randn(store, "theta", {4}, Rng(2), ParamSet::Base);
  auto phi = randn(store, "phi", {4}, Rng(3), ParamSet::Control);
  store.set_trainable(ParamSet::Base, false);
  Graph<double> g;
  auto loss = g.reduce_mean(g.square(g.mul(store.get("theta"), store.get("phi"))));
  auto grads = backward(g, loss, store);
  CHECK(grads.count("theta") == 0);  // not trainable: absent from the map
  CHECK(grads.count("phi") == 1);
  CHECK(g.grad_of(store.get("theta")) == nullptr);
}

TEST_CASE("unreached trainable parameters get zero gradients") {
  ParameterStore<double> store;
  randn(store, "used", {3}, Rng(4));
  randn(store, "unused", {3}, Rng(5));
  Graph<double> g;
  auto loss = g.reduce_mean(g.square(store.get("used")));
  auto grads = backward(g, loss, store);
  for (double v : *grads.at("unused").data) CHECK(v == 0.0);
}

// Central finite differences on a per-op basis: every op kind must agree with
// the tape's gradients to < 1e-4 relative in double precision.
namespace {

void check_op(const char* name,
              const std::function<TensorD(Graph<double>&, ParameterStore<double>&)>& body,
              ParameterStore<double>& store, double tol = 1e-6) {
  auto fn = [&](Graph<double>& g) { return body(g, store); };
  GradCheckOptions opts;
  opts.tolerance = tol;
  opts.fd_step = 1e-5;
  auto report = grad_check<double>(fn, store, opts);
  INFO(name, ": worst ", report.worst, " at ", report.worst_name);
  CHECK(report.pass);
}

}  // namespace

TEST_CASE("finite-difference oracle per op kind") {
  Rng rng(77);

  {
    ParameterStore<double> s;
    randn(s, "a", {3, 4}, rng.fork("a1"));
    randn(s, "b", {4, 5}, rng.fork("b1"));
    check_op("matmul-2d", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.matmul(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3, 4}, rng.fork("a2"));
    randn(s, "b", {2, 4, 3}, rng.fork("b2"));
    check_op("matmul-batched", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.matmul(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3, 4}, rng.fork("a2f"));
    randn(s, "b", {4, 6}, rng.fork("b2f"));
    check_op("matmul-flattened", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.matmul(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3, 4}, rng.fork("a3"));
    randn(s, "b", {4}, rng.fork("b3"));
    check_op("add-broadcast", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.add(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 1, 4}, rng.fork("a4"));
    randn(s, "b", {2, 3, 4}, rng.fork("b4"));
    check_op("sub-broadcast-middle", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.sub(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {5}, rng.fork("a5"));
    check_op("mul-scalar", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.mul_scalar(s.get("a"), -1.7)));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3, 4}, rng.fork("a6"));
    randn(s, "b", {2, 1, 4}, rng.fork("b6"));
    check_op("mul-elementwise-broadcast", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.mul(s.get("a"), s.get("b"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {3, 6}, rng.fork("a7"));
    check_op("layer-norm", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.layer_norm(s.get("a"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {3, 5}, rng.fork("a8"));
    randn(s, "w", {3, 5}, rng.fork("w8"));
    check_op("softmax", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.mul(g.softmax(s.get("a")), s.get("w"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {7}, rng.fork("a9"));
    check_op("gelu", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.gelu(s.get("a"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "table", {6, 4}, rng.fork("a10"));
    check_op("embedding-lookup", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.embedding_lookup(s.get("table"), {1, 3, 3, 5})));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3}, rng.fork("a11"));
    randn(s, "b", {2, 2}, rng.fork("b11"));
    check_op("concat", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.concat({s.get("a"), s.get("b")}, 1)));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 6}, rng.fork("a12"));
    check_op("reshape", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.reshape(s.get("a"), {3, 4})));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {2, 3, 4}, rng.fork("a13"));
    randn(s, "b", {2, 4, 3}, rng.fork("b13"));
    check_op("permute", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.matmul(g.permute(s.get("a"), {0, 2, 1}), g.permute(s.get("b"), {0, 2, 1}))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {3, 4}, rng.fork("a14"));
    check_op("reduce-sum", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.square(g.reduce_sum(g.gelu(s.get("a"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {9}, rng.fork("a15"));
    check_op("log-sigmoid", [](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.log_sigmoid(s.get("a"))));
    }, s);
  }
  {
    ParameterStore<double> s;
    randn(s, "a", {4, 4}, rng.fork("a16"));
    auto mask = TensorD::from({4, 4}, {1, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 1});
    check_op("masked-select", [mask](Graph<double>& g, ParameterStore<double>& s) {
      return g.reduce_mean(g.square(g.masked_select(s.get("a"), mask)));
    }, s);
  }
}

TEST_CASE("random 3-layer network matches finite differences") {
  Rng rng(2024);
  ParameterStore<double> store;
  randn(store, "w1", {6, 8}, rng.fork("w1"));
  randn(store, "b1", {8}, rng.fork("b1"));
  randn(store, "w2", {8, 8}, rng.fork("w2"));
  randn(store, "b2", {8}, rng.fork("b2"));
  randn(store, "w3", {8, 3}, rng.fork("w3"));

  auto x = TensorD::zeros({5, 6});
  Rng data = rng.fork("x");
  data.fill_normal(x.ptr(), size_t(x.size()));

  auto fn = [&](Graph<double>& g) {
    auto h1 = g.gelu(g.add(g.matmul(x, store.get("w1")), store.get("b1")));
    auto h2 = g.gelu(g.add(g.matmul(h1, store.get("w2")), store.get("b2")));
    auto out = g.softmax(g.matmul(g.layer_norm(h2), store.get("w3")));
    return g.reduce_mean(g.square(out));
  };
  GradCheckOptions opts;
  opts.tolerance = 1e-4;
  opts.fd_step = 1e-4;
  auto report = grad_check<double>(fn, store, opts);
  INFO("worst ", report.worst, " at ", report.worst_name);
  CHECK(report.pass);
}

TEST_CASE("backward of a sum equals sum of backwards") {
  Rng rng(5);
  ParameterStore<double> store;
  randn(store, "w", {4, 4}, rng.fork("w"));
  auto x = TensorD::zeros({4, 4});
  rng.fork("x").fill_normal(x.ptr(), size_t(x.size()));

  auto l1 = [&](Graph<double>& g) { return g.reduce_mean(g.square(g.matmul(x, store.get("w")))); };
  auto l2 = [&](Graph<double>& g) { return g.reduce_mean(g.gelu(g.mul(x, store.get("w")))); };

  Graph<double> ga;
  auto ga_grads = backward(ga, ga.add(l1(ga), l2(ga)), store);
  Graph<double> g1, g2;
  auto g1_grads = backward(g1, l1(g1), store);
  auto g2_grads = backward(g2, l2(g2), store);

  for (int64_t i = 0; i < 16; ++i) {
    double sum = (*g1_grads.at("w").data)[size_t(i)] + (*g2_grads.at("w").data)[size_t(i)];
    CHECK((*ga_grads.at("w").data)[size_t(i)] == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("grad_check rejects non-deterministic functions") {
  ParameterStore<double> store;
  auto& w = store.create("w", {2}, ParamSet::Base);
  (*w.data)[0] = 1.0;
  (*w.data)[1] = -2.0;
  int calls = 0;
  auto fn = [&](Graph<double>& g) {
    ++calls;
    return g.reduce_mean(g.mul_scalar(store.get("w"), double(calls)));
  };
  CHECK_THROWS_AS(grad_check<double>(fn, store), ContractError);
}

TEST_CASE("grad_check passes trivially for a constant function") {
  ParameterStore<double> store;
  store.create("w", {3}, ParamSet::Base);
  auto c = TensorD::scalar_tensor(4.0);
  auto fn = [&](Graph<double>& g) {
    return g.add(g.mul_scalar(g.reduce_sum(store.get("w")), 0.0), c);
  };
  auto report = grad_check<double>(fn, store);
  CHECK(report.pass);
  CHECK(report.worst == 0.0);
}

TEST_CASE("forward_op dispatcher routes every kind") {
  Graph<double> g;
  auto a = TensorD::from({2, 2}, {1, 2, 3, 4});
  auto b = TensorD::from({2, 2}, {5, 6, 7, 8});
  std::vector<TensorD> two{a, b};
  std::vector<TensorD> one{a};

  CHECK(g.forward_op(OpKind::Matmul, two).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::Add, two).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::Sub, two).shape == Shape{2, 2});
  OpAttrs sc;
  sc.scalar = 2.0;
  CHECK((*g.forward_op(OpKind::MulScalar, one, sc).data)[3] == 8.0);
  CHECK(g.forward_op(OpKind::MulElem, two).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::LayerNorm, one).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::Softmax, one).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::Gelu, one).shape == Shape{2, 2});
  OpAttrs emb;
  emb.ids = {0, 1, 1};
  CHECK(g.forward_op(OpKind::EmbeddingLookup, one, emb).shape == Shape{3, 2});
  OpAttrs cat;
  cat.axis = 0;
  CHECK(g.forward_op(OpKind::Concat, two, cat).shape == Shape{4, 2});
  OpAttrs rs;
  rs.shape = {4};
  CHECK(g.forward_op(OpKind::Reshape, one, rs).shape == Shape{4});
  OpAttrs pm;
  pm.perm = {1, 0};
  CHECK((*g.forward_op(OpKind::Permute, one, pm).data) == std::vector<double>{1, 3, 2, 4});
  CHECK(g.forward_op(OpKind::ReduceMean, one).scalar() == doctest::Approx(2.5));
  CHECK(g.forward_op(OpKind::ReduceSum, one).scalar() == doctest::Approx(10.0));
  CHECK(g.forward_op(OpKind::Square, one).shape == Shape{2, 2});
  CHECK(g.forward_op(OpKind::LogSigmoid, one).shape == Shape{2, 2});
  auto mask = TensorD::from({2, 2}, {1, 0, 0, 1});
  std::vector<TensorD> sel{a, mask};
  CHECK(g.forward_op(OpKind::MaskedSelect, sel).shape == Shape{2});
}
