#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "voxsteer/tensor.hpp"

namespace voxsteer {

enum class ParamSet { Base, Control };

template <class R>
using GradMap = std::map<std::string, Tensor<R>>;

// Named parameter tensors split into the frozen-able base set and the control
// set. A parameter's requires_grad flag doubles as its trainable flag, so
// frozen parameters never enter the tape at all.
template <class R>
class ParameterStore {
 public:
  Tensor<R>& create(const std::string& name, Shape shape, ParamSet set) {
    if (params_.count(name)) throw ContractError("parameter '" + name + "' already exists");
    Entry e;
    e.tensor = Tensor<R>::zeros(std::move(shape));
    e.tensor.requires_grad = true;
    e.set = set;
    auto [it, ok] = params_.emplace(name, std::move(e));
    (void)ok;
    return it->second.tensor;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Tensor<R>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second.tensor;
  }
  const Tensor<R>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second.tensor;
  }

  ParamSet set_of(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second.set;
  }

  void set_trainable(const std::string& name, bool on) { get(name).requires_grad = on; }
  void set_trainable(ParamSet set, bool on) {
    for (auto& [name, e] : params_)
      if (e.set == set) e.tensor.requires_grad = on;
  }
  bool trainable(const std::string& name) const { return get(name).requires_grad; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, e] : params_) out.push_back(name);
    return out;
  }
  std::vector<std::string> names(ParamSet set) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : params_)
      if (e.set == set) out.push_back(name);
    return out;
  }

  size_t size() const { return params_.size(); }
  int64_t element_count() const {
    int64_t n = 0;
    for (const auto& [name, e] : params_) n += e.tensor.size();
    return n;
  }

  // Gradients of all trainable parameters after Graph::backward; parameters
  // the loss never reached get zero tensors.
  GradMap<R> gradients(const Graph<R>& g) const {
    GradMap<R> out;
    for (const auto& [name, e] : params_) {
      if (!e.tensor.requires_grad) continue;
      const std::vector<R>* grad = g.grad_of(e.tensor);
      Tensor<R> t = grad ? Tensor<R>::from(e.tensor.shape, *grad) : Tensor<R>::zeros(e.tensor.shape);
      out.emplace(name, std::move(t));
    }
    return out;
  }

  uint64_t checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const void* p, size_t n) {
      const unsigned char* c = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < n; ++i) {
        h ^= c[i];
        h *= 0x100000001b3ull;
      }
    };
    for (const auto& [name, e] : params_) {
      feed(name.data(), name.size());
      feed(e.tensor.ptr(), size_t(e.tensor.size()) * sizeof(R));
    }
    return h;
  }
  uint64_t checksum(ParamSet set) const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const void* p, size_t n) {
      const unsigned char* c = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < n; ++i) {
        h ^= c[i];
        h *= 0x100000001b3ull;
      }
    };
    for (const auto& [name, e] : params_) {
      if (e.set != set) continue;
      feed(name.data(), name.size());
      feed(e.tensor.ptr(), size_t(e.tensor.size()) * sizeof(R));
    }
    return h;
  }

 private:
  struct Entry {
    Tensor<R> tensor;
    ParamSet set = ParamSet::Base;
  };
  std::map<std::string, Entry> params_;
};

// Spec surface: backward from a scalar loss into a name -> gradient map.
template <class R>
GradMap<R> backward(Graph<R>& g, const Tensor<R>& loss, const ParameterStore<R>& store) {
  g.backward(loss);
  return store.gradients(g);
}

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

struct GradCheckReport {
  bool pass = false;
  double tolerance = 0.0;
  double worst = 0.0;
  std::string worst_name;
  std::vector<GradCheckRow> rows;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double fd_step = 1e-4;
  // Check at most this many elements per parameter (deterministic stride);
  // 0 means all.
  int64_t max_elements_per_param = 0;
};

// Central finite differences against the tape's analytic gradients for every
// trainable parameter of `store`. `loss_fn` must be deterministic; this is
// verified by evaluating it twice.
template <class R>
GradCheckReport grad_check(const std::function<Tensor<R>(Graph<R>&)>& loss_fn,
                           ParameterStore<R>& store, const GradCheckOptions& opts = {}) {
  auto eval = [&]() -> R {
    Graph<R> g;
    return loss_fn(g).scalar();
  };
  R v1 = eval();
  R v2 = eval();
  if (v1 != v2)
    throw ContractError("grad_check: loss function is not deterministic (" + std::to_string(double(v1)) +
                        " vs " + std::to_string(double(v2)) + ")");

  Graph<R> g;
  Tensor<R> loss = loss_fn(g);
  GradMap<R> analytic = backward(g, loss, store);

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (const auto& name : store.names()) {
    if (!store.trainable(name)) continue;
    Tensor<R>& p = store.get(name);
    const Tensor<R>& a = analytic.at(name);
    GradCheckRow row;
    row.name = name;
    int64_t n = p.size();
    int64_t stride = 1;
    if (opts.max_elements_per_param > 0 && n > opts.max_elements_per_param)
      stride = (n + opts.max_elements_per_param - 1) / opts.max_elements_per_param;
    for (int64_t i = 0; i < n; i += stride) {
      R saved = (*p.data)[size_t(i)];
      (*p.data)[size_t(i)] = saved + R(opts.fd_step);
      double up = double(eval());
      (*p.data)[size_t(i)] = saved - R(opts.fd_step);
      double dn = double(eval());
      (*p.data)[size_t(i)] = saved;
      double fd = (up - dn) / (2.0 * opts.fd_step);
      double an = double((*a.data)[size_t(i)]);
      double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      double rel = std::abs(an - fd) / denom;
      row.max_rel_err = std::max(row.max_rel_err, rel);
      ++row.checked;
    }
    if (row.max_rel_err > report.worst) {
      report.worst = row.max_rel_err;
      report.worst_name = name;
    }
    report.rows.push_back(std::move(row));
  }
  report.pass = report.worst < opts.tolerance;
  return report;
}

}  // namespace voxsteer
