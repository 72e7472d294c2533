#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "reclab/nn/tape.hpp"
#include "reclab/rng.hpp"

namespace reclab::nn {

// Named parameter tensors with AdamW moment buffers. Insertion order is
// the canonical (checkpoint manifest) order.
template <typename Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat<Scalar> value;
    Mat<Scalar> m, v;  // first/second moment accumulators
  };

  Mat<Scalar>& add(const std::string& name, Mat<Scalar> value) {
    require(!contains(name), "ParamStore: duplicate parameter " + name);
    index_[name] = entries_.size();
    Entry e;
    e.name = name;
    e.m = Mat<Scalar>::Zero(value.rows(), value.cols());
    e.v = Mat<Scalar>::Zero(value.rows(), value.cols());
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    return entries_.back().value;
  }

  Mat<Scalar>& add_truncated_normal(const std::string& name, Index rows, Index cols,
                                    Rng& rng, double std_dev = 0.02) {
    Mat<Scalar> w(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c)
        w(r, c) = static_cast<Scalar>(rng.truncated_normal() * std_dev);
    return add(name, std::move(w));
  }
  Mat<Scalar>& add_zeros(const std::string& name, Index rows, Index cols) {
    return add(name, Mat<Scalar>::Zero(rows, cols));
  }
  Mat<Scalar>& add_ones(const std::string& name, Index rows, Index cols) {
    return add(name, Mat<Scalar>::Ones(rows, cols));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Mat<Scalar>& operator[](const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: unknown parameter " + name);
    return entries_[it->second].value;
  }
  const Mat<Scalar>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: unknown parameter " + name);
    return entries_[it->second].value;
  }
  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: unknown parameter " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  long step() const { return step_; }
  void set_step(long s) { step_ = s; }
  void bump_step() { ++step_; }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.value.template cast<Other>());
      out.entry(e.name).m = e.m.template cast<Other>();
      out.entry(e.name).v = e.v.template cast<Other>();
    }
    out.set_step(step_);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  long step_ = 0;
};

struct AdamwOpts {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One decoupled-weight-decay Adam step over the named gradients. Parameters
// not named in `grads` are untouched. Bias-corrected moments; decay is
// applied directly to the parameter, independent of the gradient.
template <typename Scalar>
void adamw_step(ParamStore<Scalar>& store,
                const std::vector<std::pair<std::string, Mat<Scalar>>>& grads,
                const AdamwOpts& opts) {
  store.bump_step();
  const double t = static_cast<double>(store.step());
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(opts.beta1, t));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(opts.beta2, t));
  const Scalar b1 = static_cast<Scalar>(opts.beta1), b2 = static_cast<Scalar>(opts.beta2);
  const Scalar lr = static_cast<Scalar>(opts.lr);
  const Scalar wd = static_cast<Scalar>(opts.weight_decay);
  const Scalar eps = static_cast<Scalar>(opts.eps);
  for (const auto& [name, g] : grads) {
    auto& e = store.entry(name);
    require(g.rows() == e.value.rows() && g.cols() == e.value.cols(),
            "adamw_step: gradient shape mismatch for " + name);
    e.value *= (Scalar(1) - lr * wd);
    e.m = b1 * e.m + (Scalar(1) - b1) * g;
    e.v = b2 * e.v + (Scalar(1) - b2) * g.cwiseProduct(g);
    e.value.array() -=
        lr * (e.m.array() / bc1) / ((e.v.array() / bc2).sqrt() + eps);
  }
}

// Linear warmup to max_lr, then cosine annealing to zero.
inline double lr_schedule(long step, long total_steps, long warmup_steps, double max_lr) {
  require_config(warmup_steps < total_steps, "lr_schedule: warmup must be < total steps");
  require(step >= 0 && step <= total_steps, "lr_schedule: step out of range");
  if (warmup_steps > 0 && step < warmup_steps)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  return max_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Binds store parameters into a tape as leaf variables, one leaf per
// parameter per step, so repeated uses share gradient accumulation.
template <typename Scalar>
class Binder {
 public:
  Binder(Tape<Scalar>& tape, ParamStore<Scalar>& store) : tape_(tape), store_(store) {}

  Var<Scalar> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return Var<Scalar>{&tape_, it->second};
    Var<Scalar> v = tape_.leaf(store_[name], true);
    bound_[name] = v.id;
    return v;
  }

  ParamStore<Scalar>& store() { return store_; }

  // Collect tape gradients for every bound parameter.
  std::vector<std::pair<std::string, Mat<Scalar>>> gradients() {
    std::vector<std::pair<std::string, Mat<Scalar>>> out;
    out.reserve(bound_.size());
    for (auto& [name, id] : bound_)
      out.emplace_back(name, tape_.grad(Var<Scalar>{&tape_, id}));
    return out;
  }

  void step(const AdamwOpts& opts) { adamw_step(store_, gradients(), opts); }

 private:
  Tape<Scalar>& tape_;
  ParamStore<Scalar>& store_;
  std::unordered_map<std::string, int> bound_;
};

}  // namespace reclab::nn
