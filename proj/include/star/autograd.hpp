// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Graph nodes are reference counted, so intermediate state is
// released as soon as the last Var referencing it goes out of scope.

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace star::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  Parameter() = default;
  Parameter(std::string n, Mat v)
      : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Process-local switch for graph recording. Thread local.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

/// RAII scope that disables graph recording.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts scalars retained for the backward pass (op outputs and any
/// auxiliary buffers they keep). Thread local.
class ActivationMeter {
 public:
  static std::size_t current();
  static std::size_t peak();
  static void reset_peak();
  static void add(std::size_t n);
  static void remove(std::size_t n);
};

struct Node {
  Mat value;
  Mat grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Parameter* param = nullptr;
  bool requires_grad = false;
  std::size_t metered = 0;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node();

  /// Adds g into grad, allocating on first use.
  void accumulate(const Mat& g);
  void meter(std::size_t extra);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Mat value);
/// Leaf that requires a gradient while recording; its grad is kept after
/// backward.
Var variable(Mat value);
/// Leaf that feeds gradients back into p.grad when recording.
Var param(Parameter& p);

/// Detached copy of v's value.
Var detach(const Var& v);

Var matmul(const Var& a, const Var& b);
/// x · w + b, with b a 1×M row broadcast over rows.
Var linear(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds the 1×C row r to every row of a.
Var add_row(const Var& a, const Var& r);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var rmsnorm(const Var& x, const Var& gain, double eps = 1e-6);
Var gelu(const Var& x);
/// Row r of table (a 1×C slice), gradients routed to that row only.
Var gather_row(const Var& table, Eigen::Index r);

/// Σ a ⊙ g, returned as 1×1. Backward seeds a with g.
Var sum_product(const Var& a, const Mat& g);
/// Mean of (a − target)², returned as 1×1.
Var mse(const Var& a, const Mat& target);
Var sum_all(std::span<const Var> scalars);

/// Position-indexed rotary embedding over consecutive channel pairs of each
/// head. sign = +1 rotates forward, −1 applies the inverse rotation.
void apply_rope(Mat& x, std::span<const int> positions, int heads, double base, int sign);

/// A key/value segment visible to attention, with the token positions used to
/// rotate its (pre-rotary) keys.
struct KVSegment {
  Var key;
  Var value;
  std::span<const int> positions;
};

/// Multi-head attention with rotary positions applied at read time. Keys and
/// values stay pre-rotary; only the output and per-row log-sum-exp are kept
/// for backward, and attention weights are recomputed there.
Var rope_attention(const Var& q, std::span<const int> q_positions,
                   std::span<const KVSegment> segments, int heads, double rope_base);

/// Scaled rotary attention logits for one head, Q·Kᵀ/√d.
Mat rope_logits(const Mat& q_pre, std::span<const int> q_positions, const Mat& k_pre,
                std::span<const int> k_positions, int heads, int head, double rope_base);

/// Runs reverse accumulation from root, seeding it with seed (same shape).
void backward(const Var& root, const Mat& seed);
/// Convenience for 1×1 roots.
void backward(const Var& root);

/// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam(std::vector<Parameter*> params, Options opts);

  void step();
  void zero_grad();
  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  Options opts_;
  long t_ = 0;
};

}  // namespace star::ag
