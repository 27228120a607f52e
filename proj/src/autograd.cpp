// Copyright 2026 The starworld Authors
// SPDX-License-Identifier: Apache-2.0

#include "star/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace star::ag {
namespace {

thread_local bool g_grad_enabled = true;
thread_local std::size_t g_meter_current = 0;
thread_local std::size_t g_meter_peak = 0;

bool any_requires_grad(std::initializer_list<const Var*> inputs) {
  for (const Var* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Result node; records parents only when the graph is being recorded and at
// least one input needs a gradient.
std::shared_ptr<Node> make_result(Mat value, std::initializer_list<const Var*> inputs) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (GradMode::enabled() && any_requires_grad(inputs)) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Var* v : inputs) n->parents.push_back(v->node());
    n->meter(static_cast<std::size_t>(n->value.size()));
  }
  return n;
}

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

std::vector<double> inverse_frequencies(int head_dim, double base) {
  std::vector<double> inv(static_cast<std::size_t>(head_dim / 2));
  for (int j = 0; j < head_dim / 2; ++j) {
    inv[static_cast<std::size_t>(j)] = std::pow(base, -2.0 * j / head_dim);
  }
  return inv;
}

Mat rotated(const Mat& x, std::span<const int> positions, int heads, double base, int sign) {
  Mat out = x;
  apply_rope(out, positions, heads, base, sign);
  return out;
}

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

std::size_t ActivationMeter::current() { return g_meter_current; }
std::size_t ActivationMeter::peak() { return g_meter_peak; }
void ActivationMeter::reset_peak() { g_meter_peak = g_meter_current; }
void ActivationMeter::add(std::size_t n) {
  g_meter_current += n;
  g_meter_peak = std::max(g_meter_peak, g_meter_current);
}
void ActivationMeter::remove(std::size_t n) { g_meter_current -= std::min(n, g_meter_current); }

Node::~Node() {
  if (metered) ActivationMeter::remove(metered);
}

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

void Node::meter(std::size_t extra) {
  metered += extra;
  ActivationMeter::add(extra);
}

Var constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var variable(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = GradMode::enabled();
  return Var(std::move(n));
}

Var param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->value = p.value;
  if (GradMode::enabled()) {
    n->requires_grad = true;
    n->param = &p;
  }
  return Var(std::move(n));
}

Var detach(const Var& v) { return constant(v.value()); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  auto n = make_result(a.value() * b.value(), {&a, &b});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
      if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
    };
  }
  return Var(std::move(n));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Mat y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  auto n = make_result(std::move(y), {&x, &w, &b});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& px = *self.parents[0];
      Node& pw = *self.parents[1];
      Node& pb = *self.parents[2];
      if (px.requires_grad) px.accumulate(self.grad * pw.value.transpose());
      if (pw.requires_grad) pw.accumulate(px.value.transpose() * self.grad);
      if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
    };
  }
  return Var(std::move(n));
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  auto n = make_result(a.value() + b.value(), {&a, &b});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      for (auto& p : self.parents) {
        if (p->requires_grad) p->accumulate(self.grad);
      }
    };
  }
  return Var(std::move(n));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  auto n = make_result(a.value() - b.value(), {&a, &b});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
      if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
    };
  }
  return Var(std::move(n));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  auto n = make_result(a.value().cwiseProduct(b.value()), {&a, &b});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
      if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
    };
  }
  return Var(std::move(n));
}

Var scale(const Var& a, double s) {
  auto n = make_result(a.value() * s, {&a});
  if (n->requires_grad) {
    n->backward = [s](Node& self) { self.parents[0]->accumulate(self.grad * s); };
  }
  return Var(std::move(n));
}

Var add_row(const Var& a, const Var& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Mat y = a.value();
  y.rowwise() += r.value().row(0);
  auto n = make_result(std::move(y), {&a, &r});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
      if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
    };
  }
  return Var(std::move(n));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs_grad = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(y);
  if (GradMode::enabled() && needs_grad) {
    n->requires_grad = true;
    for (const Var& p : parts) n->parents.push_back(p.node());
    n->meter(static_cast<std::size_t>(n->value.size()));
    n->backward = [](Node& self) {
      Eigen::Index off = 0;
      for (auto& p : self.parents) {
        const Eigen::Index c = p->value.cols();
        if (p->requires_grad) p->accumulate(self.grad.middleCols(off, c));
        off += c;
      }
    };
  }
  return Var(std::move(n));
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
  auto n = make_result(a.value().middleCols(start, count), {&a});
  if (n->requires_grad) {
    n->backward = [start, count](Node& self) {
      Node& p = *self.parents[0];
      Mat g = Mat::Zero(p.value.rows(), p.value.cols());
      g.middleCols(start, count) = self.grad;
      p.accumulate(g);
    };
  }
  return Var(std::move(n));
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  auto n = make_result(a.value().middleRows(start, count), {&a});
  if (n->requires_grad) {
    n->backward = [start, count](Node& self) {
      Node& p = *self.parents[0];
      Mat g = Mat::Zero(p.value.rows(), p.value.cols());
      g.middleRows(start, count) = self.grad;
      p.accumulate(g);
    };
  }
  return Var(std::move(n));
}

Var rmsnorm(const Var& x, const Var& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw std::invalid_argument("rmsnorm: gain shape");
  const Mat& xv = x.value();
  const double inv_n = 1.0 / static_cast<double>(xv.cols());
  Eigen::VectorXd inv_rms(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    inv_rms(i) = 1.0 / std::sqrt(xv.row(i).squaredNorm() * inv_n + eps);
  }
  Mat y = inv_rms.asDiagonal() * xv;
  y.array().rowwise() *= gain.value().row(0).array();
  auto n = make_result(std::move(y), {&x, &gain});
  if (n->requires_grad) {
    n->meter(static_cast<std::size_t>(inv_rms.size()));
    n->backward = [inv_rms, inv_n](Node& self) {
      Node& px = *self.parents[0];
      Node& pg = *self.parents[1];
      Mat xhat = inv_rms.asDiagonal() * px.value;
      if (pg.requires_grad) pg.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
      if (px.requires_grad) {
        Mat dxhat = self.grad;
        dxhat.array().rowwise() *= pg.value.row(0).array();
        Eigen::VectorXd proj = dxhat.cwiseProduct(xhat).rowwise().sum() * inv_n;
        Mat dx = dxhat - proj.asDiagonal() * xhat;
        px.accumulate(inv_rms.asDiagonal() * dx);
      }
    };
  }
  return Var(std::move(n));
}

Var gelu(const Var& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Mat y = x.value().unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  });
  auto n = make_result(std::move(y), {&x});
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& px = *self.parents[0];
      Mat d = px.value.unaryExpr([](double v) {
        const double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      });
      px.accumulate(self.grad.cwiseProduct(d));
    };
  }
  return Var(std::move(n));
}

Var gather_row(const Var& table, Eigen::Index r) {
  if (r < 0 || r >= table.rows()) throw std::out_of_range("gather_row");
  auto n = make_result(table.value().row(r), {&table});
  if (n->requires_grad) {
    n->backward = [r](Node& self) {
      Node& p = *self.parents[0];
      Mat g = Mat::Zero(p.value.rows(), p.value.cols());
      g.row(r) = self.grad.row(0);
      p.accumulate(g);
    };
  }
  return Var(std::move(n));
}

Var sum_product(const Var& a, const Mat& g) {
  check_same_shape(a.value(), g, "sum_product");
  Mat y(1, 1);
  y(0, 0) = a.value().cwiseProduct(g).sum();
  auto n = make_result(std::move(y), {&a});
  if (n->requires_grad) {
    n->backward = [g](Node& self) { self.parents[0]->accumulate(g * self.grad(0, 0)); };
  }
  return Var(std::move(n));
}

Var mse(const Var& a, const Mat& target) {
  check_same_shape(a.value(), target, "mse");
  const double inv_n = 1.0 / static_cast<double>(target.size());
  Mat y(1, 1);
  y(0, 0) = (a.value() - target).squaredNorm() * inv_n;
  auto n = make_result(std::move(y), {&a});
  if (n->requires_grad) {
    n->backward = [target, inv_n](Node& self) {
      Node& p = *self.parents[0];
      p.accumulate((p.value - target) * (2.0 * inv_n * self.grad(0, 0)));
    };
  }
  return Var(std::move(n));
}

Var sum_all(std::span<const Var> scalars) {
  Mat y = Mat::Zero(1, 1);
  bool needs_grad = false;
  for (const Var& s : scalars) {
    if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("sum_all: expects 1x1 inputs");
    y(0, 0) += s.value()(0, 0);
    needs_grad = needs_grad || s.requires_grad();
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(y);
  if (GradMode::enabled() && needs_grad) {
    n->requires_grad = true;
    for (const Var& s : scalars) n->parents.push_back(s.node());
    n->backward = [](Node& self) {
      for (auto& p : self.parents) {
        if (p->requires_grad) p->accumulate(self.grad);
      }
    };
  }
  return Var(std::move(n));
}

void apply_rope(Mat& x, std::span<const int> positions, int heads, double base, int sign) {
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    throw std::invalid_argument("apply_rope: one position per row required");
  }
  const int width = static_cast<int>(x.cols());
  if (heads <= 0 || width % heads != 0 || (width / heads) % 2 != 0) {
    throw std::invalid_argument("apply_rope: head dimension must be even");
  }
  const int head_dim = width / heads;
  const std::vector<double> inv = inverse_frequencies(head_dim, base);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
    for (int j = 0; j < head_dim / 2; ++j) {
      const double angle = sign * pos * inv[static_cast<std::size_t>(j)];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * head_dim + 2 * j;
        const double a = x(i, c0);
        const double b = x(i, c0 + 1);
        x(i, c0) = a * c - b * s;
        x(i, c0 + 1) = a * s + b * c;
      }
    }
  }
}

Mat rope_logits(const Mat& q_pre, std::span<const int> q_positions, const Mat& k_pre,
                std::span<const int> k_positions, int heads, int head, double rope_base) {
  const int head_dim = static_cast<int>(q_pre.cols()) / heads;
  const Mat qr = rotated(q_pre, q_positions, heads, rope_base, +1);
  const Mat kr = rotated(k_pre, k_positions, heads, rope_base, +1);
  return (qr.middleCols(head * head_dim, head_dim) * kr.middleCols(head * head_dim, head_dim).transpose()) *
         (1.0 / std::sqrt(static_cast<double>(head_dim)));
}

Var rope_attention(const Var& q, std::span<const int> q_positions,
                   std::span<const KVSegment> segments, int heads, double rope_base) {
  const Eigen::Index n_q = q.rows();
  const Eigen::Index width = q.cols();
  if (heads <= 0 || width % heads != 0) throw std::invalid_argument("rope_attention: width % heads");
  const int head_dim = static_cast<int>(width / heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Eigen::Index n_k = 0;
  bool needs_grad = q.requires_grad();
  for (const KVSegment& s : segments) {
    if (s.key.cols() != width || s.value.cols() != width || s.key.rows() != s.value.rows() ||
        static_cast<Eigen::Index>(s.positions.size()) != s.key.rows()) {
      throw std::invalid_argument("rope_attention: segment shape mismatch");
    }
    n_k += s.key.rows();
    needs_grad = needs_grad || s.key.requires_grad() || s.value.requires_grad();
  }
  if (n_k == 0) throw std::invalid_argument("rope_attention: no keys");

  std::vector<int> qpos(q_positions.begin(), q_positions.end());
  std::vector<std::vector<int>> kpos;
  kpos.reserve(segments.size());
  for (const KVSegment& s : segments) kpos.emplace_back(s.positions.begin(), s.positions.end());

  auto stack = [&](auto&& get) {
    Mat all(n_k, width);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const Mat part = get(i);
      all.middleRows(at, part.rows()) = part;
      at += part.rows();
    }
    return all;
  };

  const Mat qr = rotated(q.value(), qpos, heads, rope_base, +1);
  const Mat kr = stack([&](std::size_t i) { return rotated(segments[i].key.value(), kpos[i], heads, rope_base, +1); });
  const Mat vv = stack([&](std::size_t i) { return segments[i].value.value(); });

  Mat out(n_q, width);
  Mat lse(n_q, heads);
  for (int h = 0; h < heads; ++h) {
    Mat s = (qr.middleCols(h * head_dim, head_dim) * kr.middleCols(h * head_dim, head_dim).transpose()) * inv_sqrt;
    for (Eigen::Index i = 0; i < n_q; ++i) {
      const double m = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - m).exp().matrix();
      const double z = s.row(i).sum();
      s.row(i) /= z;
      lse(i, h) = m + std::log(z);
    }
    out.middleCols(h * head_dim, head_dim) = s * vv.middleCols(h * head_dim, head_dim);
  }

  auto n = std::make_shared<Node>();
  n->value = std::move(out);
  if (!(GradMode::enabled() && needs_grad)) return Var(std::move(n));

  n->requires_grad = true;
  n->parents.push_back(q.node());
  for (const KVSegment& s : segments) {
    n->parents.push_back(s.key.node());
    n->parents.push_back(s.value.node());
  }
  n->meter(static_cast<std::size_t>(n->value.size() + lse.size()));
  n->backward = [qpos = std::move(qpos), kpos = std::move(kpos), lse = std::move(lse), heads, head_dim,
                 inv_sqrt, rope_base, n_k, width](Node& self) {
    Node& pq = *self.parents[0];
    const std::size_t n_seg = kpos.size();
    Mat qr = rotated(pq.value, qpos, heads, rope_base, +1);
    Mat kr(n_k, width);
    Mat vv(n_k, width);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < n_seg; ++i) {
      const Mat& k = self.parents[1 + 2 * i]->value;
      kr.middleRows(at, k.rows()) = rotated(k, kpos[i], heads, rope_base, +1);
      vv.middleRows(at, k.rows()) = self.parents[2 + 2 * i]->value;
      at += k.rows();
    }
    const Mat& d_out = self.grad;
    Mat dq = Mat::Zero(qr.rows(), width);
    Mat dk = Mat::Zero(n_k, width);
    Mat dv = Mat::Zero(n_k, width);
    for (int h = 0; h < heads; ++h) {
      const auto qh = qr.middleCols(h * head_dim, head_dim);
      const auto kh = kr.middleCols(h * head_dim, head_dim);
      const auto vh = vv.middleCols(h * head_dim, head_dim);
      const auto doh = d_out.middleCols(h * head_dim, head_dim);
      const auto oh = self.value.middleCols(h * head_dim, head_dim);
      Mat p = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        p.row(i) = (p.row(i).array() - lse(i, h)).exp().matrix();
      }
      dv.middleCols(h * head_dim, head_dim) = p.transpose() * doh;
      Mat dp = doh * vh.transpose();
      const Eigen::VectorXd delta = doh.cwiseProduct(oh).rowwise().sum();
      dp.colwise() -= delta;
      const Mat ds = p.cwiseProduct(dp);
      dq.middleCols(h * head_dim, head_dim) = (ds * kh) * inv_sqrt;
      dk.middleCols(h * head_dim, head_dim) = (ds.transpose() * qh) * inv_sqrt;
    }
    if (pq.requires_grad) {
      apply_rope(dq, qpos, heads, rope_base, -1);
      pq.accumulate(dq);
    }
    at = 0;
    for (std::size_t i = 0; i < n_seg; ++i) {
      Node& pk = *self.parents[1 + 2 * i];
      Node& pv = *self.parents[2 + 2 * i];
      const Eigen::Index rows = pk.value.rows();
      if (pk.requires_grad) {
        Mat g = dk.middleRows(at, rows);
        apply_rope(g, kpos[i], heads, rope_base, -1);
        pk.accumulate(g);
      }
      if (pv.requires_grad) pv.accumulate(dv.middleRows(at, rows));
      at += rows;
    }
  };
  return Var(std::move(n));
}

void backward(const Var& root, const Mat& seed) {
  if (!root.requires_grad()) return;
  check_same_shape(root.value(), seed, "backward seed");
  NoGradGuard no_grad;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) {
      n->backward(*n);
      n->grad.resize(0, 0);
    } else if (n->param != nullptr) {
      n->param->grad += n->grad;
    }
  }
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root is not scalar");
  backward(root, Mat::Ones(1, 1));
}

Adam::Adam(std::vector<Parameter*> params, Options opts) : params_(std::move(params)), opts_(opts) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * p.grad;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * p.grad.cwiseAbs2();
    if (opts_.weight_decay > 0.0) p.value *= (1.0 - opts_.lr * opts_.weight_decay);
    p.value.array() -= opts_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace star::ag
