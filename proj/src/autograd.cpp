// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mtel/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace mtel::ag {

namespace {

thread_local bool g_grad_enabled = true;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

Var make_result(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

// Parent gradient accessor that returns nullptr for non-differentiable inputs.
Matrix* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

void softmax_rows_inplace(Eigen::Ref<Matrix> s) {
  for (Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

Matrix& Node::ensure_grad() {
  const Matrix& v = val();
  if (grad.rows() != v.rows() || grad.cols() != v.cols()) grad = Matrix::Zero(v.rows(), v.cols());
  return grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("Var::item on non-scalar");
  return value()(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var variable(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var parameter(const Matrix& value, Matrix& grad_sink) {
  auto node = std::make_shared<Node>();
  node->borrowed = &value;
  node->requires_grad = g_grad_enabled;
  node->grad_sink = &grad_sink;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::logic_error("backward: root must be scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() > 0) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->grad_sink && n->grad.size() > 0) {
      if (n->grad_sink->size() == 0) *n->grad_sink = Matrix::Zero(n->grad.rows(), n->grad.cols());
      *n->grad_sink += n->grad;
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->val();
    const Matrix& bv = self.parents[1]->val();
    if (Matrix* ga = pgrad(self, 0)) ga->noalias() += self.grad * bv.transpose();
    if (Matrix* gb = pgrad(self, 1)) gb->noalias() += av.transpose() * self.grad;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad;
    if (Matrix* gb = pgrad(self, 1)) *gb += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad;
    if (Matrix* gb = pgrad(self, 1)) *gb -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->val();
    const Matrix& bv = self.parents[1]->val();
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad.cwiseProduct(bv);
    if (Matrix* gb = pgrad(self, 1)) *gb += self.grad.cwiseProduct(av);
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad * s;
  });
}

Var add_scalar(const Var& a, double s) {
  return make_result((a.value().array() + s).matrix(), {a}, [](Node& self) {
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad;
  });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a}, [](Node& self) {
    if (Matrix* ga = pgrad(self, 0)) *ga += self.grad.transpose();
  });
}

Var add_row(const Var& x, const Var& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return make_result(std::move(out), {x, row}, [](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) *gx += self.grad;
    if (Matrix* gb = pgrad(self, 1)) *gb += self.grad.colwise().sum();
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x.cols() != weight.rows()) {
    throw std::invalid_argument("linear: input dim " + std::to_string(x.cols()) + " does not match weight rows " +
                                std::to_string(weight.rows()));
  }
  if (bias.rows() != 1 || bias.cols() != weight.cols()) throw std::invalid_argument("linear: bias shape mismatch");
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x, weight, bias}, [](Node& self) {
    const Matrix& xv = self.parents[0]->val();
    const Matrix& wv = self.parents[1]->val();
    if (Matrix* gx = pgrad(self, 0)) gx->noalias() += self.grad * wv.transpose();
    if (Matrix* gw = pgrad(self, 1)) gw->noalias() += xv.transpose() * self.grad;
    if (Matrix* gb = pgrad(self, 2)) *gb += self.grad.colwise().sum();
  });
}

Var sigmoid(const Var& x) {
  Matrix out = x.value().unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  auto keep = std::make_shared<Matrix>(out);
  return make_result(std::move(out), {x}, [keep](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) *gx += self.grad.cwiseProduct(keep->cwiseProduct((1.0 - keep->array()).matrix()));
  });
}

Var relu(const Var& x) { return leaky_relu(x, 0.0); }

Var leaky_relu(const Var& x, double slope) {
  Matrix out = x.value().unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
  return make_result(std::move(out), {x}, [slope](Node& self) {
    const Matrix& xv = self.parents[0]->val();
    if (Matrix* gx = pgrad(self, 0)) {
      *gx += self.grad.binaryExpr(xv, [slope](double g, double v) { return v > 0 ? g : slope * g; });
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  }
  const Matrix& xv = x.value();
  auto xhat = std::make_shared<Matrix>(xv.rows(), n);
  auto inv_std = std::make_shared<Eigen::VectorXd>(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mean) * (*inv_std)(r);
  }
  Matrix out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std, n](Node& self) {
    const Matrix& g = self.grad;
    const Matrix& gam = self.parents[1]->val();
    if (Matrix* gx = pgrad(self, 0)) {
      for (Index r = 0; r < g.rows(); ++r) {
        Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gam.row(0));
        const double s1 = dxhat.sum();
        const double s2 = dxhat.dot(xhat->row(r));
        gx->row(r) += ((*inv_std)(r) / static_cast<double>(n)) *
                      (static_cast<double>(n) * dxhat.array() - s1 - xhat->row(r).array() * s2).matrix();
      }
    }
    if (Matrix* gg = pgrad(self, 1)) *gg += g.cwiseProduct(*xhat).colwise().sum();
    if (Matrix* gb = pgrad(self, 2)) *gb += g.colwise().sum();
  });
}

Var softmax_cols(const Var& x) {
  Matrix out = x.value();
  for (Index c = 0; c < out.cols(); ++c) {
    const double mx = out.col(c).maxCoeff();
    out.col(c) = (out.col(c).array() - mx).exp();
    out.col(c) /= out.col(c).sum();
  }
  auto keep = std::make_shared<Matrix>(out);
  return make_result(std::move(out), {x}, [keep](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) {
      const Matrix& y = *keep;
      Eigen::RowVectorXd dots = self.grad.cwiseProduct(y).colwise().sum();
      Matrix centered = self.grad;
      centered.rowwise() -= dots;
      *gx += y.cwiseProduct(centered);
    }
  });
}

Var sum_rows(const Var& x) {
  Matrix out = x.value().colwise().sum();
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) gx->rowwise() += self.grad.row(0);
  });
}

Var sum_all(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) gx->array() += self.grad(0, 0);
  });
}

Var mean_all(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum_all(x), 1.0 / n);
}

Var rotate_rows(const Var& x, Index shift) {
  const Index t = x.rows();
  if (t == 0) return x;
  const Index k = ((shift % t) + t) % t;
  Matrix out(t, x.cols());
  const Matrix& xv = x.value();
  for (Index r = 0; r < t; ++r) out.row(r) = xv.row((r + k) % t);
  return make_result(std::move(out), {x}, [k, t](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) {
      for (Index r = 0; r < t; ++r) gx->row((r + k) % t) += self.grad.row(r);
    }
  });
}

Var gather_rows(const Var& x, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  const Matrix& xv = x.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = xv.row(rows[i]);
  }
  return make_result(std::move(out), {x}, [rows](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) {
      for (std::size_t i = 0; i < rows.size(); ++i) gx->row(rows[i]) += self.grad.row(static_cast<Index>(i));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index total = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (Matrix* g = pgrad(self, i)) *g += self.grad.middleRows(offsets[i], g->rows());
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index total = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(rows, total);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return make_result(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (Matrix* g = pgrad(self, i)) *g += self.grad.middleCols(offsets[i], g->cols());
    }
  });
}

Var column(const Var& x, Index col) {
  if (col < 0 || col >= x.cols()) throw std::out_of_range("column: index out of range");
  Matrix out = x.value().col(col);
  return make_result(std::move(out), {x}, [col](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) gx->col(col) += self.grad.col(0);
  });
}

Var element(const Var& x, Index row, Index col) {
  if (row < 0 || row >= x.rows() || col < 0 || col >= x.cols()) throw std::out_of_range("element: out of range");
  Matrix out(1, 1);
  out(0, 0) = x.value()(row, col);
  return make_result(std::move(out), {x}, [row, col](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) (*gx)(row, col) += self.grad(0, 0);
  });
}

Var mean_of(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("mean_of: no inputs");
  if (parts.size() == 1) return parts.front();
  Matrix out = parts.front().value();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    check_same_shape(parts.front(), parts[i], "mean_of");
    out += parts[i].value();
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  out *= inv;
  return make_result(std::move(out), parts, [inv](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (Matrix* g = pgrad(self, i)) *g += self.grad * inv;
    }
  });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  auto mask = std::make_shared<Matrix>(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask->size(); ++i) mask->data()[i] = keep(rng) ? s : 0.0;
  return make_result(x.value().cwiseProduct(*mask), {x}, [mask](Node& self) {
    if (Matrix* gx = pgrad(self, 0)) *gx += self.grad.cwiseProduct(*mask);
  });
}

Var bce_mean(const Var& p, const Matrix& target, double eps) {
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw std::invalid_argument("bce_mean: shape mismatch");
  const Matrix& pv = p.value();
  const double n = static_cast<double>(pv.size());
  double total = 0.0;
  for (Index i = 0; i < pv.size(); ++i) {
    const double pc = std::clamp(pv.data()[i], eps, 1.0 - eps);
    const double y = target.data()[i];
    total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
  }
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return make_result(std::move(out), {p}, [target, eps, n](Node& self) {
    if (Matrix* gp = pgrad(self, 0)) {
      const Matrix& pv = self.parents[0]->val();
      const double g = self.grad(0, 0);
      for (Index i = 0; i < pv.size(); ++i) {
        const double v = pv.data()[i];
        if (v < eps || v > 1.0 - eps) continue;
        const double y = target.data()[i];
        gp->data()[i] += g * (-y / v + (1.0 - y) / (1.0 - v)) / n;
      }
    }
  });
}

Var cosine_rows(const Var& e, const Var& x) {
  if (e.rows() != 1 || e.cols() != x.cols()) throw std::invalid_argument("cosine_rows: shape mismatch");
  const Matrix& ev = e.value();
  const Matrix& xv = x.value();
  const double en = ev.norm();
  Eigen::VectorXd xn = xv.rowwise().norm();
  Matrix out(xv.rows(), 1);
  for (Index t = 0; t < xv.rows(); ++t) {
    out(t, 0) = (en > 0 && xn(t) > 0) ? ev.row(0).dot(xv.row(t)) / (en * xn(t)) : 0.0;
  }
  auto cos = std::make_shared<Matrix>(out);
  return make_result(std::move(out), {e, x}, [cos, en, xn](Node& self) {
    const Matrix& ev = self.parents[0]->val();
    const Matrix& xv = self.parents[1]->val();
    Matrix* ge = pgrad(self, 0);
    Matrix* gx = pgrad(self, 1);
    for (Index t = 0; t < xv.rows(); ++t) {
      if (!(en > 0 && xn(t) > 0)) continue;
      const double g = self.grad(t, 0);
      const double c = (*cos)(t, 0);
      if (ge) ge->row(0) += g * (xv.row(t) / (en * xn(t)) - c * ev.row(0) / (en * en));
      if (gx) gx->row(t) += g * (ev.row(0) / (en * xn(t)) - c * xv.row(t) / (xn(t) * xn(t)));
    }
  });
}

namespace {

struct AttentionLayout {
  Index nq = 0, nk = 0, dh = 0;
  int heads = 1;
  std::vector<std::pair<Index, Index>> blocks;  // (start, length); keys share the block when windowed
  bool windowed = false;
};

AttentionLayout attention_layout(const Matrix& q, const Matrix& k, int heads, Index window) {
  if (heads < 1 || q.cols() % heads != 0) throw std::invalid_argument("attention: model dim not divisible by heads");
  if (k.cols() != q.cols()) throw std::invalid_argument("attention: query/key dim mismatch");
  AttentionLayout l;
  l.nq = q.rows();
  l.nk = k.rows();
  l.heads = heads;
  l.dh = q.cols() / heads;
  if (window > 0) {
    if (l.nq != l.nk) throw std::invalid_argument("attention: windowed attention needs equal lengths");
    l.windowed = true;
    for (Index s = 0; s < l.nq; s += window) l.blocks.emplace_back(s, std::min(window, l.nq - s));
  } else {
    if (l.nk == 0) throw std::invalid_argument("attention: no keys");
    l.blocks.emplace_back(0, l.nq);
  }
  return l;
}

}  // namespace

std::vector<Matrix> attention_weights(const Matrix& q, const Matrix& k, int heads, Index window) {
  const AttentionLayout l = attention_layout(q, k, heads, window);
  const double inv = 1.0 / std::sqrt(static_cast<double>(l.dh));
  std::vector<Matrix> probs;
  for (auto [start, len] : l.blocks) {
    const Index ks = l.windowed ? start : 0;
    const Index kl = l.windowed ? len : l.nk;
    for (int h = 0; h < l.heads; ++h) {
      Matrix s = q.block(start, h * l.dh, len, l.dh).lazyProduct(k.block(ks, h * l.dh, kl, l.dh).transpose());
      s *= inv;
      softmax_rows_inplace(s);
      probs.push_back(std::move(s));
    }
  }
  return probs;
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, Index window) {
  if (v.rows() != k.rows() || v.cols() != k.cols()) throw std::invalid_argument("attention: key/value shape mismatch");
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();

  const AttentionLayout l = attention_layout(qv, kv, heads, window);
  auto probs = std::make_shared<std::vector<Matrix>>(attention_weights(qv, kv, heads, window));
  Matrix out = Matrix::Zero(l.nq, qv.cols());
  std::size_t idx = 0;
  for (auto [start, len] : l.blocks) {
    const Index ks = l.windowed ? start : 0;
    const Index kl = l.windowed ? len : l.nk;
    for (int h = 0; h < l.heads; ++h) {
      out.block(start, h * l.dh, len, l.dh) = (*probs)[idx++].lazyProduct(vv.block(ks, h * l.dh, kl, l.dh));
    }
  }
  return make_result(std::move(out), {q, k, v}, [probs, l](Node& self) {
    const Matrix& qv = self.parents[0]->val();
    const Matrix& kv = self.parents[1]->val();
    const Matrix& vv = self.parents[2]->val();
    Matrix* gq = pgrad(self, 0);
    Matrix* gk = pgrad(self, 1);
    Matrix* gv = pgrad(self, 2);
    const double inv = 1.0 / std::sqrt(static_cast<double>(l.dh));
    std::size_t idx = 0;
    for (auto [start, len] : l.blocks) {
      const Index ks = l.windowed ? start : 0;
      const Index kl = l.windowed ? len : l.nk;
      for (int h = 0; h < l.heads; ++h) {
        const Matrix& a = (*probs)[idx++];
        const auto dout = self.grad.block(start, h * l.dh, len, l.dh);
        if (gv) gv->block(ks, h * l.dh, kl, l.dh) += a.transpose().lazyProduct(dout);
        if (!gq && !gk) continue;
        Matrix da = dout.lazyProduct(vv.block(ks, h * l.dh, kl, l.dh).transpose());
        Eigen::VectorXd rowdot = da.cwiseProduct(a).rowwise().sum();
        Matrix ds = a.cwiseProduct((da.colwise() - rowdot));
        if (gq) gq->block(start, h * l.dh, len, l.dh) += inv * ds.lazyProduct(kv.block(ks, h * l.dh, kl, l.dh));
        if (gk) gk->block(ks, h * l.dh, kl, l.dh) += inv * ds.transpose().lazyProduct(qv.block(start, h * l.dh, len, l.dh));
      }
    }
  });
}

Matrix graph_attention_coefficients(const Matrix& src_score, const Matrix& dst_score, const Mask& adjacency,
                                    double slope) {
  const Index n = adjacency.rows();
  if (adjacency.cols() != n || src_score.rows() != n || dst_score.rows() != n) {
    throw std::invalid_argument("graph_attention: shape mismatch");
  }
  Matrix alpha = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Index j = 0; j < n; ++j) {
      if (!adjacency(i, j)) continue;
      const double raw = src_score(i, 0) + dst_score(j, 0);
      const double e = raw > 0 ? raw : slope * raw;
      alpha(i, j) = e;
      mx = std::max(mx, e);
      any = true;
    }
    if (!any) throw std::logic_error("graph_attention: node " + std::to_string(i) + " has no neighbours");
    double sum = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (!adjacency(i, j)) continue;
      alpha(i, j) = std::exp(alpha(i, j) - mx);
      sum += alpha(i, j);
    }
    alpha.row(i) /= sum;
  }
  return alpha;
}

Var graph_attention(const Var& src_score, const Var& dst_score, const Var& h, const Mask& adjacency, double slope) {
  const Index n = adjacency.rows();
  if (h.rows() != n || adjacency.cols() != n || src_score.rows() != n || dst_score.rows() != n) {
    throw std::invalid_argument("graph_attention: shape mismatch");
  }
  // Event graphs are sparse (chain plus one clique), so work per edge.
  struct Edges {
    std::vector<Index> offset, target;
    std::vector<double> alpha;
  };
  auto edges = std::make_shared<Edges>();
  edges->offset.reserve(static_cast<std::size_t>(n) + 1);
  edges->offset.push_back(0);
  const Matrix& s = src_score.value();
  const Matrix& d = dst_score.value();
  for (Index i = 0; i < n; ++i) {
    const std::size_t begin = edges->target.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (!adjacency(i, j)) continue;
      const double raw = s(i, 0) + d(j, 0);
      const double e = raw > 0 ? raw : slope * raw;
      edges->target.push_back(j);
      edges->alpha.push_back(e);
      mx = std::max(mx, e);
    }
    if (edges->target.size() == begin)
      throw std::logic_error("graph_attention: node " + std::to_string(i) + " has no neighbours");
    double sum = 0.0;
    for (std::size_t k = begin; k < edges->alpha.size(); ++k) {
      edges->alpha[k] = std::exp(edges->alpha[k] - mx);
      sum += edges->alpha[k];
    }
    for (std::size_t k = begin; k < edges->alpha.size(); ++k) edges->alpha[k] /= sum;
    edges->offset.push_back(static_cast<Index>(edges->target.size()));
  }

  const Matrix& hv = h.value();
  Matrix out = Matrix::Zero(n, hv.cols());
  for (Index i = 0; i < n; ++i)
    for (Index k = edges->offset[i]; k < edges->offset[i + 1]; ++k)
      out.row(i) += edges->alpha[static_cast<std::size_t>(k)] * hv.row(edges->target[static_cast<std::size_t>(k)]);

  return make_result(std::move(out), {src_score, dst_score, h}, [edges, slope](Node& self) {
    const Matrix& s = self.parents[0]->val();
    const Matrix& d = self.parents[1]->val();
    const Matrix& hv = self.parents[2]->val();
    Matrix* gs = pgrad(self, 0);
    Matrix* gd = pgrad(self, 1);
    Matrix* gh = pgrad(self, 2);
    const Index n = hv.rows();
    std::vector<double> dalpha;
    for (Index i = 0; i < n; ++i) {
      const auto begin = static_cast<std::size_t>(edges->offset[i]);
      const auto end = static_cast<std::size_t>(edges->offset[i + 1]);
      dalpha.assign(end - begin, 0.0);
      double rowdot = 0.0;
      for (std::size_t k = begin; k < end; ++k) {
        const Index j = edges->target[k];
        if (gh) gh->row(j) += edges->alpha[k] * self.grad.row(i);
        dalpha[k - begin] = self.grad.row(i).dot(hv.row(j));
        rowdot += edges->alpha[k] * dalpha[k - begin];
      }
      if (!gs && !gd) continue;
      for (std::size_t k = begin; k < end; ++k) {
        const Index j = edges->target[k];
        const double de = edges->alpha[k] * (dalpha[k - begin] - rowdot);
        const double draw = (s(i, 0) + d(j, 0)) > 0 ? de : slope * de;
        if (gs) (*gs)(i, 0) += draw;
        if (gd) (*gd)(j, 0) += draw;
      }
    }
  });
}

}  // namespace mtel::ag
