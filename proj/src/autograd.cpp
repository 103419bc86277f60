#include "pdiff/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace pdiff {

// ---------------------------------------------------------------------------
// ParameterSet / Gradients

std::size_t ParameterSet::add(std::string name, Tensor value) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ValidationError("duplicate parameter name: " + name);
  }
  entries_.push_back({std::move(name), std::move(value)});
  return entries_.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw ValidationError("unknown parameter: " + name);
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Gradients::Gradients(const ParameterSet& params) {
  grads_.reserve(params.size());
  for (const auto& e : params) grads_.emplace_back(e.value.shape(), 0.0);
}

void Gradients::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void Gradients::add(const Gradients& other, double s) {
  if (other.size() != size()) throw ValidationError("gradient set size mismatch");
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto& dst = grads_[i].storage();
    const auto& src = other.grads_[i].storage();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += s * src[k];
  }
}

double Gradients::global_norm() const {
  double ss = 0.0;
  for (const auto& g : grads_) {
    for (double v : g.values()) ss += v * v;
  }
  return std::sqrt(ss);
}

void Gradients::scale(double s) {
  for (auto& g : grads_) {
    for (double& v : g.values()) v *= s;
  }
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(*this); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, false, -1});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, true, -1});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(const ParameterSet& params, std::size_t index) {
  nodes_.push_back({params[index].value, {}, {}, true, static_cast<long>(index)});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw ValidationError("variable from a different tape");
    rg = rg || nodes_[v.id].requires_grad;
  }
  nodes_.push_back({std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg, -1});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool rg = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw ValidationError("variable from a different tape");
    rg = rg || nodes_[v.id].requires_grad;
  }
  nodes_.push_back({std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, rg, -1});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor* Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root, Gradients* param_grads) {
  if (root.tape != this) throw ValidationError("backward root from a different tape");
  if (value(root).size() != 1) throw ValidationError("backward root must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[root.id].requires_grad) return;
  nodes_[root.id].grad = Tensor(nodes_[root.id].value.shape(), 1.0);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) {
      // Copy: the closure may allocate other gradient buffers but never this one.
      const Tensor g = n.grad;
      n.backward(g, *this);
    }
    if (n.param_index >= 0 && param_grads != nullptr) {
      auto& dst = (*param_grads)[static_cast<std::size_t>(n.param_index)].storage();
      const auto& src = n.grad.storage();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

void accumulate(Tensor* dst, const Tensor& src, double s = 1.0) {
  if (dst == nullptr) return;
  auto& d = dst->storage();
  const auto& v = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * v[i];
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ValidationError("invalid variable");
  return *a.tape;
}

void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r) {
    throw ValidationError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                          shape_string(t.shape()));
  }
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return tape.record(std::move(y), {a}, [a, df](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const Tensor& x = t.value(a);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * df(x[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(a), g);
    accumulate(t.grad_buffer(b), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(a), g);
    accumulate(t.grad_buffer(b), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](const Tensor& g, Tape& t) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](const Tensor& g, Tape& t) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= s;
  return tape_of(a).record(std::move(y), {a}, [a, s](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(a), g, s);
  });
}

Var add_scalar(Var a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v += s;
  return tape_of(a).record(std::move(y), {a}, [a](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(a), g);
  });
}

Var mul_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  return tape_of(a).record(std::move(y), {a}, [a, c](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c[i];
  });
}

Var add_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "add_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += c[i];
  return tape_of(a).record(std::move(y), {a}, [a](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(a), g);
  });
}

Var div_by(Var a, Var s) {
  if (s.value().size() != 1) throw ValidationError("div_by: divisor must be a scalar");
  const double sv = s.value()[0];
  Tensor y = a.value();
  for (double& v : y.values()) v /= sv;
  return tape_of(a).record(std::move(y), {a, s}, [a, s](const Tensor& g, Tape& t) {
    const double sv = t.value(s)[0];
    const Tensor& av = t.value(a);
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / sv;
    }
    if (Tensor* gs = t.grad_buffer(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*gs)[0] -= acc / (sv * sv);
    }
  });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sqrt(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw ValidationError("sqrt of a non-positive value");
  }
  return unary(a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

namespace {
double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary(a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Var silu(Var a) {
  return unary(a, [](double x) { return x * sigmoid_value(x); },
               [](double x) {
                 const double s = sigmoid_value(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return tape_of(a).record(Tensor::scalar(s), {a}, [a](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (double& v : ga->values()) v += g[0];
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ValidationError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var dot(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "dot");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return tape_of(a).record(Tensor::scalar(s), {a, b}, [a, b](const Tensor& g, Tape& t) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += g[0] * bv[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += g[0] * av[i];
    }
  });
}

Var stack_scalars(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw ValidationError("stack of zero scalars");
  Tensor y({static_cast<int>(scalars.size())});
  for (std::size_t i = 0; i < scalars.size(); ++i) y[i] = scalars[i].value().item();
  return tape_of(scalars[0]).record(std::move(y), scalars, [scalars](const Tensor& g, Tape& t) {
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (Tensor* gs = t.grad_buffer(scalars[i])) (*gs)[0] += g[i];
    }
  });
}

Var concat(Var a, Var b) {
  require_rank(a.value(), 1, "concat");
  require_rank(b.value(), 1, "concat");
  const int na = a.value().dim(0);
  const int nb = b.value().dim(0);
  Tensor y({na + nb});
  std::copy(a.value().values().begin(), a.value().values().end(), y.data());
  std::copy(b.value().values().begin(), b.value().values().end(), y.data() + na);
  return tape_of(a).record(std::move(y), {a, b}, [a, b, na, nb](const Tensor& g, Tape& t) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (int i = 0; i < na; ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (int i = 0; i < nb; ++i) (*gb)[i] += g[na + i];
    }
  });
}

// ---------------------------------------------------------------------------
// shape / indexing

Var reshape(Var a, std::vector<int> shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(y), {a}, [a](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_rank(x, 2, "transpose");
  const int m = x.dim(0), n = x.dim(1);
  Tensor y({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(j) * m + i] = x[static_cast<std::size_t>(i) * n + j];
  }
  return tape_of(a).record(std::move(y), {a}, [a, m, n](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) (*ga)[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    }
  });
}

Var select_row(Var a, int row) {
  const Tensor& x = a.value();
  require_rank(x, 2, "select_row");
  const int n = x.dim(0), d = x.dim(1);
  if (row < 0 || row >= n) throw ValidationError("select_row: row out of range");
  Tensor y({d});
  std::copy_n(x.data() + static_cast<std::size_t>(row) * d, d, y.data());
  return tape_of(a).record(std::move(y), {a}, [a, row, d](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int j = 0; j < d; ++j) (*ga)[static_cast<std::size_t>(row) * d + j] += g[j];
  });
}

Var replace_row(Var a, int row, Var r) {
  const Tensor& x = a.value();
  require_rank(x, 2, "replace_row");
  const int n = x.dim(0), d = x.dim(1);
  if (row < 0 || row >= n) throw ValidationError("replace_row: row out of range");
  if (r.value().rank() != 1 || r.value().dim(0) != d) throw ValidationError("replace_row: width mismatch");
  Tensor y = x;
  std::copy_n(r.value().data(), d, y.data() + static_cast<std::size_t>(row) * d);
  return tape_of(a).record(std::move(y), {a, r}, [a, r, row, d](const Tensor& g, Tape& t) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (static_cast<int>(i / d) != row) (*ga)[i] += g[i];
      }
    }
    if (Tensor* gr = t.grad_buffer(r)) {
      for (int j = 0; j < d; ++j) (*gr)[j] += g[static_cast<std::size_t>(row) * d + j];
    }
  });
}

Var repeat_rows(Var v, int n) {
  const Tensor& x = v.value();
  require_rank(x, 1, "repeat_rows");
  const int d = x.dim(0);
  Tensor y({n, d});
  for (int i = 0; i < n; ++i) std::copy_n(x.data(), d, y.data() + static_cast<std::size_t>(i) * d);
  return tape_of(v).record(std::move(y), {v}, [v, n, d](const Tensor& g, Tape& t) {
    Tensor* gv = t.grad_buffer(v);
    if (!gv) return;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) (*gv)[j] += g[static_cast<std::size_t>(i) * d + j];
    }
  });
}

Var crop(Var a, int x0, int y0, int x1, int y1) {
  const Tensor& x = a.value();
  require_rank(x, 3, "crop");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (x0 < 0 || y0 < 0 || x1 > w || y1 > h || x0 >= x1 || y0 >= y1) {
    throw ValidationError("crop rectangle outside the image");
  }
  const int ch = y1 - y0, cw = x1 - x0;
  Tensor y({c, ch, cw});
  for (int k = 0; k < c; ++k) {
    for (int yy = 0; yy < ch; ++yy) {
      for (int xx = 0; xx < cw; ++xx) y.at(k, yy, xx) = x.at(k, yy + y0, xx + x0);
    }
  }
  return tape_of(a).record(std::move(y), {a}, [a, x0, y0, c, ch, cw](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int k = 0; k < c; ++k) {
      for (int yy = 0; yy < ch; ++yy) {
        for (int xx = 0; xx < cw; ++xx) ga->at(k, yy + y0, xx + x0) += g.at(k, yy, xx);
      }
    }
  });
}

Var sum_channels(Var a) {
  const Tensor& x = a.value();
  require_rank(x, 3, "sum_channels");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor y({h, w});
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) y[i] += x[k * hw + i];
  }
  return tape_of(a).record(std::move(y), {a}, [a, c, hw](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) (*ga)[k * hw + i] += g[i];
    }
  });
}

Var channel_mean(Var a) { return scale(sum_channels(a), 1.0 / a.value().dim(0)); }

Var broadcast_channels(Var a, int c) {
  const Tensor& x = a.value();
  require_rank(x, 2, "broadcast_channels");
  const int h = x.dim(0), w = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor y({c, h, w});
  for (int k = 0; k < c; ++k) std::copy_n(x.data(), hw, y.data() + k * hw);
  return tape_of(a).record(std::move(y), {a}, [a, c, hw](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) (*ga)[i] += g[k * hw + i];
    }
  });
}

Var spatial_sum(Var a) {
  const Tensor& x = a.value();
  require_rank(x, 3, "spatial_sum");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor y({c});
  for (int k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[k * hw + i];
    y[k] = s;
  }
  return tape_of(a).record(std::move(y), {a}, [a, c, hw](const Tensor& g, Tape& t) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (int k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) (*ga)[k * hw + i] += g[k];
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ValidationError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                          shape_string(bv.shape()));
  }
  Tensor y({m, n});
  for (int i = 0; i < m; ++i) {
    double* yr = y.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      const double* br = bv.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) yr[j] += aip * br[j];
    }
  }
  return tape_of(a).record(std::move(y), {a, b}, [a, b, m, k, n](const Tensor& g, Tape& t) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (Tensor* ga = t.grad_buffer(a)) {
      for (int i = 0; i < m; ++i) {
        const double* gr = g.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const double* br = bv.data() + static_cast<std::size_t>(p) * n;
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += gr[j] * br[j];
          (*ga)[static_cast<std::size_t>(i) * k + p] += s;
        }
      }
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (int i = 0; i < m; ++i) {
        const double* gr = g.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const double aip = av[static_cast<std::size_t>(i) * k + p];
          double* gbr = gb->data() + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) gbr[j] += aip * gr[j];
        }
      }
    }
  });
}

Var add_row_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "add_row_bias");
  const int m = xv.dim(0), n = xv.dim(1);
  if (b.value().rank() != 1 || b.value().dim(0) != n) throw ValidationError("add_row_bias: width mismatch");
  Tensor y = xv;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(i) * n + j] += b.value()[j];
  }
  return tape_of(x).record(std::move(y), {x, b}, [x, b, m, n](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(x), g);
    if (Tensor* gb = t.grad_buffer(b)) {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) (*gb)[j] += g[static_cast<std::size_t>(i) * n + j];
      }
    }
  });
}

Var linear(Var x, Var w, Var b) { return add_row_bias(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// spatial

Var conv2d(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 3, "conv2d");
  require_rank(wv, 4, "conv2d");
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co = wv.dim(0);
  if (wv.dim(1) != ci || wv.dim(2) != 3 || wv.dim(3) != 3) {
    throw ValidationError("conv2d: weight " + shape_string(wv.shape()) + " incompatible with input " +
                          shape_string(xv.shape()));
  }
  if (b.value().rank() != 1 || b.value().dim(0) != co) throw ValidationError("conv2d: bias width mismatch");
  const std::size_t hw = static_cast<std::size_t>(h) * wd;
  Tensor y({co, h, wd});
  for (int o = 0; o < co; ++o) {
    double* yo = y.data() + o * hw;
    const double bias = b.value()[o];
    for (std::size_t i = 0; i < hw; ++i) yo[i] = bias;
    for (int c = 0; c < ci; ++c) {
      const double* xc = xv.data() + c * hw;
      const double* wk = wv.data() + (static_cast<std::size_t>(o) * ci + c) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const double wt = wk[ky * 3 + kx];
          const int xlo = std::max(0, -dx), xhi = std::min(wd, wd - dx);
          for (int yy = ylo; yy < yhi; ++yy) {
            double* yr = yo + static_cast<std::size_t>(yy) * wd;
            const double* xr = xc + static_cast<std::size_t>(yy + dy) * wd + dx;
            for (int xx = xlo; xx < xhi; ++xx) yr[xx] += wt * xr[xx];
          }
        }
      }
    }
  }
  return tape_of(x).record(std::move(y), {x, w, b}, [x, w, b, ci, co, h, wd, hw](const Tensor& g, Tape& t) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    Tensor* gx = t.grad_buffer(x);
    Tensor* gw = t.grad_buffer(w);
    if (Tensor* gb = t.grad_buffer(b)) {
      for (int o = 0; o < co; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += g[o * hw + i];
        (*gb)[o] += s;
      }
    }
    if (!gx && !gw) return;
    for (int o = 0; o < co; ++o) {
      const double* go = g.data() + o * hw;
      for (int c = 0; c < ci; ++c) {
        const double* xc = xv.data() + c * hw;
        const std::size_t woff = (static_cast<std::size_t>(o) * ci + c) * 9;
        for (int ky = 0; ky < 3; ++ky) {
          const int dy = ky - 1;
          const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
          for (int kx = 0; kx < 3; ++kx) {
            const int dx = kx - 1;
            const int xlo = std::max(0, -dx), xhi = std::min(wd, wd - dx);
            const double wt = wv[woff + ky * 3 + kx];
            double acc = 0.0;
            for (int yy = ylo; yy < yhi; ++yy) {
              const double* gr = go + static_cast<std::size_t>(yy) * wd;
              const std::size_t xoff = static_cast<std::size_t>(yy + dy) * wd + dx;
              const double* xr = xc + xoff;
              if (gx) {
                double* gxr = gx->data() + c * hw + xoff;
                for (int xx = xlo; xx < xhi; ++xx) gxr[xx] += wt * gr[xx];
              }
              for (int xx = xlo; xx < xhi; ++xx) acc += gr[xx] * xr[xx];
            }
            if (gw) (*gw)[woff + ky * 3 + kx] += acc;
          }
        }
      }
    }
  });
}

Var add_channel_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "add_channel_bias");
  const int c = xv.dim(0);
  if (b.value().rank() != 1 || b.value().dim(0) != c) throw ValidationError("add_channel_bias: width mismatch");
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor y = xv;
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) y[k * hw + i] += b.value()[k];
  }
  return tape_of(x).record(std::move(y), {x, b}, [x, b, c, hw](const Tensor& g, Tape& t) {
    accumulate(t.grad_buffer(x), g);
    if (Tensor* gb = t.grad_buffer(b)) {
      for (int k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += g[k * hw + i];
        (*gb)[k] += s;
      }
    }
  });
}

Var avg_pool2(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "avg_pool2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h % 2 || w % 2) throw ValidationError("avg_pool2: odd spatial size");
  const int oh = h / 2, ow = w / 2;
  Tensor y({c, oh, ow});
  for (int k = 0; k < c; ++k) {
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        y.at(k, yy, xx) = 0.25 * (xv.at(k, 2 * yy, 2 * xx) + xv.at(k, 2 * yy, 2 * xx + 1) +
                                  xv.at(k, 2 * yy + 1, 2 * xx) + xv.at(k, 2 * yy + 1, 2 * xx + 1));
      }
    }
  }
  return tape_of(x).record(std::move(y), {x}, [x, c, oh, ow](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    if (!gx) return;
    for (int k = 0; k < c; ++k) {
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx) {
          const double v = 0.25 * g.at(k, yy, xx);
          gx->at(k, 2 * yy, 2 * xx) += v;
          gx->at(k, 2 * yy, 2 * xx + 1) += v;
          gx->at(k, 2 * yy + 1, 2 * xx) += v;
          gx->at(k, 2 * yy + 1, 2 * xx + 1) += v;
        }
      }
    }
  });
}

Var upsample2(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "upsample2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, 2 * h, 2 * w});
  for (int k = 0; k < c; ++k) {
    for (int yy = 0; yy < 2 * h; ++yy) {
      for (int xx = 0; xx < 2 * w; ++xx) y.at(k, yy, xx) = xv.at(k, yy / 2, xx / 2);
    }
  }
  return tape_of(x).record(std::move(y), {x}, [x, c, h, w](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    if (!gx) return;
    for (int k = 0; k < c; ++k) {
      for (int yy = 0; yy < 2 * h; ++yy) {
        for (int xx = 0; xx < 2 * w; ++xx) gx->at(k, yy / 2, xx / 2) += g.at(k, yy, xx);
      }
    }
  });
}

Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 3, "concat_channels");
  require_rank(bv, 3, "concat_channels");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) throw ValidationError("concat_channels: spatial mismatch");
  const int ca = av.dim(0), cb = bv.dim(0);
  Tensor y({ca + cb, av.dim(1), av.dim(2)});
  std::copy(av.values().begin(), av.values().end(), y.data());
  std::copy(bv.values().begin(), bv.values().end(), y.data() + av.size());
  const std::size_t na = av.size();
  return tape_of(a).record(std::move(y), {a, b}, [a, b, na](const Tensor& g, Tape& t) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[na + i];
    }
  });
}

Var to_tokens(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "to_tokens");
  const int c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  return transpose(reshape(x, {c, hw}));
}

Var from_tokens(Var tok, int h, int w) {
  const Tensor& tv = tok.value();
  require_rank(tv, 2, "from_tokens");
  if (tv.dim(0) != h * w) throw ValidationError("from_tokens: token count does not match spatial size");
  return reshape(transpose(tok), {tv.dim(1), h, w});
}

// ---------------------------------------------------------------------------
// attention

Var attention_probs(Var q, Var k, int heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  require_rank(qv, 2, "attention_probs");
  require_rank(kv, 2, "attention_probs");
  const int m = qv.dim(0), d = qv.dim(1), n = kv.dim(0);
  if (kv.dim(1) != d) throw ValidationError("attention_probs: query/key widths differ");
  if (heads < 1 || d % heads) throw ValidationError("attention_probs: width not divisible by heads");
  const int dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor p({heads, m, n});
  std::vector<double> s(static_cast<std::size_t>(n));
  for (int hh = 0; hh < heads; ++hh) {
    for (int i = 0; i < m; ++i) {
      const double* qr = qv.data() + static_cast<std::size_t>(i) * d + hh * dh;
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        const double* kr = kv.data() + static_cast<std::size_t>(j) * d + hh * dh;
        double acc = 0.0;
        for (int c = 0; c < dh; ++c) acc += qr[c] * kr[c];
        s[j] = acc * inv;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        s[j] = std::exp(s[j] - mx);
        z += s[j];
      }
      double* pr = p.data() + (static_cast<std::size_t>(hh) * m + i) * n;
      for (int j = 0; j < n; ++j) pr[j] = s[j] / z;
    }
  }
  return tape_of(q).record(std::move(p), {q, k}, [q, k, heads, m, n, d, dh, inv](const Tensor& g, Tape& t) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    // Probabilities are recomputed row by row rather than kept alive in the closure.
    Tensor* gq = t.grad_buffer(q);
    Tensor* gk = t.grad_buffer(k);
    std::vector<double> pr(static_cast<std::size_t>(n)), ds(static_cast<std::size_t>(n));
    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < m; ++i) {
        const double* qr = qv.data() + static_cast<std::size_t>(i) * d + hh * dh;
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          const double* kr = kv.data() + static_cast<std::size_t>(j) * d + hh * dh;
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += qr[c] * kr[c];
          pr[j] = acc * inv;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        const double* gr = g.data() + (static_cast<std::size_t>(hh) * m + i) * n;
        double dotp = 0.0;
        for (int j = 0; j < n; ++j) {
          pr[j] /= z;
          dotp += gr[j] * pr[j];
        }
        for (int j = 0; j < n; ++j) ds[j] = pr[j] * (gr[j] - dotp) * inv;
        for (int j = 0; j < n; ++j) {
          const double* kr = kv.data() + static_cast<std::size_t>(j) * d + hh * dh;
          if (gq) {
            double* gqr = gq->data() + static_cast<std::size_t>(i) * d + hh * dh;
            for (int c = 0; c < dh; ++c) gqr[c] += ds[j] * kr[c];
          }
          if (gk) {
            double* gkr = gk->data() + static_cast<std::size_t>(j) * d + hh * dh;
            for (int c = 0; c < dh; ++c) gkr[c] += ds[j] * qr[c];
          }
        }
      }
    }
  });
}

Var attention_apply(Var p, Var v) {
  const Tensor& pv = p.value();
  const Tensor& vv = v.value();
  require_rank(pv, 3, "attention_apply");
  require_rank(vv, 2, "attention_apply");
  const int heads = pv.dim(0), m = pv.dim(1), n = pv.dim(2), d = vv.dim(1);
  if (vv.dim(0) != n) throw ValidationError("attention_apply: token count mismatch");
  if (d % heads) throw ValidationError("attention_apply: width not divisible by heads");
  const int dh = d / heads;
  Tensor o({m, d});
  for (int hh = 0; hh < heads; ++hh) {
    for (int i = 0; i < m; ++i) {
      const double* pr = pv.data() + (static_cast<std::size_t>(hh) * m + i) * n;
      double* orow = o.data() + static_cast<std::size_t>(i) * d + hh * dh;
      for (int j = 0; j < n; ++j) {
        const double* vr = vv.data() + static_cast<std::size_t>(j) * d + hh * dh;
        for (int c = 0; c < dh; ++c) orow[c] += pr[j] * vr[c];
      }
    }
  }
  return tape_of(p).record(std::move(o), {p, v}, [p, v, heads, m, n, d, dh](const Tensor& g, Tape& t) {
    const Tensor& pv = t.value(p);
    const Tensor& vv = t.value(v);
    Tensor* gp = t.grad_buffer(p);
    Tensor* gv = t.grad_buffer(v);
    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < m; ++i) {
        const double* pr = pv.data() + (static_cast<std::size_t>(hh) * m + i) * n;
        const double* gr = g.data() + static_cast<std::size_t>(i) * d + hh * dh;
        for (int j = 0; j < n; ++j) {
          const double* vr = vv.data() + static_cast<std::size_t>(j) * d + hh * dh;
          if (gp) {
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += gr[c] * vr[c];
            (*gp)[(static_cast<std::size_t>(hh) * m + i) * n + j] += acc;
          }
          if (gv) {
            double* gvr = gv->data() + static_cast<std::size_t>(j) * d + hh * dh;
            for (int c = 0; c < dh; ++c) gvr[c] += pr[j] * gr[c];
          }
        }
      }
    }
  });
}

Var attention_map(Var p, int h, int w) {
  const Tensor& pv = p.value();
  require_rank(pv, 3, "attention_map");
  const int heads = pv.dim(0), m = pv.dim(1), n = pv.dim(2);
  if (m != h * w) throw ValidationError("attention_map: spatial size mismatch");
  Tensor a({n, h, w});
  const double inv = 1.0 / heads;
  for (int hh = 0; hh < heads; ++hh) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        a[static_cast<std::size_t>(j) * m + i] += inv * pv[(static_cast<std::size_t>(hh) * m + i) * n + j];
      }
    }
  }
  return tape_of(p).record(std::move(a), {p}, [p, heads, m, n, inv](const Tensor& g, Tape& t) {
    Tensor* gp = t.grad_buffer(p);
    if (!gp) return;
    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          (*gp)[(static_cast<std::size_t>(hh) * m + i) * n + j] += inv * g[static_cast<std::size_t>(j) * m + i];
        }
      }
    }
  });
}

}  // namespace pdiff
