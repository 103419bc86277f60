#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pdiff/tensor.hpp"

namespace pdiff {

// Named trainable arrays. Indices are stable for the lifetime of the set.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  std::size_t add(std::string name, Tensor value);
  std::size_t size() const { return entries_.size(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  std::size_t index_of(const std::string& name) const;
  std::size_t total_elements() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

// Per-parameter gradient buffers aligned with a ParameterSet.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterSet& params);

  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }

  void zero();
  void add(const Gradients& other, double scale = 1.0);
  double global_norm() const;
  void scale(double s);

 private:
  std::vector<Tensor> grads_;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Reverse-mode recording. One tape per forward pass; tapes are not shared
// between threads, parameters are only read during recording.
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value);  // leaf that receives a gradient
  Var parameter(const ParameterSet& params, std::size_t index);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of v, allocated on demand; nullptr when v needs no gradient.
  Tensor* grad_buffer(Var v);
  // Accumulated gradient after backward(); zeros if none reached v.
  Tensor grad(Var v) const;

  // Seeds d(root)/d(root) = 1 (root must be a scalar) and propagates.
  void backward(Var root, Gradients* param_grads = nullptr);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    long param_index = -1;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var mul_const(Var a, const Tensor& c);
Var add_const(Var a, const Tensor& c);
Var div_by(Var a, Var s);  // every element of a divided by scalar s
Var square(Var a);
Var sqrt(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var relu(Var a);

// ---- reductions ----
Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);
Var stack_scalars(const std::vector<Var>& scalars);
Var concat(Var a, Var b);  // rank-1 concatenation

// ---- shape / indexing ----
Var reshape(Var a, std::vector<int> shape);
Var transpose(Var a);                    // [m,n] -> [n,m]
Var select_row(Var a, int row);          // [n,D] -> [D]
Var replace_row(Var a, int row, Var r);  // [n,D] with row swapped for r
Var repeat_rows(Var v, int n);           // [D] -> [n,D]
Var crop(Var x, int x0, int y0, int x1, int y1);  // [C,H,W] -> [C,y1-y0,x1-x0]
Var channel_mean(Var x);                 // [C,H,W] -> [H,W]
Var broadcast_channels(Var x, int c);    // [H,W] -> [C,H,W]
Var sum_channels(Var x);                 // [C,H,W] -> [H,W]
Var spatial_sum(Var x);                  // [C,H,W] -> [C]

// ---- linear algebra ----
Var matmul(Var a, Var b);                // [m,k]x[k,n]
Var add_row_bias(Var x, Var b);          // [m,n] + [n]
Var linear(Var x, Var w, Var b);         // [m,in]x[in,out] + [out]

// ---- spatial ----
Var conv2d(Var x, Var w, Var b);         // [Ci,H,W], [Co,Ci,3,3], [Co]; same padding
Var add_channel_bias(Var x, Var b);      // [C,H,W] + [C]
Var avg_pool2(Var x);
Var upsample2(Var x);
Var concat_channels(Var a, Var b);
Var to_tokens(Var x);                    // [C,H,W] -> [HW,C]
Var from_tokens(Var t, int h, int w);    // [HW,C] -> [C,H,W]

// ---- attention ----
// Softmax(Q K^T / sqrt(d_head)) per head; returns [heads, M, n].
Var attention_probs(Var q, Var k, int heads);
// Probabilities [heads,M,n] applied to V [n,d] -> [M,d].
Var attention_apply(Var p, Var v);
// Head-averaged per-token spatial map [n,H,W] from [heads, H*W, n].
Var attention_map(Var p, int h, int w);

}  // namespace pdiff
