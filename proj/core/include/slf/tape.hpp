#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slf/tensor.hpp"

namespace slf {

// Boolean attention mask; entry (i,j) == true means position i may attend
// to position j.
struct BoolMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> on;

  BoolMask() = default;
  BoolMask(std::size_t r, std::size_t c)
      : rows(r), cols(c), on(r * c, std::uint8_t{0}) {}

  bool at(std::size_t r, std::size_t c) const { return on[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) {
    on[r * cols + c] = v ? 1 : 0;
  }
};

// Handle into a Tape; cheap to copy.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Dynamic reverse-mode tape. A tape is built fresh for every forward pass
// and confined to one thread. Nodes are appended in topological order, so
// the reverse sweep is a simple backward iteration.
//
// Every op validates its output for NaN/Inf and throws NumericError on the
// first non-finite value; divergent computations fail fast instead of
// propagating garbage.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kInput,
    kMatMul,
    kMatMulNT,
    kTranspose,
    kAdd,
    kMul,
    kScale,
    kAddRowBroadcast,
    kGelu,
    kMaskedSoftmax,
    kLayerNorm,
    kConcatRows,
    kConcatCols,
    kRowRange,
    kSum,
    kDropout,
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    int c = -1;                // layer_norm shift
    std::vector<int> many;     // concat parents
    Tensor value;
    Tensor grad;               // allocated on first touch during backward
    Tensor aux;                // op-specific cache (dropout mask, LN stats)
    std::optional<BoolMask> mask;
    double factor = 1.0;       // scale / dropout keep-scale
    std::size_t row0 = 0;      // row_range offset
    std::string name;          // leaf parameter name
  };

  // Trainable leaf. Each parameter name may appear at most once per tape.
  Var leaf(const std::string& name, const Tensor& value);
  // Non-trainable input (data); receives no gradient entry.
  Var input(Tensor value);

  Var matmul(Var a, Var b);
  // a * b^T without materializing the transpose.
  Var matmul_nt(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double factor);
  // rows(a) x cols(a) plus a length-cols(a) bias added to every row.
  Var add_row_broadcast(Var a, Var bias);
  // Exact-erf GELU: x * Phi(x).
  Var gelu(Var a);
  // Row-stable softmax; masked entries are exactly zero. mask == nullptr
  // means no masking. Each row must keep at least one unmasked entry.
  Var masked_softmax(Var scores, const BoolMask* mask);
  // Per-row mean-0/var-1 normalization (eps = 1e-5) followed by an affine
  // gain/shift, both of length cols(x).
  Var layer_norm(Var x, Var gain, Var shift);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  Var row_range(Var a, std::size_t row0, std::size_t count);
  Var row(Var a, std::size_t r) { return row_range(a, r, 1); }
  Var sum(Var a);
  // Inverted dropout with a caller-supplied 0/1 keep mask.
  Var dropout(Var a, Tensor keep_mask, double keep_prob);

  const Tensor& value(Var v) const { return node(v).value; }
  double scalar_value(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }

  // Reverse accumulation from a scalar root. Fills per-node gradients;
  // leaves that do not influence the root end up with zero gradients.
  void backward(Var root);

  // Gradient of the last backward() per trainable leaf, zero tensors for
  // unreached leaves.
  std::map<std::string, Tensor> gradient_map() const;
  // Visits trainable leaves in creation order.
  void for_each_leaf_gradient(
      const std::function<void(const std::string&, const Tensor&)>& fn) const;
  const Tensor& grad(Var v) const;

 private:
  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.idx)); }
  const Node& node(Var v) const {
    return nodes_.at(static_cast<std::size_t>(v.idx));
  }
  Var push(Node n, const char* opname);
  Tensor& touch_grad(int idx);

  std::vector<Node> nodes_;
  std::vector<int> leaves_;  // indices of trainable leaves, creation order
  std::map<std::string, int> leaf_names_;
  Tensor zero_cache_;
};

}  // namespace slf
