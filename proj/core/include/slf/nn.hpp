#pragma once

#include <cstdint>
#include <vector>

#include "slf/tape.hpp"

namespace slf {

// One transformer encoder layer's parameters, bound to a tape as trainable
// leaves. Per-head projections are kept separate (wq[h], wk[h], wv[h], each
// d x d_h with d_h = d/H), followed by the d x d output projection, the
// position-wise FFN (d -> d_ff -> d with GELU) and two layer-norm
// gain/shift pairs.
struct EncoderLayerVars {
  std::vector<Var> wq, wk, wv;  // one per head
  Var attn_out;
  Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Var ln1_gain, ln1_shift, ln2_gain, ln2_shift;
};

// Deterministic per-forward dropout source. Masks are drawn in layer order,
// so rebuilding the same forward pass with the same seed reproduces them
// bit for bit (required for gradient checks against finite differences).
struct DropoutCtx {
  Rng rng;
  double rate = 0.0;
  bool active = false;

  DropoutCtx() : rng(0) {}
  DropoutCtx(std::uint64_t seed, double drop_rate)
      : rng(seed), rate(drop_rate), active(drop_rate > 0.0) {}

  Tensor next_mask(std::size_t rows, std::size_t cols) {
    Tensor m({rows, cols});
    for (std::size_t i = 0; i < m.size(); ++i)
      m[i] = rng.unit() >= rate ? 1.0 : 0.0;
    return m;
  }
};

// Lower-triangular attention mask: (i,j) allowed iff j <= i.
BoolMask make_causal_mask(std::size_t n);

// Scaled dot-product multi-head self-attention over row-token input
// z (n x d): head_h = softmax(Q_h K_h^T / sqrt(d_h)) V_h with optional
// masking, heads concatenated along the feature axis and projected by the
// output matrix.
Var multi_head_attention(Tape& tape, Var z, const EncoderLayerVars& p,
                         const BoolMask* mask);

// Post-norm encoder layer:
//   O_r = LayerNorm(z + MultiHead(z))
//   O   = LayerNorm(O_r + FFN(O_r)),  FFN(x) = GELU(x W1 + b1) W2 + b2
// Dropout (when ctx is active) applies to the FFN output only.
Var encoder_layer_forward(Tape& tape, Var z, const EncoderLayerVars& p,
                          const BoolMask* mask, DropoutCtx* dropout = nullptr);

}  // namespace slf
