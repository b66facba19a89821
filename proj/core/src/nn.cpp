#include "slf/nn.hpp"

#include <cmath>

namespace slf {

BoolMask make_causal_mask(std::size_t n) {
  if (n < 1) throw InputError("make_causal_mask: n must be >= 1");
  BoolMask m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

Var multi_head_attention(Tape& tape, Var z, const EncoderLayerVars& p,
                         const BoolMask* mask) {
  const std::size_t heads = p.wq.size();
  if (heads == 0 || p.wk.size() != heads || p.wv.size() != heads)
    throw ShapeError("multi_head_attention: inconsistent head count");
  const std::size_t head_dim = tape.value(p.wq[0]).cols();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<Var> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = tape.matmul(z, p.wq[h]);
    Var k = tape.matmul(z, p.wk[h]);
    Var v = tape.matmul(z, p.wv[h]);
    Var scores = tape.scale(tape.matmul_nt(q, k), inv_sqrt_dh);
    Var weights = tape.masked_softmax(scores, mask);
    head_outputs.push_back(tape.matmul(weights, v));
  }
  Var concat = head_outputs.size() == 1 ? head_outputs[0]
                                        : tape.concat_cols(head_outputs);
  return tape.matmul(concat, p.attn_out);
}

Var encoder_layer_forward(Tape& tape, Var z, const EncoderLayerVars& p,
                          const BoolMask* mask, DropoutCtx* dropout) {
  Var attended = multi_head_attention(tape, z, p, mask);
  Var o_r = tape.layer_norm(tape.add(z, attended), p.ln1_gain, p.ln1_shift);

  Var hidden =
      tape.gelu(tape.add_row_broadcast(tape.matmul(o_r, p.ffn_w1), p.ffn_b1));
  Var ffn = tape.add_row_broadcast(tape.matmul(hidden, p.ffn_w2), p.ffn_b2);
  if (dropout && dropout->active) {
    const Tensor& fv = tape.value(ffn);
    ffn = tape.dropout(ffn, dropout->next_mask(fv.rows(), fv.cols()),
                       1.0 - dropout->rate);
  }
  return tape.layer_norm(tape.add(o_r, ffn), p.ln2_gain, p.ln2_shift);
}

}  // namespace slf
