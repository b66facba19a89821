#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "slf/model.hpp"
#include "slf/nn.hpp"

using namespace slf;
using slf::test::bitwise_equal;
using slf::test::random_tensor;
using slf::test::rel_err;

namespace {

using Grid = std::vector<std::vector<double>>;

Grid to_grid(const Tensor& t) {
  Grid g(t.rows(), std::vector<double>(t.cols(), 0.0));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) g[i][j] = t(i, j);
  return g;
}

Grid matmul_ref(const Grid& a, const Grid& b) {
  Grid out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j)
        out[i][j] += a[i][k] * b[k][j];
  return out;
}

// Plain-double single-call reference: per-head attention, concatenation,
// output projection. Independent of the tape machinery.
Grid mha_ref(const Grid& z, const std::vector<Grid>& wq,
             const std::vector<Grid>& wk, const std::vector<Grid>& wv,
             const Grid& wa, const BoolMask* mask) {
  const std::size_t n = z.size();
  const std::size_t heads = wq.size();
  const std::size_t dh = wq[0][0].size();
  Grid concat(n, std::vector<double>(heads * dh, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    Grid q = matmul_ref(z, wq[h]);
    Grid k = matmul_ref(z, wk[h]);
    Grid v = matmul_ref(z, wv[h]);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> scores(n, -1e300);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask && !mask->at(i, j)) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][c] * k[j][c];
        scores[j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, scores[j]);
      }
      double denom = 0.0;
      std::vector<double> w(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        if (mask && !mask->at(i, j)) continue;
        w[j] = std::exp(scores[j] - mx);
        denom += w[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double weight = w[j] / denom;
        for (std::size_t c = 0; c < dh; ++c)
          concat[i][h * dh + c] += weight * v[j][c];
      }
    }
  }
  return matmul_ref(concat, wa);
}

EncoderLayerVars bind_random_layer(Tape& tape, Rng& rng, std::size_t d,
                                   std::size_t heads, std::size_t dff,
                                   const std::string& prefix) {
  EncoderLayerVars v;
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + "h" + std::to_string(h);
    v.wq.push_back(tape.leaf(hp + ".wq", random_tensor(rng, {d, dh})));
    v.wk.push_back(tape.leaf(hp + ".wk", random_tensor(rng, {d, dh})));
    v.wv.push_back(tape.leaf(hp + ".wv", random_tensor(rng, {d, dh})));
  }
  v.attn_out = tape.leaf(prefix + ".wa", random_tensor(rng, {d, d}));
  v.ffn_w1 = tape.leaf(prefix + ".w1", random_tensor(rng, {d, dff}, -0.5, 0.5));
  v.ffn_b1 = tape.leaf(prefix + ".b1", random_tensor(rng, {dff}, -0.1, 0.1));
  v.ffn_w2 = tape.leaf(prefix + ".w2", random_tensor(rng, {dff, d}, -0.5, 0.5));
  v.ffn_b2 = tape.leaf(prefix + ".b2", random_tensor(rng, {d}, -0.1, 0.1));
  v.ln1_gain = tape.leaf(prefix + ".g1", Tensor::full({d}, 1.0));
  v.ln1_shift = tape.leaf(prefix + ".s1", Tensor({d}));
  v.ln2_gain = tape.leaf(prefix + ".g2", Tensor::full({d}, 1.0));
  v.ln2_shift = tape.leaf(prefix + ".s2", Tensor({d}));
  return v;
}

}  // namespace

TEST_CASE("make_causal_mask is lower triangular") {
  const BoolMask one = make_causal_mask(1);
  CHECK(one.at(0, 0));

  const BoolMask m = make_causal_mask(3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(m.at(i, j) == (j <= i));

  // Row sums count 1..n.
  const BoolMask big = make_causal_mask(7);
  for (std::size_t i = 0; i < 7; ++i) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < 7; ++j) row += big.at(i, j) ? 1 : 0;
    CHECK(row == i + 1);
  }
}

TEST_CASE("single-token attention is weightless") {
  Rng rng(5);
  Tape tape;
  EncoderLayerVars p = bind_random_layer(tape, rng, 4, 2, 8, "L");
  Tensor z = random_tensor(rng, {1, 4});
  Var out = multi_head_attention(tape, tape.input(z), p, nullptr);

  // Softmax over a single key is exactly 1, so the output reduces to the
  // concatenated value projections times the output matrix.
  Grid expect = mha_ref(to_grid(z), {to_grid(tape.value(p.wq[0])),
                                     to_grid(tape.value(p.wq[1]))},
                        {to_grid(tape.value(p.wk[0])),
                         to_grid(tape.value(p.wk[1]))},
                        {to_grid(tape.value(p.wv[0])),
                         to_grid(tape.value(p.wv[1]))},
                        to_grid(tape.value(p.attn_out)), nullptr);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(tape.value(out)(0, j) == doctest::Approx(expect[0][j]).epsilon(1e-12));
}

TEST_CASE("zero value projections give zero attention output") {
  Rng rng(6);
  Tape tape;
  EncoderLayerVars p = bind_random_layer(tape, rng, 4, 2, 8, "L");
  Tape zero_tape;
  EncoderLayerVars pz;
  const std::size_t d = 4, dh = 2;
  for (std::size_t h = 0; h < 2; ++h) {
    pz.wq.push_back(zero_tape.leaf("h" + std::to_string(h) + ".wq",
                                   random_tensor(rng, {d, dh})));
    pz.wk.push_back(zero_tape.leaf("h" + std::to_string(h) + ".wk",
                                   random_tensor(rng, {d, dh})));
    pz.wv.push_back(
        zero_tape.leaf("h" + std::to_string(h) + ".wv", Tensor({d, dh})));
  }
  pz.attn_out = zero_tape.leaf("wa", random_tensor(rng, {d, d}));
  Var out = multi_head_attention(
      zero_tape, zero_tape.input(random_tensor(rng, {3, 4})), pz, nullptr);
  for (std::size_t k = 0; k < zero_tape.value(out).size(); ++k)
    CHECK(zero_tape.value(out)[k] == 0.0);
}

TEST_CASE("multi-head attention matches the hand reference on 3x2 input") {
  Tape tape;
  EncoderLayerVars p;
  p.wq.push_back(tape.leaf("wq", Tensor::matrix(2, 2, {0.3, -0.2, 0.5, 0.7})));
  p.wk.push_back(tape.leaf("wk", Tensor::matrix(2, 2, {-0.1, 0.4, 0.2, -0.6})));
  p.wv.push_back(tape.leaf("wv", Tensor::matrix(2, 2, {0.8, 0.1, -0.3, 0.9})));
  p.attn_out = tape.leaf("wa", Tensor::matrix(2, 2, {1.0, -0.5, 0.25, 0.75}));

  Tensor z = Tensor::matrix(3, 2, {0.2, -1.0, 0.7, 0.3, -0.4, 0.5});
  Var out = multi_head_attention(tape, tape.input(z), p, nullptr);

  Grid expect =
      mha_ref(to_grid(z), {to_grid(tape.value(p.wq[0]))},
              {to_grid(tape.value(p.wk[0]))}, {to_grid(tape.value(p.wv[0]))},
              to_grid(tape.value(p.attn_out)), nullptr);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(std::abs(tape.value(out)(i, j) - expect[i][j]) < 1e-10);
}

TEST_CASE("attention weight rows are probability vectors") {
  Rng rng(11);
  const BoolMask mask = make_causal_mask(5);
  Tape tape;
  Tensor scores = random_tensor(rng, {5, 5}, -4.0, 4.0);
  const Tensor& w = tape.value(tape.masked_softmax(tape.input(scores), &mask));
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(w(i, j) >= 0.0);
      sum += w(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("equal rows attend uniformly over their unmasked support") {
  Tape tape;
  EncoderLayerVars p;
  Rng rng(13);
  p.wq.push_back(tape.leaf("wq", random_tensor(rng, {2, 2})));
  p.wk.push_back(tape.leaf("wk", random_tensor(rng, {2, 2})));
  p.wv.push_back(tape.leaf("wv", Tensor::matrix(2, 2, {1, 0, 0, 1})));
  p.attn_out = tape.leaf("wa", Tensor::matrix(2, 2, {1, 0, 0, 1}));

  // All rows identical: with identity V and output, row i of the masked
  // attention equals the input row regardless of support size, which is
  // only possible if the weights are uniform over the unmasked prefix.
  Tensor z = Tensor::matrix(3, 2, {0.4, -0.2, 0.4, -0.2, 0.4, -0.2});
  const BoolMask mask = make_causal_mask(3);
  Var out = multi_head_attention(tape, tape.input(z), p, &mask);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(tape.value(out)(i, 0) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(tape.value(out)(i, 1) == doctest::Approx(-0.2).epsilon(1e-12));
  }
}

TEST_CASE("encoder layer keeps the input shape") {
  Rng rng(17);
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{2, 4},
                      std::pair<std::size_t, std::size_t>{65, 8}}) {
    Tape tape;
    EncoderLayerVars p = bind_random_layer(tape, rng, d, 2, 2 * d, "L");
    Var out =
        encoder_layer_forward(tape, tape.input(random_tensor(rng, {n, d})), p,
                              nullptr);
    CHECK(tape.value(out).rows() == n);
    CHECK(tape.value(out).cols() == d);
  }
}

TEST_CASE("zero FFN collapses the second block to LN(O_r)") {
  Rng rng(19);
  Tape tape;
  const std::size_t d = 4;
  EncoderLayerVars p = bind_random_layer(tape, rng, d, 2, 8, "L");
  // Zero the FFN weights and biases: FFN(O_r) == 0, so the layer output is
  // LayerNorm(O_r + 0).
  Tape t2;
  EncoderLayerVars pz;
  for (std::size_t h = 0; h < 2; ++h) {
    const std::string hp = "h" + std::to_string(h);
    pz.wq.push_back(t2.leaf(hp + ".wq", tape.value(p.wq[h])));
    pz.wk.push_back(t2.leaf(hp + ".wk", tape.value(p.wk[h])));
    pz.wv.push_back(t2.leaf(hp + ".wv", tape.value(p.wv[h])));
  }
  pz.attn_out = t2.leaf("wa", tape.value(p.attn_out));
  pz.ffn_w1 = t2.leaf("w1", Tensor({d, 8}));
  pz.ffn_b1 = t2.leaf("b1", Tensor({8}));
  pz.ffn_w2 = t2.leaf("w2", Tensor({8, d}));
  pz.ffn_b2 = t2.leaf("b2", Tensor({d}));
  pz.ln1_gain = t2.leaf("g1", Tensor::full({d}, 1.0));
  pz.ln1_shift = t2.leaf("s1", Tensor({d}));
  pz.ln2_gain = t2.leaf("g2", Tensor::full({d}, 1.0));
  pz.ln2_shift = t2.leaf("s2", Tensor({d}));

  Tensor z = random_tensor(rng, {3, d});
  Var out = encoder_layer_forward(t2, t2.input(z), pz, nullptr);

  Var attended = multi_head_attention(t2, t2.input(z), pz, nullptr);
  Var o_r = t2.layer_norm(t2.add(t2.input(z), attended), pz.ln1_gain,
                          pz.ln1_shift);
  Var expect = t2.layer_norm(o_r, pz.ln2_gain, pz.ln2_shift);
  for (std::size_t k = 0; k < t2.value(out).size(); ++k)
    CHECK(t2.value(out)[k] ==
          doctest::Approx(t2.value(expect)[k]).epsilon(1e-12));
}

TEST_CASE("causal mask blocks information flow from later rows") {
  Rng rng(23);
  const std::size_t n = 4, d = 4;
  const BoolMask mask = make_causal_mask(n);
  Tensor z = random_tensor(rng, {n, d});

  auto layer_output = [&](const Tensor& input) {
    Tape tape;
    Rng wrng(23);  // identical weights every call
    EncoderLayerVars p = bind_random_layer(tape, wrng, d, 2, 8, "L");
    Var out = encoder_layer_forward(tape, tape.input(input), p, &mask);
    return tape.value(out);
  };

  const Tensor base = layer_output(z);
  for (std::size_t perturb = 1; perturb < n; ++perturb) {
    Tensor z2 = z;
    for (std::size_t j = 0; j < d; ++j) z2(perturb, j) += 0.37 + double(j);
    const Tensor changed = layer_output(z2);
    // Rows strictly before the perturbed row are bitwise unchanged.
    for (std::size_t i = 0; i < perturb; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double a = base(i, j), b = changed(i, j);
        CHECK(std::memcmp(&a, &b, sizeof a) == 0);
      }
    // The perturbed row itself must change.
    double delta = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      delta += std::abs(base(perturb, j) - changed(perturb, j));
    CHECK(delta > 0.0);
  }
}

TEST_CASE("causality via finite differences: d(out row j)/d(in row k) = 0 for k > j") {
  Rng rng(29);
  const std::size_t n = 3, d = 4;
  const BoolMask mask = make_causal_mask(n);
  Tensor z = random_tensor(rng, {n, d});

  auto row_component = [&](const Tensor& input, std::size_t r) {
    Tape tape;
    Rng wrng(29);
    EncoderLayerVars p = bind_random_layer(tape, wrng, d, 2, 8, "L");
    Var out = encoder_layer_forward(tape, tape.input(input), p, &mask);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += tape.value(out)(r, j);
    return s;
  };

  const double h = 1e-5;
  for (std::size_t out_row = 0; out_row < n; ++out_row)
    for (std::size_t in_row = out_row + 1; in_row < n; ++in_row)
      for (std::size_t j = 0; j < d; ++j) {
        Tensor up = z, down = z;
        up(in_row, j) += h;
        down(in_row, j) -= h;
        const double fd =
            (row_component(up, out_row) - row_component(down, out_row)) /
            (2.0 * h);
        CHECK(std::abs(fd) < 1e-9);
      }
}

TEST_CASE("permutation equivariance without mask") {
  Rng rng(31);
  const std::size_t n = 4, d = 4;
  Tensor z = random_tensor(rng, {n, d});
  const std::vector<std::size_t> perm{2, 0, 3, 1};

  auto layer_output = [&](const Tensor& input) {
    Tape tape;
    Rng wrng(31);
    EncoderLayerVars p = bind_random_layer(tape, wrng, d, 2, 8, "L");
    Var out = encoder_layer_forward(tape, tape.input(input), p, nullptr);
    return tape.value(out);
  };

  Tensor permuted({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) permuted(i, j) = z(perm[i], j);

  const Tensor base = layer_output(z);
  const Tensor shuffled = layer_output(permuted);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(shuffled(i, j) ==
            doctest::Approx(base(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("head count must divide the embedding dim at construction") {
  ModelConfig cfg;
  cfg.patches = 16;
  cfg.embed_dim = 6;
  cfg.heads = 4;  // 4 does not divide 6
  CHECK_THROWS_AS(cfg.validate(), InputError);
  CHECK_THROWS_AS((void)init_parameters(cfg), InputError);
}
