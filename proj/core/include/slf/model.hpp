#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "slf/data.hpp"
#include "slf/nn.hpp"
#include "slf/optim.hpp"
#include "slf/tape.hpp"

namespace slf {

// Architecture hyperparameters. P patches per image (perfect square, equal
// to the working image side), embedding dim d, H heads, N_v / N_l encoder
// layer counts, FFN width, survival-head width and the scalar-covariate dim.
struct ModelConfig {
  std::size_t patches = 64;          // P
  std::size_t embed_dim = 16;        // d
  std::size_t heads = 4;             // H
  std::size_t vision_layers = 2;     // N_v
  std::size_t sequence_layers = 2;   // N_l
  std::size_t ffn_dim = 32;          // d_ff
  std::size_t survival_hidden = 16;  // d_s
  std::size_t covariate_dim = 0;     // d_x
  std::size_t max_visits = 21;
  double dropout = 0.1;
  // Optional learnable positional embedding for the sequence encoder
  // (ablation knob; temporal order normally enters via the causal mask
  // alone).
  bool sequence_pos_embedding = false;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t patch_side() const;  // sqrt(P)
  std::size_t head_dim() const { return embed_dim / heads; }
};

// Every learnable tensor of the model, addressable by name and stored in a
// fixed creation order so flat views are stable.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool has(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t count() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& tensor(std::size_t i) const { return values_[i]; }
  Tensor& tensor(std::size_t i) { return values_[i]; }

  std::size_t total_size() const;
  // Offset of a named tensor inside the flat layout.
  std::size_t offset_of(const std::string& name) const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

// Glorot-uniform weights, N(0, 0.02^2) biases/CLS/positional embeddings,
// unit layer-norm gains; fully determined by config.seed.
ParameterStore init_parameters(const ModelConfig& config);

// All parameters bound to one tape as trainable leaves.
struct ModelVars {
  Var patch_proj;  // P x d
  Var cls_v;       // d
  Var pos_embed;   // (P+1) x d
  std::vector<EncoderLayerVars> vision;
  Var cls_l;  // d
  Var seq_pos_embed;  // (max_visits+1) x d, only when enabled
  std::vector<EncoderLayerVars> sequence;
  Var surv_w1, surv_b1, surv_w2, surv_b2;
};

ModelVars bind_parameters(Tape& tape, const ParameterStore& store,
                          const ModelConfig& config);

// Corner-aligned bilinear resampling.
Image bilinear_resize(const Image& image, std::size_t target_rows,
                      std::size_t target_cols);
inline Image bilinear_resize(const Image& image, std::size_t target_side) {
  return bilinear_resize(image, target_side, target_side);
}

// Splits an image into P square patches of sqrt(P) x sqrt(P) pixels each,
// resizing to P x P first when needed; row p is the row-major flattening of
// patch p, patches ordered row-major over the patch grid.
Tensor patchify(const Image& image, std::size_t patches);

// CLS_v + projected patches + positional embedding, through N_v unmasked
// encoder layers; returns the CLS_v row (1 x d).
Var vision_encode(Tape& tape, const Image& image, const ModelVars& vars,
                  const ModelConfig& config, DropoutCtx* dropout = nullptr);

// Image embeddings followed by CLS_l, through N_l causally masked encoder
// layers; returns the CLS_l (last) row.
Var sequence_encode(Tape& tape, std::span<const Var> embeddings,
                    const ModelVars& vars, const ModelConfig& config,
                    DropoutCtx* dropout = nullptr);

// One-hidden-layer GELU perceptron over [sequence embedding, covariates].
Var survival_head(Tape& tape, Var seq_embedding,
                  std::span<const double> covariates, const ModelVars& vars,
                  const ModelConfig& config);

// Full risk composition over the first landmark_visits images.
Var risk_score_node(Tape& tape, const ImageSequence& seq,
                    std::size_t landmark_visits, const ModelVars& vars,
                    const ModelConfig& config, DropoutCtx* dropout = nullptr);

// Convenience inference path (fresh tape, no dropout).
double risk_score(const ImageSequence& seq, std::size_t landmark_visits,
                  const ParameterStore& store, const ModelConfig& config);

// Named-gradient Adam update; every parameter must have a gradient entry.
void adam_step(ParameterStore& params,
               const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr);

// Versioned binary checkpoint ("SLF1": config block followed by named
// tensors); round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterStore& store);
struct Checkpoint {
  ModelConfig config;
  ParameterStore store;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace slf
