#include "slf/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace slf {

namespace {

bool is_perfect_square(std::size_t n, std::size_t& root) {
  root = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));
  return root * root == n;
}

std::string layer_prefix(const char* stack, std::size_t layer) {
  return std::string(stack) + ".layer" + std::to_string(layer) + ".";
}

}  // namespace

void ModelConfig::validate() const {
  std::size_t root = 0;
  if (!is_perfect_square(patches, root))
    throw InputError("ModelConfig: patches must be a perfect square");
  if (heads == 0 || embed_dim % heads != 0)
    throw InputError("ModelConfig: head count must divide embedding dim");
  if (vision_layers < 1 || sequence_layers < 1)
    throw InputError("ModelConfig: encoder stacks need at least one layer");
  if (embed_dim < 2)
    throw InputError("ModelConfig: embedding dim must be >= 2");
  if (ffn_dim < 1 || survival_hidden < 1 || max_visits < 1)
    throw InputError("ModelConfig: widths must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw InputError("ModelConfig: dropout must be in [0,1)");
}

std::size_t ModelConfig::patch_side() const {
  std::size_t root = 0;
  is_perfect_square(patches, root);
  return root;
}

void ParameterStore::add(const std::string& name, Tensor value) {
  if (index_.count(name))
    throw InputError("ParameterStore: duplicate parameter '" + name + "'");
  index_[name] = names_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

bool ParameterStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw InputError("ParameterStore: unknown parameter '" + name + "'");
  return values_[it->second];
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw InputError("ParameterStore: unknown parameter '" + name + "'");
  return values_[it->second];
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

std::size_t ParameterStore::offset_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw InputError("ParameterStore: unknown parameter '" + name + "'");
  std::size_t off = 0;
  for (std::size_t i = 0; i < it->second; ++i) off += values_[i].size();
  return off;
}

std::vector<double> ParameterStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const Tensor& t : values_)
    flat.insert(flat.end(), t.data(), t.data() + t.size());
  return flat;
}

void ParameterStore::unflatten(std::span<const double> flat) {
  if (flat.size() != total_size())
    throw ShapeError("ParameterStore: flat size mismatch");
  std::size_t off = 0;
  for (Tensor& t : values_) {
    std::memcpy(t.data(), flat.data() + off, t.size() * sizeof(double));
    off += t.size();
  }
}

namespace {

Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out,
              std::vector<std::size_t> shape) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = rng.uniform(-bound, bound);
  return t;
}

Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double sd = 0.02) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, sd);
  return t;
}

void init_encoder_layer(ParameterStore& store, Rng& rng,
                        const std::string& prefix, const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim, dh = cfg.head_dim(), dff = cfg.ffn_dim;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = prefix + "head" + std::to_string(h) + ".";
    store.add(hp + "wq", glorot(rng, d, dh, {d, dh}));
    store.add(hp + "wk", glorot(rng, d, dh, {d, dh}));
    store.add(hp + "wv", glorot(rng, d, dh, {d, dh}));
  }
  store.add(prefix + "attn_out", glorot(rng, d, d, {d, d}));
  store.add(prefix + "ffn_w1", glorot(rng, d, dff, {d, dff}));
  store.add(prefix + "ffn_b1", gaussian(rng, {dff}));
  store.add(prefix + "ffn_w2", glorot(rng, dff, d, {dff, d}));
  store.add(prefix + "ffn_b2", gaussian(rng, {d}));
  store.add(prefix + "ln1_gain", Tensor::full({d}, 1.0));
  store.add(prefix + "ln1_shift", Tensor({d}));
  store.add(prefix + "ln2_gain", Tensor::full({d}, 1.0));
  store.add(prefix + "ln2_shift", Tensor({d}));
}

}  // namespace

ParameterStore init_parameters(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ParameterStore store;
  const std::size_t d = cfg.embed_dim;

  store.add("vision.patch_proj", glorot(rng, cfg.patches, d, {cfg.patches, d}));
  store.add("vision.cls", gaussian(rng, {d}));
  store.add("vision.pos_embed", gaussian(rng, {cfg.patches + 1, d}));
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    init_encoder_layer(store, rng, layer_prefix("vision", l), cfg);

  store.add("seq.cls", gaussian(rng, {d}));
  if (cfg.sequence_pos_embedding)
    store.add("seq.pos_embed", gaussian(rng, {cfg.max_visits + 1, d}));
  for (std::size_t l = 0; l < cfg.sequence_layers; ++l)
    init_encoder_layer(store, rng, layer_prefix("seq", l), cfg);

  const std::size_t din = d + cfg.covariate_dim;
  store.add("surv.w1", glorot(rng, din, cfg.survival_hidden,
                              {din, cfg.survival_hidden}));
  store.add("surv.b1", gaussian(rng, {cfg.survival_hidden}));
  store.add("surv.w2", glorot(rng, cfg.survival_hidden, 1,
                              {cfg.survival_hidden, 1}));
  store.add("surv.b2", gaussian(rng, {1}));
  return store;
}

namespace {

EncoderLayerVars bind_encoder_layer(Tape& tape, const ParameterStore& store,
                                    const std::string& prefix,
                                    const ModelConfig& cfg) {
  EncoderLayerVars v;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::string hp = prefix + "head" + std::to_string(h) + ".";
    v.wq.push_back(tape.leaf(hp + "wq", store.at(hp + "wq")));
    v.wk.push_back(tape.leaf(hp + "wk", store.at(hp + "wk")));
    v.wv.push_back(tape.leaf(hp + "wv", store.at(hp + "wv")));
  }
  v.attn_out = tape.leaf(prefix + "attn_out", store.at(prefix + "attn_out"));
  v.ffn_w1 = tape.leaf(prefix + "ffn_w1", store.at(prefix + "ffn_w1"));
  v.ffn_b1 = tape.leaf(prefix + "ffn_b1", store.at(prefix + "ffn_b1"));
  v.ffn_w2 = tape.leaf(prefix + "ffn_w2", store.at(prefix + "ffn_w2"));
  v.ffn_b2 = tape.leaf(prefix + "ffn_b2", store.at(prefix + "ffn_b2"));
  v.ln1_gain = tape.leaf(prefix + "ln1_gain", store.at(prefix + "ln1_gain"));
  v.ln1_shift = tape.leaf(prefix + "ln1_shift", store.at(prefix + "ln1_shift"));
  v.ln2_gain = tape.leaf(prefix + "ln2_gain", store.at(prefix + "ln2_gain"));
  v.ln2_shift = tape.leaf(prefix + "ln2_shift", store.at(prefix + "ln2_shift"));
  return v;
}

}  // namespace

ModelVars bind_parameters(Tape& tape, const ParameterStore& store,
                          const ModelConfig& cfg) {
  ModelVars mv;
  mv.patch_proj = tape.leaf("vision.patch_proj", store.at("vision.patch_proj"));
  mv.cls_v = tape.leaf("vision.cls", store.at("vision.cls"));
  mv.pos_embed = tape.leaf("vision.pos_embed", store.at("vision.pos_embed"));
  for (std::size_t l = 0; l < cfg.vision_layers; ++l)
    mv.vision.push_back(
        bind_encoder_layer(tape, store, layer_prefix("vision", l), cfg));
  mv.cls_l = tape.leaf("seq.cls", store.at("seq.cls"));
  if (cfg.sequence_pos_embedding)
    mv.seq_pos_embed = tape.leaf("seq.pos_embed", store.at("seq.pos_embed"));
  for (std::size_t l = 0; l < cfg.sequence_layers; ++l)
    mv.sequence.push_back(
        bind_encoder_layer(tape, store, layer_prefix("seq", l), cfg));
  mv.surv_w1 = tape.leaf("surv.w1", store.at("surv.w1"));
  mv.surv_b1 = tape.leaf("surv.b1", store.at("surv.b1"));
  mv.surv_w2 = tape.leaf("surv.w2", store.at("surv.w2"));
  mv.surv_b2 = tape.leaf("surv.b2", store.at("surv.b2"));
  return mv;
}

Image bilinear_resize(const Image& image, std::size_t target_rows,
                      std::size_t target_cols) {
  const std::size_t sr = image.rows(), sc = image.cols();
  if (sr == 0 || sc == 0) throw InputError("bilinear_resize: empty image");
  if (target_rows < 2 || target_cols < 2)
    throw InputError("bilinear_resize: target sides must be >= 2");
  if (sr == target_rows && sc == target_cols) return image;

  // Corner-aligned sampling: output corner pixels coincide with input
  // corner pixels.
  Image out({target_rows, target_cols});
  const double rstep =
      sr > 1 ? static_cast<double>(sr - 1) / static_cast<double>(target_rows - 1)
             : 0.0;
  const double cstep =
      sc > 1 ? static_cast<double>(sc - 1) / static_cast<double>(target_cols - 1)
             : 0.0;
  for (std::size_t i = 0; i < target_rows; ++i) {
    const double y = static_cast<double>(i) * rstep;
    const std::size_t y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, sr - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < target_cols; ++j) {
      const double x = static_cast<double>(j) * cstep;
      const std::size_t x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, sc - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = image(y0, x0) * (1.0 - fx) + image(y0, x1) * fx;
      const double bot = image(y1, x0) * (1.0 - fx) + image(y1, x1) * fx;
      out(i, j) = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

Tensor patchify(const Image& image, std::size_t patches) {
  if (image.size() == 0) throw InputError("patchify: empty image");
  std::size_t side = 0;
  if (!is_perfect_square(patches, side))
    throw InputError("patchify: patch count must be a perfect square");
  // P patches of sqrt(P) x sqrt(P) pixels require a P x P working image.
  const Image* work = &image;
  Image resized;
  if (image.rows() != patches || image.cols() != patches) {
    resized = bilinear_resize(image, patches);
    work = &resized;
  }
  Tensor out({patches, patches});
  const std::size_t ps = side;  // patch side in pixels, = side of patch grid
  for (std::size_t pr = 0; pr < ps; ++pr)
    for (std::size_t pc = 0; pc < ps; ++pc) {
      const std::size_t p = pr * ps + pc;
      std::size_t k = 0;
      for (std::size_t i = 0; i < ps; ++i)
        for (std::size_t j = 0; j < ps; ++j, ++k)
          out(p, k) = (*work)(pr * ps + i, pc * ps + j);
    }
  return out;
}

Var vision_encode(Tape& tape, const Image& image, const ModelVars& vars,
                  const ModelConfig& cfg, DropoutCtx* dropout) {
  Var patch_tokens = tape.matmul(tape.input(patchify(image, cfg.patches)),
                                 vars.patch_proj);
  const Var parts[] = {vars.cls_v, patch_tokens};
  Var z = tape.add(tape.concat_rows(parts), vars.pos_embed);
  for (const EncoderLayerVars& layer : vars.vision)
    z = encoder_layer_forward(tape, z, layer, nullptr, dropout);
  return tape.row(z, 0);
}

Var sequence_encode(Tape& tape, std::span<const Var> embeddings,
                    const ModelVars& vars, const ModelConfig& cfg,
                    DropoutCtx* dropout) {
  if (embeddings.empty())
    throw InputError("sequence_encode: empty embedding sequence");
  if (embeddings.size() > cfg.max_visits)
    throw InputError("sequence_encode: sequence exceeds configured maximum");
  std::vector<Var> rows(embeddings.begin(), embeddings.end());
  rows.push_back(vars.cls_l);
  Var z = tape.concat_rows(rows);
  if (cfg.sequence_pos_embedding) {
    // CLS_l sits at the end, so it takes the positional row after the
    // last visit actually present.
    Var pe = tape.row_range(vars.seq_pos_embed, 0, rows.size());
    z = tape.add(z, pe);
  }
  const BoolMask mask = make_causal_mask(rows.size());
  for (const EncoderLayerVars& layer : vars.sequence)
    z = encoder_layer_forward(tape, z, layer, &mask, dropout);
  return tape.row(z, rows.size() - 1);
}

Var survival_head(Tape& tape, Var seq_embedding,
                  std::span<const double> covariates, const ModelVars& vars,
                  const ModelConfig& cfg) {
  if (covariates.size() != cfg.covariate_dim)
    throw InputError("survival_head: covariate length mismatch");
  Var features = seq_embedding;
  if (cfg.covariate_dim > 0) {
    Tensor x({1, cfg.covariate_dim});
    for (std::size_t i = 0; i < covariates.size(); ++i) x[i] = covariates[i];
    const Var parts[] = {seq_embedding, tape.input(std::move(x))};
    features = tape.concat_cols(parts);
  }
  Var hidden = tape.gelu(tape.add_row_broadcast(
      tape.matmul(features, vars.surv_w1), vars.surv_b1));
  return tape.add_row_broadcast(tape.matmul(hidden, vars.surv_w2),
                                vars.surv_b2);
}

Var risk_score_node(Tape& tape, const ImageSequence& seq,
                    std::size_t landmark_visits, const ModelVars& vars,
                    const ModelConfig& cfg, DropoutCtx* dropout) {
  if (landmark_visits == 0 || landmark_visits > seq.images.size())
    throw InputError("risk_score: landmark visit count exceeds available images");
  std::vector<Var> embeddings;
  embeddings.reserve(landmark_visits);
  for (std::size_t j = 0; j < landmark_visits; ++j)
    embeddings.push_back(
        vision_encode(tape, seq.images[j], vars, cfg, dropout));
  Var seq_embedding = sequence_encode(tape, embeddings, vars, cfg, dropout);
  return survival_head(tape, seq_embedding, seq.covariates, vars, cfg);
}

double risk_score(const ImageSequence& seq, std::size_t landmark_visits,
                  const ParameterStore& store, const ModelConfig& cfg) {
  Tape tape;
  ModelVars vars = bind_parameters(tape, store, cfg);
  Var r = risk_score_node(tape, seq, landmark_visits, vars, cfg, nullptr);
  return tape.scalar_value(r);
}

void adam_step(ParameterStore& params,
               const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr) {
  const std::size_t n = params.total_size();
  if (state.m.empty() && state.step == 0) state = AdamState(n);
  std::vector<double> flat = params.flatten();
  std::vector<double> grad_flat(n, 0.0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor& p = params.tensor(i);
    auto it = grads.find(params.name(i));
    if (it == grads.end())
      throw InputError("adam_step: missing gradient for parameter '" +
                       params.name(i) + "'");
    if (!it->second.same_shape(p))
      throw ShapeError("adam_step: gradient shape mismatch for '" +
                       params.name(i) + "'");
    std::memcpy(grad_flat.data() + off, it->second.data(),
                p.size() * sizeof(double));
    off += p.size();
  }
  slf::adam_step(std::span<double>(flat), std::span<const double>(grad_flat),
                 state, lr);
  params.unflatten(flat);
}

// --- checkpoint container -------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'L', 'F', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(cfg.patches));
  put(out, static_cast<std::uint32_t>(cfg.embed_dim));
  put(out, static_cast<std::uint32_t>(cfg.heads));
  put(out, static_cast<std::uint32_t>(cfg.vision_layers));
  put(out, static_cast<std::uint32_t>(cfg.sequence_layers));
  put(out, static_cast<std::uint32_t>(cfg.ffn_dim));
  put(out, static_cast<std::uint32_t>(cfg.survival_hidden));
  put(out, static_cast<std::uint32_t>(cfg.covariate_dim));
  put(out, static_cast<std::uint32_t>(cfg.max_visits));
  put(out, cfg.dropout);
  put(out, static_cast<std::uint8_t>(cfg.sequence_pos_embedding ? 1 : 0));
  put(out, cfg.seed);
  put(out, static_cast<std::uint32_t>(store.count()));
  for (std::size_t i = 0; i < store.count(); ++i) {
    const std::string& name = store.name(i);
    const Tensor& t = store.tensor(i);
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
      put(out, static_cast<std::uint32_t>(t.dim(d)));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw InputError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw InputError("bad checkpoint magic in " + path);
  if (get<std::uint32_t>(in) != kVersion)
    throw InputError("unsupported checkpoint version in " + path);

  Checkpoint ck;
  ck.config.patches = get<std::uint32_t>(in);
  ck.config.embed_dim = get<std::uint32_t>(in);
  ck.config.heads = get<std::uint32_t>(in);
  ck.config.vision_layers = get<std::uint32_t>(in);
  ck.config.sequence_layers = get<std::uint32_t>(in);
  ck.config.ffn_dim = get<std::uint32_t>(in);
  ck.config.survival_hidden = get<std::uint32_t>(in);
  ck.config.covariate_dim = get<std::uint32_t>(in);
  ck.config.max_visits = get<std::uint32_t>(in);
  ck.config.dropout = get<double>(in);
  ck.config.sequence_pos_embedding = get<std::uint8_t>(in) != 0;
  ck.config.seed = get<std::uint64_t>(in);

  const std::uint32_t count = get<std::uint32_t>(in);
  if (!in || count > 1u << 20)
    throw InputError("corrupt checkpoint header: " + path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get<std::uint32_t>(in);
    if (!in || name_len == 0 || name_len > 4096)
      throw InputError("corrupt tensor name in checkpoint: " + path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = get<std::uint32_t>(in);
    if (!in || rank == 0 || rank > 8)
      throw InputError("corrupt tensor rank in checkpoint: " + path);
    std::vector<std::size_t> shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(get<std::uint32_t>(in));
    if (!in) throw InputError("truncated checkpoint: " + path);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw InputError("truncated checkpoint: " + path);
    ck.store.add(name, std::move(t));
  }

  // Shape-consistency check against a skeleton built from the config.
  ParameterStore expected = init_parameters(ck.config);
  if (expected.count() != ck.store.count())
    throw InputError("checkpoint parameter set incomplete: " + path);
  for (std::size_t i = 0; i < expected.count(); ++i) {
    if (!ck.store.has(expected.name(i)) ||
        !ck.store.at(expected.name(i)).same_shape(expected.tensor(i)))
      throw InputError("checkpoint shape mismatch for '" + expected.name(i) +
                       "' in " + path);
  }
  return ck;
}

}  // namespace slf
