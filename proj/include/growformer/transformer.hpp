// Minimal deterministic transformer runtime: post-LN encoder with an MLM
// head and pre-LN decoder with a causal LM head, plus a hand-coded backward
// pass. No dropout anywhere; forward is bitwise reproducible.
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "growformer/numerics.hpp"

namespace growformer {

enum class Variant { PostLnEncoder, PreLnDecoder };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::PostLnEncoder;
  std::size_t layers = 2;    // L
  std::size_t hidden = 64;   // D
  std::size_t heads = 2;     // a
  std::size_t head_dim = 32; // d_k
  std::size_t ffn = 128;     // inner FFN size
  std::size_t vocab = 32;
  std::size_t max_seq = 64;

  void validate() const;  // throws std::invalid_argument on bad geometry
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  // Attention projections, D x D. Columns (wq/wk/wv) and rows (wo) are laid
  // out as `heads` contiguous blocks of head_dim, so per-head slices are
  // clean sub-blocks.
  Matrix wq, wk, wv, wo;
  std::vector<float> bq, bk, bv, bo;
  Matrix w1, w2;  // D x ffn, ffn x D
  std::vector<float> b1, b2;
  std::vector<float> ln1_gain, ln1_bias;  // after MHA (post-LN) / before MHA (pre-LN)
  std::vector<float> ln2_gain, ln2_bias;  // after FFN (post-LN) / before FFN (pre-LN)
};

struct ParamSet {
  Matrix tok_emb;  // vocab x D
  Matrix pos_emb;  // max_seq x D
  std::vector<float> emb_ln_gain, emb_ln_bias;      // post-LN variant
  std::vector<LayerParams> layers;
  std::vector<float> final_ln_gain, final_ln_bias;  // pre-LN variant
  Matrix head;     // D x vocab (untied; see README)
  std::vector<float> head_bias;  // vocab
};

// Allocates zero-filled tensors with shapes fixed by the config.
ParamSet make_param_set(const ModelConfig& config);

// Throws if any tensor shape disagrees with the config.
void check_shapes(const ModelConfig& config, const ParamSet& params);

std::size_t param_count(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config, std::size_t depth);

// Uniform named view over every tensor, in a fixed order. Gradients and
// optimizer state reuse the same naming.
struct TensorRef {
  std::string name;
  float* data;
  std::size_t size;
};
std::vector<TensorRef> tensor_views(ParamSet& params);

// Names of tensors belonging to transformer layer `layer` (for freeze sets).
std::vector<std::string> layer_tensor_names(std::size_t layer);

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;         // batch x seq
  std::vector<std::uint8_t> mask;        // batch x seq, 1 = attend
  std::vector<std::int32_t> mlm_labels;  // batch x seq, -1 = unlabeled
  std::vector<std::int32_t> lm_targets;  // batch x seq, -1 = no target

  std::int32_t id(std::size_t b, std::size_t s) const { return ids[b * seq + s]; }
};

constexpr std::size_t kFullDepth = std::numeric_limits<std::size_t>::max();

struct ForwardOut {
  Matrix logits;  // (batch*seq) x vocab
  Matrix hidden;  // (batch*seq) x D, the representation fed to the head
};

// Runs the bottom `depth` layers (full model by default) and the head. The
// decoder variant applies a causal mask on top of the padding mask.
ForwardOut forward(const ModelConfig& config, const ParamSet& params,
                   const Batch& batch, std::size_t depth = kFullDepth);

// Mean cross-entropy over masked positions only. Throws if none are labeled.
double mlm_loss(const Matrix& logits, const Batch& batch);

// Mean next-token cross-entropy over all targeted positions.
double lm_loss(const Matrix& logits, const Batch& batch);

// Variant-appropriate loss (MLM for the encoder, LM for the decoder).
double eval_loss(const ModelConfig& config, const ParamSet& params,
                 const Batch& batch, std::size_t depth = kFullDepth);

struct BackwardOut {
  double loss = 0.0;
  ParamSet grads;  // same shape family as ParamSet
};

// Exact gradients of the variant loss w.r.t. every parameter. Tensors named
// in `freeze` receive exactly zero gradient. `loss_scale` multiplies the
// loss (and therefore every gradient).
BackwardOut backward(const ModelConfig& config, const ParamSet& params,
                     const Batch& batch,
                     const std::set<std::string>& freeze = {},
                     std::size_t depth = kFullDepth, float loss_scale = 1.0f);

// Attention probabilities of the first sequence in the batch, one seq x seq
// matrix per (layer, head).
std::vector<std::vector<Matrix>> attention_maps(const ModelConfig& config,
                                                const ParamSet& params,
                                                const Batch& batch);

// CSV dump of attention_maps: header `layer,head,row,col,value`.
void dump_attention(const ModelConfig& config, const ParamSet& params,
                    const Batch& batch, const std::filesystem::path& out_path);

}  // namespace growformer
