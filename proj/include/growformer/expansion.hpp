// Width expansion (FPI / AKI), depth-wise stacking, the DirectCopy and
// random baselines, and a function-preservation verifier.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "growformer/numerics.hpp"
#include "growformer/transformer.hpp"

namespace growformer {

// Index map from target positions to source positions. Identity on the
// original range; new positions sampled uniformly with replacement, so every
// source index keeps count >= 1.
struct MappingFn {
  std::size_t d_src = 0;
  std::size_t d_tgt = 0;
  std::vector<std::size_t> map;     // length d_tgt, values in [0, d_src)
  std::vector<std::size_t> counts;  // length d_src, occurrence counts

  static MappingFn identity(std::size_t n);
  // Builds from an explicit map (recomputes counts, checks the invariants).
  static MappingFn from_map(std::size_t d_src, std::vector<std::size_t> map);
  // Expands each index into a contiguous block of `block` coordinates.
  MappingFn block_expand(std::size_t block) const;
  std::uint64_t digest() const;  // FNV-1a over the map array
};

MappingFn build_mapping(std::size_t d_src, std::size_t d_tgt, SeededRng& rng);

// In-dimension expansion: row i of the result is row g_in(i) of w divided by
// the occurrence count of g_in(i).
Matrix in_expand(const Matrix& w, const MappingFn& g_in);

// Out-dimension expansion: column j of the result is column g_out(j) of w.
Matrix out_expand(const Matrix& w, const MappingFn& g_out);

// The two-phase expansion operator: in_expand then out_expand.
Matrix expn(const Matrix& w, const MappingFn& g_in, const MappingFn& g_out);

// Bias expansion: out-dimension duplication only, no rescaling.
std::vector<float> expand_bias(const std::vector<float>& b,
                               const MappingFn& g_out);

enum class Strategy { Fpi, Aki, DirectCopy, Rand };
std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

// One hidden mapping serves embedding out, Q/K/V in, O out, FFN in/out and
// LayerNorm; its tail follows the sampled heads block-wise so per-head
// slicing stays aligned.
struct ExpansionPlan {
  Strategy strategy = Strategy::Fpi;
  std::uint64_t seed = 0;
  MappingFn head_map;    // a_src -> a_tgt
  MappingFn hidden_map;  // D_src -> D_tgt, block expansion of head_map
  MappingFn ffn_map;     // ffn_src -> ffn_tgt
};

struct SourceTargetPair {
  ModelConfig source;
  ModelConfig target;
};

// Throws on incompatible geometry (d_k must match, width grows by heads).
ExpansionPlan build_plan(const SourceTargetPair& pair, Strategy strategy,
                         std::uint64_t seed);

// Width expansion of every tensor; result has the source depth and the
// target width. Embedding rows (vocab axis) are never expanded.
ParamSet fpi_expand(const SourceTargetPair& pair, const ParamSet& source,
                    const ExpansionPlan& plan);

// AKI: appended output columns sample from the in-expanded matrix of the
// next layer up. Requires at least two source layers; the topmost layer
// falls back to FPI (it has no upper layer).
ParamSet aki_expand(const SourceTargetPair& pair, const ParamSet& source,
                    const ExpansionPlan& plan);

// Iteratively stacks the widened model bottom-up, filling the remainder with
// its top layers. Embedding and head are taken once.
ParamSet depth_stack(const ModelConfig& widened_cfg, const ParamSet& widened,
                     std::size_t target_layers);

// Source tensors in the top-left blocks (and bottom layers); everything else
// truncated normal, sigma = 0.02.
ParamSet direct_copy(const SourceTargetPair& pair, const ParamSet& source,
                     std::uint64_t seed);

// Truncated normal sigma = 0.02, zero biases, unit LayerNorm gains.
ParamSet rand_init(const ModelConfig& config, std::uint64_t seed);

// Applies the chosen strategy end to end: width expansion (or baseline),
// then depth stacking to the target layer count.
ParamSet expand_model(const SourceTargetPair& pair, const ParamSet& source,
                      Strategy strategy, std::uint64_t seed,
                      ExpansionPlan* plan_out = nullptr);

struct PreservationReport {
  double max_logit_gap = 0.0;
  double source_loss = 0.0;
  double target_loss = 0.0;
  double loss_gap = 0.0;
  bool pass = false;
};

// Runs n random batches through both models (same token streams) and
// reports the max absolute logit difference and the eval-loss difference.
PreservationReport verify_preservation(const ModelConfig& src_cfg,
                                       const ParamSet& src_params,
                                       const ModelConfig& tgt_cfg,
                                       const ParamSet& tgt_params,
                                       std::size_t n_inputs, double tol,
                                       std::uint64_t seed = 7);

// Structured text report: per-tensor shapes, mapping digests, verification
// gaps when available.
std::string expansion_report(const SourceTargetPair& pair,
                             const ExpansionPlan* plan,
                             Strategy strategy,
                             const PreservationReport* verification);

}  // namespace growformer
