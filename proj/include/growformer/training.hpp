// Desk-scale pre-training: corpus synthesis, MLM/LM batching, Adam with
// warmup + linear decay, and the two-stage schedule (sub-model training
// followed by full-model training).
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "growformer/numerics.hpp"
#include "growformer/transformer.hpp"

namespace growformer {

// Reserved token ids at the bottom of every vocabulary.
constexpr std::int32_t kPadId = 0;
constexpr std::int32_t kMaskId = 1;
constexpr std::int32_t kClsId = 2;
constexpr std::int32_t kSepId = 3;
constexpr std::size_t kReservedIds = 4;

struct TrainSchedule {
  float peak_lr = 1e-4f;
  std::size_t warmup_steps = 100;
  std::size_t epochs = 10;            // E
  std::size_t submodel_epochs = 0;    // E_b
  std::size_t layer_step = 1;         // l_b
  std::size_t batch_size = 32;
  std::size_t seq_len = 32;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float mask_ratio = 0.15f;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;     // 0 = epochs decide; otherwise a hard cap
  double stop_loss = 0.0;        // > 0: stop once windowed loss crosses it
  std::size_t stop_window = 50;  // smoothing window for the stop rule
};

// Deterministic order-2 Markov stream over the content ids [4, vocab).
std::vector<std::int32_t> make_corpus_markov(std::size_t vocab,
                                             std::size_t length,
                                             std::uint64_t seed);

// Byte-level file corpus: id = 4 + byte (requires vocab >= 260).
std::vector<std::int32_t> make_corpus_file(const std::filesystem::path& path,
                                           std::size_t vocab);

// MLM batch: of the selected positions, 80% become MASK, 10% a random id,
// 10% stay unchanged; original ids are recorded as labels.
Batch mask_batch(const std::vector<std::int32_t>& stream, std::size_t offset,
                 std::size_t batch_size, std::size_t seq_len,
                 std::size_t vocab, float mask_ratio, SeededRng& rng);

// Causal-LM batch: target at each position is the next stream token.
Batch lm_batch(const std::vector<std::int32_t>& stream, std::size_t offset,
               std::size_t batch_size, std::size_t seq_len);

// Linear warmup to peak_lr, then linear decay to zero at total_steps.
float lr_at(const TrainSchedule& schedule, std::size_t step,
            std::size_t total_steps);

struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::vector<std::size_t> t;  // per-tensor step count (frozen tensors hold)

  static AdamState make(ParamSet& params);
};

// Bias-corrected Adam. Tensors named in `freeze` are untouched, including
// their moment state.
void adam_step(ParamSet& params, ParamSet& grads, AdamState& state, float lr,
               const TrainSchedule& schedule,
               const std::set<std::string>& freeze = {});

struct LossRecord {
  std::size_t step;
  std::string stage;  // "sub" or "full"
  std::size_t sub_depth;
  double loss;
  float lr;
  double flops;  // cumulative analytic estimate
};

struct LossLog {
  std::vector<LossRecord> records;
  void write_csv(const std::filesystem::path& path) const;
};

// Sub-model layer counts {l_b, 2*l_b, ..., L}; the final entry always closes
// the gap to the full depth.
std::vector<std::size_t> submodel_family(std::size_t total_layers,
                                         std::size_t layer_step);

// Algorithm-2 style training: for the first E_b epochs each step samples a
// sub-model and updates only its top l_b layers plus the shared head; the
// remaining epochs train the full model. Throws on NaN loss.
LossLog two_stage_train(const ModelConfig& config, ParamSet& params,
                        const TrainSchedule& schedule,
                        const std::vector<std::int32_t>& corpus);

constexpr std::size_t kNeverCrossed = std::numeric_limits<std::size_t>::max();

// First step whose trailing moving-average loss is <= threshold.
std::size_t steps_to_threshold(const LossLog& log, double threshold,
                               std::size_t window);

// Mean eval loss over the first n_batches windows of the corpus (no
// optimizer state touched).
double corpus_eval_loss(const ModelConfig& config, const ParamSet& params,
                        const std::vector<std::int32_t>& corpus,
                        const TrainSchedule& schedule, std::size_t n_batches);

}  // namespace growformer
