#include "growformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace growformer {

std::vector<std::int32_t> make_corpus_markov(std::size_t vocab,
                                             std::size_t length,
                                             std::uint64_t seed) {
  if (vocab < kReservedIds + 2) {
    throw std::invalid_argument(
        "make_corpus_markov: vocab must leave at least two content ids");
  }
  const std::size_t m = vocab - kReservedIds;
  SeededRng rng(seed);

  // Order-2 chain: each (a, b) context prefers three successors with fixed
  // weights, which gives the stream learnable structure.
  struct Row {
    std::int32_t s[3];
  };
  std::vector<Row> table(m * m);
  for (auto& row : table) {
    for (int j = 0; j < 3; ++j) {
      row.s[j] = static_cast<std::int32_t>(kReservedIds + rng.sample_index(m));
    }
  }

  std::vector<std::int32_t> stream;
  stream.reserve(length);
  std::int32_t a = static_cast<std::int32_t>(kReservedIds + rng.sample_index(m));
  std::int32_t b = static_cast<std::int32_t>(kReservedIds + rng.sample_index(m));
  for (std::size_t i = 0; i < length; ++i) {
    const Row& row = table[(a - kReservedIds) * m + (b - kReservedIds)];
    const double u = rng.uniform();
    std::int32_t next;
    if (u < 0.70) {
      next = row.s[0];
    } else if (u < 0.90) {
      next = row.s[1];
    } else if (u < 0.97) {
      next = row.s[2];
    } else {
      next = static_cast<std::int32_t>(kReservedIds + rng.sample_index(m));
    }
    stream.push_back(next);
    a = b;
    b = next;
  }
  return stream;
}

std::vector<std::int32_t> make_corpus_file(const std::filesystem::path& path,
                                           std::size_t vocab) {
  if (vocab < kReservedIds + 256) {
    throw std::invalid_argument(
        "make_corpus_file: vocab must be >= 260 for an injective byte map");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("make_corpus_file: cannot read " + path.string());
  }
  std::vector<std::int32_t> stream;
  char c;
  while (in.get(c)) {
    stream.push_back(static_cast<std::int32_t>(kReservedIds) +
                     static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  }
  return stream;
}

namespace {

Batch window_batch(const std::vector<std::int32_t>& stream, std::size_t offset,
                   std::size_t batch_size, std::size_t seq_len,
                   std::size_t extra) {
  if (seq_len < 2) throw std::invalid_argument("batch window shorter than 2");
  if (stream.size() < seq_len + extra) {
    throw std::invalid_argument("corpus shorter than one sequence window");
  }
  Batch batch;
  batch.batch = batch_size;
  batch.seq = seq_len;
  batch.ids.resize(batch_size * seq_len);
  batch.mask.assign(batch_size * seq_len, 1);
  batch.mlm_labels.assign(batch_size * seq_len, -1);
  batch.lm_targets.assign(batch_size * seq_len, -1);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t start = (offset + b * seq_len) % (stream.size() - seq_len - extra + 1);
    for (std::size_t s = 0; s < seq_len; ++s) {
      batch.ids[b * seq_len + s] = stream[start + s];
    }
    if (extra > 0) {
      for (std::size_t s = 0; s < seq_len; ++s) {
        batch.lm_targets[b * seq_len + s] = stream[start + s + 1];
      }
    }
  }
  return batch;
}

}  // namespace

Batch mask_batch(const std::vector<std::int32_t>& stream, std::size_t offset,
                 std::size_t batch_size, std::size_t seq_len,
                 std::size_t vocab, float mask_ratio, SeededRng& rng) {
  if (mask_ratio <= 0.0f || mask_ratio >= 1.0f) {
    throw std::invalid_argument("mask_batch: mask_ratio must be in (0, 1)");
  }
  Batch batch = window_batch(stream, offset, batch_size, seq_len, 0);
  const std::size_t n_labeled =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   static_cast<float>(seq_len) * mask_ratio));
  const std::size_t content = vocab - kReservedIds;
  std::vector<std::size_t> positions(seq_len);
  for (std::size_t b = 0; b < batch_size; ++b) {
    // Partial Fisher-Yates picks n_labeled distinct positions.
    for (std::size_t s = 0; s < seq_len; ++s) positions[s] = s;
    for (std::size_t i = 0; i < n_labeled; ++i) {
      const std::size_t j = i + rng.sample_index(seq_len - i);
      std::swap(positions[i], positions[j]);
      const std::size_t pos = b * seq_len + positions[i];
      if (batch.ids[pos] == kPadId) continue;  // never label padding
      batch.mlm_labels[pos] = batch.ids[pos];
      const double u = rng.uniform();
      if (u < 0.8) {
        batch.ids[pos] = kMaskId;
      } else if (u < 0.9) {
        batch.ids[pos] = static_cast<std::int32_t>(kReservedIds +
                                                   rng.sample_index(content));
      }  // else unchanged
    }
  }
  return batch;
}

Batch lm_batch(const std::vector<std::int32_t>& stream, std::size_t offset,
               std::size_t batch_size, std::size_t seq_len) {
  return window_batch(stream, offset, batch_size, seq_len, 1);
}

float lr_at(const TrainSchedule& schedule, std::size_t step,
            std::size_t total_steps) {
  const float peak = schedule.peak_lr;
  const std::size_t warmup = schedule.warmup_steps;
  if (warmup > 0 && step < warmup) {
    return peak * static_cast<float>(step) / static_cast<float>(warmup);
  }
  if (total_steps <= warmup) return peak;
  if (step >= total_steps) return 0.0f;
  return peak * static_cast<float>(total_steps - step) /
         static_cast<float>(total_steps - warmup);
}

AdamState AdamState::make(ParamSet& params) {
  AdamState state;
  for (const auto& ref : tensor_views(params)) {
    state.m.emplace_back(ref.size, 0.0f);
    state.v.emplace_back(ref.size, 0.0f);
    state.t.push_back(0);
  }
  return state;
}

void adam_step(ParamSet& params, ParamSet& grads, AdamState& state, float lr,
               const TrainSchedule& schedule,
               const std::set<std::string>& freeze) {
  auto p = tensor_views(params);
  auto g = tensor_views(grads);
  if (p.size() != g.size() || p.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: state shapes do not match params");
  }
  const float b1 = schedule.beta1;
  const float b2 = schedule.beta2;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].size != g[i].size || p[i].size != state.m[i].size()) {
      throw std::invalid_argument("adam_step: tensor size mismatch at " + p[i].name);
    }
    if (freeze.count(p[i].name)) continue;
    const std::size_t t = ++state.t[i];
    const float corr1 = 1.0f - std::pow(b1, static_cast<float>(t));
    const float corr2 = 1.0f - std::pow(b2, static_cast<float>(t));
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    float* param = p[i].data;
    const float* grad = g[i].data;
    for (std::size_t j = 0; j < p[i].size; ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * grad[j];
      v[j] = b2 * v[j] + (1.0f - b2) * grad[j] * grad[j];
      const float mhat = m[j] / corr1;
      const float vhat = v[j] / corr2;
      param[j] -= lr * mhat / (std::sqrt(vhat) + schedule.adam_eps);
    }
  }
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,stage,sub_depth,loss,lr,flops\n";
  out.precision(9);
  for (const auto& r : records) {
    out << r.step << ',' << r.stage << ',' << r.sub_depth << ',' << r.loss
        << ',' << r.lr << ',' << r.flops << '\n';
  }
  if (!out.good()) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::size_t> submodel_family(std::size_t total_layers,
                                         std::size_t layer_step) {
  if (layer_step < 1 || layer_step > total_layers) {
    throw std::invalid_argument("submodel_family: need 1 <= l_b <= L");
  }
  std::vector<std::size_t> family;
  for (std::size_t d = layer_step; d < total_layers; d += layer_step) {
    family.push_back(d);
  }
  family.push_back(total_layers);
  return family;
}

namespace {

double windowed_mean(const std::vector<double>& losses, std::size_t window) {
  const std::size_t w = std::min(std::max<std::size_t>(window, 1), losses.size());
  double sum = 0.0;
  for (std::size_t i = losses.size() - w; i < losses.size(); ++i) sum += losses[i];
  return sum / static_cast<double>(w);
}

}  // namespace

LossLog two_stage_train(const ModelConfig& cfg, ParamSet& params,
                        const TrainSchedule& schedule,
                        const std::vector<std::int32_t>& corpus) {
  cfg.validate();
  check_shapes(cfg, params);
  if (schedule.layer_step > cfg.layers) {
    throw std::invalid_argument("two_stage_train: l_b exceeds layer count");
  }
  if (schedule.submodel_epochs > schedule.epochs) {
    throw std::invalid_argument("two_stage_train: E_b exceeds E");
  }
  const std::size_t tokens_per_step = schedule.batch_size * schedule.seq_len;
  if (corpus.size() < tokens_per_step + 1) {
    throw std::invalid_argument("two_stage_train: corpus smaller than one batch");
  }
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, corpus.size() / tokens_per_step);
  std::size_t total_steps = schedule.epochs * steps_per_epoch;
  std::size_t stage1_steps = schedule.submodel_epochs * steps_per_epoch;
  if (schedule.max_steps > 0) {
    // Explicit step budget: keep the stage split proportional.
    stage1_steps = schedule.epochs == 0
                       ? 0
                       : schedule.max_steps * schedule.submodel_epochs / schedule.epochs;
    total_steps = schedule.max_steps;
  }

  const auto family = submodel_family(cfg.layers, schedule.layer_step);
  const bool encoder = cfg.variant == Variant::PostLnEncoder;

  // All tensor names, for building freeze sets.
  std::vector<std::string> all_names;
  for (const auto& ref : tensor_views(params)) all_names.push_back(ref.name);

  SeededRng rng(schedule.seed);
  AdamState adam = AdamState::make(params);
  LossLog log;
  std::vector<double> losses;
  double flops = 0.0;
  const std::size_t window_span = tokens_per_step + 1;

  for (std::size_t step = 0; step < total_steps; ++step) {
    const bool sub_stage = step < stage1_steps;
    const std::size_t offset = rng.sample_index(corpus.size() - window_span + 1);

    std::size_t depth = cfg.layers;
    std::set<std::string> freeze;
    if (sub_stage) {
      depth = family[rng.sample_index(family.size())];
      // Update only the top l_b layers of the sampled sub-model plus the
      // shared classification head; everything else is frozen this step.
      std::set<std::string> trainable;
      const std::size_t lo = depth > schedule.layer_step ? depth - schedule.layer_step : 0;
      for (std::size_t l = lo; l < depth; ++l) {
        for (const auto& name : layer_tensor_names(l)) trainable.insert(name);
      }
      trainable.insert("head");
      trainable.insert("head_bias");
      for (const auto& name : all_names) {
        if (!trainable.count(name)) freeze.insert(name);
      }
    }

    Batch batch = encoder ? mask_batch(corpus, offset, schedule.batch_size,
                                       schedule.seq_len, cfg.vocab,
                                       schedule.mask_ratio, rng)
                          : lm_batch(corpus, offset, schedule.batch_size,
                                     schedule.seq_len);

    BackwardOut bw = backward(cfg, params, batch, freeze, depth);
    if (!std::isfinite(bw.loss)) {
      throw std::runtime_error("two_stage_train: non-finite loss at step " +
                               std::to_string(step));
    }
    const float lr = lr_at(schedule, step, total_steps);
    adam_step(params, bw.grads, adam, lr, schedule, freeze);

    flops += 6.0 * static_cast<double>(param_count(cfg, depth)) *
             static_cast<double>(tokens_per_step);
    losses.push_back(bw.loss);
    log.records.push_back({step, sub_stage ? "sub" : "full", depth, bw.loss,
                           lr, flops});

    if (schedule.stop_loss > 0.0 && !sub_stage &&
        losses.size() >= schedule.stop_window &&
        windowed_mean(losses, schedule.stop_window) <= schedule.stop_loss) {
      break;
    }
  }
  return log;
}

std::size_t steps_to_threshold(const LossLog& log, double threshold,
                               std::size_t window) {
  if (log.records.empty()) {
    throw std::invalid_argument("steps_to_threshold: empty log");
  }
  // The window must be full before a crossing counts, otherwise one lucky
  // early batch reads as instant convergence.
  const std::size_t w =
      std::min(std::max<std::size_t>(window, 1), log.records.size());
  double sum = 0.0;
  std::vector<double> buf;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    buf.push_back(log.records[i].loss);
    sum += log.records[i].loss;
    if (buf.size() > w) {
      sum -= buf[buf.size() - w - 1];
    }
    if (buf.size() < w) continue;
    if (sum / static_cast<double>(w) <= threshold) {
      return log.records[i].step;
    }
  }
  return kNeverCrossed;
}

double corpus_eval_loss(const ModelConfig& cfg, const ParamSet& params,
                        const std::vector<std::int32_t>& corpus,
                        const TrainSchedule& schedule, std::size_t n_batches) {
  SeededRng rng(schedule.seed ^ 0x5eedba7c5ull);
  const bool encoder = cfg.variant == Variant::PostLnEncoder;
  const std::size_t window_span = schedule.batch_size * schedule.seq_len + 1;
  double sum = 0.0;
  for (std::size_t i = 0; i < n_batches; ++i) {
    const std::size_t offset = rng.sample_index(corpus.size() - window_span + 1);
    Batch batch = encoder ? mask_batch(corpus, offset, schedule.batch_size,
                                       schedule.seq_len, cfg.vocab,
                                       schedule.mask_ratio, rng)
                          : lm_batch(corpus, offset, schedule.batch_size,
                                     schedule.seq_len);
    sum += eval_loss(cfg, params, batch);
  }
  return sum / static_cast<double>(n_batches);
}

}  // namespace growformer
