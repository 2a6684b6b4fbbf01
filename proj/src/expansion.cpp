#include "growformer/expansion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace growformer {

MappingFn MappingFn::identity(std::size_t n) {
  MappingFn g;
  g.d_src = g.d_tgt = n;
  g.map.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.map[i] = i;
  g.counts.assign(n, 1);
  return g;
}

MappingFn MappingFn::from_map(std::size_t d_src, std::vector<std::size_t> map) {
  MappingFn g;
  g.d_src = d_src;
  g.d_tgt = map.size();
  g.map = std::move(map);
  if (g.d_tgt < d_src) {
    throw std::invalid_argument("mapping shorter than source dimension");
  }
  g.counts.assign(d_src, 0);
  for (std::size_t i = 0; i < g.d_tgt; ++i) {
    if (g.map[i] >= d_src) throw std::invalid_argument("mapping index out of range");
    if (i < d_src && g.map[i] != i) {
      throw std::invalid_argument("mapping must be identity on the source prefix");
    }
    ++g.counts[g.map[i]];
  }
  return g;
}

MappingFn MappingFn::block_expand(std::size_t block) const {
  std::vector<std::size_t> expanded(d_tgt * block);
  for (std::size_t i = 0; i < d_tgt; ++i) {
    for (std::size_t b = 0; b < block; ++b) {
      expanded[i * block + b] = map[i] * block + b;
    }
  }
  return MappingFn::from_map(d_src * block, std::move(expanded));
}

std::uint64_t MappingFn::digest() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const std::size_t v : map) {
    h ^= static_cast<std::uint64_t>(v);
    h *= 1099511628211ull;
  }
  return h;
}

MappingFn build_mapping(std::size_t d_src, std::size_t d_tgt, SeededRng& rng) {
  if (d_src > d_tgt) {
    throw std::invalid_argument("build_mapping: d_src must not exceed d_tgt");
  }
  std::vector<std::size_t> map(d_tgt);
  for (std::size_t i = 0; i < d_src; ++i) map[i] = i;
  for (std::size_t i = d_src; i < d_tgt; ++i) map[i] = rng.sample_index(d_src);
  return MappingFn::from_map(d_src, std::move(map));
}

Matrix in_expand(const Matrix& w, const MappingFn& g_in) {
  if (g_in.d_src != w.rows) {
    throw std::invalid_argument("in_expand: mapping does not match row count");
  }
  Matrix u(g_in.d_tgt, w.cols);
  for (std::size_t i = 0; i < g_in.d_tgt; ++i) {
    const std::size_t src = g_in.map[i];
    const float inv = 1.0f / static_cast<float>(g_in.counts[src]);
    const float* from = w.row(src);
    float* to = u.row(i);
    for (std::size_t c = 0; c < w.cols; ++c) to[c] = from[c] * inv;
  }
  return u;
}

Matrix out_expand(const Matrix& w, const MappingFn& g_out) {
  if (g_out.d_src != w.cols) {
    throw std::invalid_argument("out_expand: mapping does not match column count");
  }
  Matrix u(w.rows, g_out.d_tgt);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const float* from = w.row(r);
    float* to = u.row(r);
    for (std::size_t j = 0; j < g_out.d_tgt; ++j) to[j] = from[g_out.map[j]];
  }
  return u;
}

Matrix expn(const Matrix& w, const MappingFn& g_in, const MappingFn& g_out) {
  return out_expand(in_expand(w, g_in), g_out);
}

std::vector<float> expand_bias(const std::vector<float>& b,
                               const MappingFn& g_out) {
  if (g_out.d_src != b.size()) {
    throw std::invalid_argument("expand_bias: mapping does not match length");
  }
  std::vector<float> out(g_out.d_tgt);
  for (std::size_t j = 0; j < g_out.d_tgt; ++j) out[j] = b[g_out.map[j]];
  return out;
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Fpi: return "fpi";
    case Strategy::Aki: return "aki";
    case Strategy::DirectCopy: return "directcopy";
    case Strategy::Rand: return "scratch";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "fpi") return Strategy::Fpi;
  if (name == "aki") return Strategy::Aki;
  if (name == "directcopy") return Strategy::DirectCopy;
  if (name == "scratch" || name == "rand") return Strategy::Rand;
  throw std::invalid_argument("unknown strategy: " + name);
}

namespace {

void check_pair(const SourceTargetPair& pair) {
  pair.source.validate();
  pair.target.validate();
  if (pair.source.variant != pair.target.variant) {
    throw std::invalid_argument("expansion: variants differ");
  }
  if (pair.source.vocab != pair.target.vocab ||
      pair.source.max_seq != pair.target.max_seq) {
    throw std::invalid_argument("expansion: vocab/max_seq must match");
  }
  if (pair.source.layers > pair.target.layers ||
      pair.source.hidden > pair.target.hidden ||
      pair.source.ffn > pair.target.ffn) {
    throw std::invalid_argument("expansion: target must be at least source-sized");
  }
}

}  // namespace

ExpansionPlan build_plan(const SourceTargetPair& pair, Strategy strategy,
                         std::uint64_t seed) {
  check_pair(pair);
  if (pair.source.head_dim != pair.target.head_dim) {
    throw std::invalid_argument(
        "build_plan: head_dim must stay fixed; width grows by adding heads");
  }
  if (pair.source.heads > pair.target.heads) {
    throw std::invalid_argument("build_plan: target has fewer heads than source");
  }
  ExpansionPlan plan;
  plan.strategy = strategy;
  plan.seed = seed;
  SeededRng rng(seed);
  plan.head_map = build_mapping(pair.source.heads, pair.target.heads, rng);
  plan.hidden_map = plan.head_map.block_expand(pair.source.head_dim);
  plan.ffn_map = build_mapping(pair.source.ffn, pair.target.ffn, rng);
  return plan;
}

namespace {

// Shared parts of FPI and AKI: embedding, biases and LayerNorm parameters
// always follow the FPI (current layer) rule.
void expand_common(const SourceTargetPair& pair, const ParamSet& src,
                   const ExpansionPlan& plan, ParamSet& dst) {
  const MappingFn& hid = plan.hidden_map;
  const MappingFn head_blocks = plan.head_map.block_expand(pair.source.head_dim);

  dst.tok_emb = out_expand(src.tok_emb, hid);
  dst.pos_emb = out_expand(src.pos_emb, hid);
  dst.emb_ln_gain = expand_bias(src.emb_ln_gain, hid);
  dst.emb_ln_bias = expand_bias(src.emb_ln_bias, hid);
  dst.final_ln_gain = expand_bias(src.final_ln_gain, hid);
  dst.final_ln_bias = expand_bias(src.final_ln_bias, hid);
  // The head consumes the widened hidden states, so its in-dimension is
  // expanded with 1/C rescaling; the vocab axis is never expanded.
  dst.head = in_expand(src.head, hid);
  dst.head_bias = src.head_bias;

  dst.layers.resize(src.layers.size());
  for (std::size_t l = 0; l < src.layers.size(); ++l) {
    const LayerParams& s = src.layers[l];
    LayerParams& t = dst.layers[l];
    t.bq = expand_bias(s.bq, head_blocks);
    t.bk = expand_bias(s.bk, head_blocks);
    t.bv = expand_bias(s.bv, head_blocks);
    t.bo = expand_bias(s.bo, hid);
    t.b1 = expand_bias(s.b1, plan.ffn_map);
    t.b2 = expand_bias(s.b2, hid);
    t.ln1_gain = expand_bias(s.ln1_gain, hid);
    t.ln1_bias = expand_bias(s.ln1_bias, hid);
    t.ln2_gain = expand_bias(s.ln2_gain, hid);
    t.ln2_bias = expand_bias(s.ln2_bias, hid);
  }
}

void fpi_layer_matrices(const LayerParams& s, LayerParams& t,
                        const ExpansionPlan& plan, std::size_t head_dim) {
  const MappingFn& hid = plan.hidden_map;
  const MappingFn head_blocks = plan.head_map.block_expand(head_dim);
  t.wq = expn(s.wq, hid, head_blocks);
  t.wk = expn(s.wk, hid, head_blocks);
  t.wv = expn(s.wv, hid, head_blocks);
  t.wo = expn(s.wo, head_blocks, hid);
  t.w1 = expn(s.w1, hid, plan.ffn_map);
  t.w2 = expn(s.w2, plan.ffn_map, hid);
}

// Eq-style column splice: the widened current-layer matrix keeps all of its
// original output columns; appended columns sample from the widened
// upper-layer matrix through g_out_upper.
Matrix aki_splice(const Matrix& cur, const Matrix& upper,
                  const MappingFn& g_in, const MappingFn& g_out_upper) {
  const Matrix widened_cur = in_expand(cur, g_in);
  const Matrix widened_upper = in_expand(upper, g_in);
  const std::size_t d_out_src = cur.cols;
  const std::size_t d_out_tgt = g_out_upper.d_tgt;
  Matrix u(widened_cur.rows, d_out_tgt);
  for (std::size_t r = 0; r < u.rows; ++r) {
    const float* c = widened_cur.row(r);
    const float* up = widened_upper.row(r);
    float* to = u.row(r);
    for (std::size_t j = 0; j < d_out_src; ++j) to[j] = c[j];
    for (std::size_t j = d_out_src; j < d_out_tgt; ++j) {
      to[j] = up[g_out_upper.map[j]];
    }
  }
  return u;
}

}  // namespace

ParamSet fpi_expand(const SourceTargetPair& pair, const ParamSet& source,
                    const ExpansionPlan& plan) {
  check_pair(pair);
  check_shapes(pair.source, source);
  ParamSet out;
  expand_common(pair, source, plan, out);
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    fpi_layer_matrices(source.layers[l], out.layers[l], plan,
                       pair.source.head_dim);
  }
  ModelConfig widened = pair.target;
  widened.layers = pair.source.layers;
  check_shapes(widened, out);
  return out;
}

ParamSet aki_expand(const SourceTargetPair& pair, const ParamSet& source,
                    const ExpansionPlan& plan) {
  check_pair(pair);
  check_shapes(pair.source, source);
  if (pair.source.layers < 2) {
    throw std::invalid_argument("aki_expand: needs at least two source layers");
  }
  ParamSet out;
  expand_common(pair, source, plan, out);

  const MappingFn& hid = plan.hidden_map;
  const MappingFn head_blocks = plan.head_map.block_expand(pair.source.head_dim);
  const std::size_t top = source.layers.size() - 1;
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    const LayerParams& s = source.layers[l];
    LayerParams& t = out.layers[l];
    if (l == top) {
      // No upper layer to draw from: FPI fallback.
      fpi_layer_matrices(s, t, plan, pair.source.head_dim);
      continue;
    }
    const LayerParams& up = source.layers[l + 1];
    // Independent per-layer out-mappings for the appended columns.
    SeededRng layer_rng(plan.seed ^ (0x9e3779b97f4a7c15ull * (l + 1)));
    const MappingFn aki_heads =
        build_mapping(pair.source.heads, pair.target.heads, layer_rng)
            .block_expand(pair.source.head_dim);
    const MappingFn aki_hid =
        build_mapping(pair.source.hidden, pair.target.hidden, layer_rng);
    const MappingFn aki_ffn =
        build_mapping(pair.source.ffn, pair.target.ffn, layer_rng);

    t.wq = aki_splice(s.wq, up.wq, hid, aki_heads);
    t.wk = aki_splice(s.wk, up.wk, hid, aki_heads);
    t.wv = aki_splice(s.wv, up.wv, hid, aki_heads);
    t.wo = aki_splice(s.wo, up.wo, head_blocks, aki_hid);
    t.w1 = aki_splice(s.w1, up.w1, hid, aki_ffn);
    t.w2 = aki_splice(s.w2, up.w2, plan.ffn_map, aki_hid);
  }
  ModelConfig widened = pair.target;
  widened.layers = pair.source.layers;
  check_shapes(widened, out);
  return out;
}

ParamSet depth_stack(const ModelConfig& widened_cfg, const ParamSet& widened,
                     std::size_t target_layers) {
  check_shapes(widened_cfg, widened);
  const std::size_t ls = widened_cfg.layers;
  if (ls > target_layers) {
    throw std::invalid_argument("depth_stack: target depth below source depth");
  }
  ParamSet out = widened;
  out.layers.clear();
  const std::size_t k = target_layers / ls;
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t l = 0; l < ls; ++l) out.layers.push_back(widened.layers[l]);
  }
  const std::size_t remainder = target_layers - k * ls;
  for (std::size_t l = ls - remainder; l < ls; ++l) {
    out.layers.push_back(widened.layers[l]);
  }
  return out;
}

ParamSet rand_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet p = make_param_set(cfg);
  SeededRng rng(seed);
  auto fill = [&](Matrix& m) {
    for (float& v : m.data) v = rng.truncated_normal(0.02f);
  };
  fill(p.tok_emb);
  fill(p.pos_emb);
  std::fill(p.emb_ln_gain.begin(), p.emb_ln_gain.end(), 1.0f);
  for (auto& lp : p.layers) {
    fill(lp.wq);
    fill(lp.wk);
    fill(lp.wv);
    fill(lp.wo);
    fill(lp.w1);
    fill(lp.w2);
    std::fill(lp.ln1_gain.begin(), lp.ln1_gain.end(), 1.0f);
    std::fill(lp.ln2_gain.begin(), lp.ln2_gain.end(), 1.0f);
  }
  std::fill(p.final_ln_gain.begin(), p.final_ln_gain.end(), 1.0f);
  fill(p.head);
  return p;
}

ParamSet direct_copy(const SourceTargetPair& pair, const ParamSet& source,
                     std::uint64_t seed) {
  check_pair(pair);
  check_shapes(pair.source, source);
  ParamSet out = rand_init(pair.target, seed);

  const std::size_t ds = pair.source.hidden;
  auto copy_block = [](const Matrix& src, Matrix& dst) {
    for (std::size_t r = 0; r < src.rows; ++r) {
      std::copy(src.row(r), src.row(r) + src.cols, dst.row(r));
    }
  };
  auto copy_prefix = [](const std::vector<float>& src, std::vector<float>& dst) {
    std::copy(src.begin(), src.end(), dst.begin());
  };

  copy_block(source.tok_emb, out.tok_emb);
  copy_block(source.pos_emb, out.pos_emb);
  copy_prefix(source.emb_ln_gain, out.emb_ln_gain);
  copy_prefix(source.emb_ln_bias, out.emb_ln_bias);
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    const LayerParams& s = source.layers[l];
    LayerParams& t = out.layers[l];
    copy_block(s.wq, t.wq);
    copy_block(s.wk, t.wk);
    copy_block(s.wv, t.wv);
    copy_block(s.wo, t.wo);
    copy_prefix(s.bq, t.bq);
    copy_prefix(s.bk, t.bk);
    copy_prefix(s.bv, t.bv);
    copy_prefix(s.bo, t.bo);
    copy_block(s.w1, t.w1);
    copy_block(s.w2, t.w2);
    copy_prefix(s.b1, t.b1);
    copy_prefix(s.b2, t.b2);
    copy_prefix(s.ln1_gain, t.ln1_gain);
    copy_prefix(s.ln1_bias, t.ln1_bias);
    copy_prefix(s.ln2_gain, t.ln2_gain);
    copy_prefix(s.ln2_bias, t.ln2_bias);
  }
  copy_prefix(source.final_ln_gain, out.final_ln_gain);
  copy_prefix(source.final_ln_bias, out.final_ln_bias);
  copy_block(source.head, out.head);  // head rows = source hidden dims
  out.head_bias = source.head_bias;
  (void)ds;
  return out;
}

ParamSet expand_model(const SourceTargetPair& pair, const ParamSet& source,
                      Strategy strategy, std::uint64_t seed,
                      ExpansionPlan* plan_out) {
  switch (strategy) {
    case Strategy::Rand:
      return rand_init(pair.target, seed);
    case Strategy::DirectCopy:
      return direct_copy(pair, source, seed);
    case Strategy::Fpi:
    case Strategy::Aki: {
      ExpansionPlan plan = build_plan(pair, strategy, seed);
      if (plan_out) *plan_out = plan;
      ParamSet widened = strategy == Strategy::Fpi
                             ? fpi_expand(pair, source, plan)
                             : aki_expand(pair, source, plan);
      ModelConfig widened_cfg = pair.target;
      widened_cfg.layers = pair.source.layers;
      return depth_stack(widened_cfg, widened, pair.target.layers);
    }
  }
  throw std::logic_error("unreachable strategy");
}

PreservationReport verify_preservation(const ModelConfig& src_cfg,
                                       const ParamSet& src_params,
                                       const ModelConfig& tgt_cfg,
                                       const ParamSet& tgt_params,
                                       std::size_t n_inputs, double tol,
                                       std::uint64_t seed) {
  if (src_cfg.vocab != tgt_cfg.vocab) {
    throw std::invalid_argument("verify_preservation: vocab mismatch");
  }
  SeededRng rng(seed);
  const std::size_t seq = std::min<std::size_t>(32, std::min(src_cfg.max_seq, tgt_cfg.max_seq));
  PreservationReport report;
  double src_loss_sum = 0.0, tgt_loss_sum = 0.0;
  for (std::size_t n = 0; n < n_inputs; ++n) {
    Batch batch;
    batch.batch = 1;
    batch.seq = seq;
    batch.ids.resize(seq);
    batch.mask.assign(seq, 1);
    batch.mlm_labels.assign(seq, -1);
    batch.lm_targets.assign(seq, -1);
    for (std::size_t s = 0; s < seq; ++s) {
      batch.ids[s] = static_cast<std::int32_t>(rng.sample_index(src_cfg.vocab));
    }
    if (src_cfg.variant == Variant::PostLnEncoder) {
      for (std::size_t s = 0; s < seq; ++s) {
        if (s == 0 || rng.uniform() < 0.15) {
          batch.mlm_labels[s] = batch.ids[s];
          batch.ids[s] = 1;  // mask token
        }
      }
    } else {
      for (std::size_t s = 0; s + 1 < seq; ++s) batch.lm_targets[s] = batch.ids[s + 1];
    }
    const ForwardOut a = forward(src_cfg, src_params, batch);
    const ForwardOut b = forward(tgt_cfg, tgt_params, batch);
    for (std::size_t i = 0; i < a.logits.size(); ++i) {
      report.max_logit_gap = std::max(
          report.max_logit_gap,
          static_cast<double>(std::abs(a.logits.data[i] - b.logits.data[i])));
    }
    if (src_cfg.variant == Variant::PostLnEncoder) {
      src_loss_sum += mlm_loss(a.logits, batch);
      tgt_loss_sum += mlm_loss(b.logits, batch);
    } else {
      src_loss_sum += lm_loss(a.logits, batch);
      tgt_loss_sum += lm_loss(b.logits, batch);
    }
  }
  report.source_loss = src_loss_sum / static_cast<double>(n_inputs);
  report.target_loss = tgt_loss_sum / static_cast<double>(n_inputs);
  report.loss_gap = std::abs(report.source_loss - report.target_loss);
  report.pass = report.max_logit_gap <= tol;
  return report;
}

std::string expansion_report(const SourceTargetPair& pair,
                             const ExpansionPlan* plan, Strategy strategy,
                             const PreservationReport* verification) {
  std::ostringstream out;
  out << "strategy: " << strategy_name(strategy) << "\n";
  out << "source: layers=" << pair.source.layers << " hidden=" << pair.source.hidden
      << " heads=" << pair.source.heads << " ffn=" << pair.source.ffn << "\n";
  out << "target: layers=" << pair.target.layers << " hidden=" << pair.target.hidden
      << " heads=" << pair.target.heads << " ffn=" << pair.target.ffn << "\n";
  if (plan) {
    out << "mapping digests: head=" << std::hex << plan->head_map.digest()
        << " hidden=" << plan->hidden_map.digest()
        << " ffn=" << plan->ffn_map.digest() << std::dec << "\n";
  }
  ModelConfig wide_src = pair.source;
  ModelConfig wide_tgt = pair.target;
  ParamSet a = make_param_set(wide_src);
  ParamSet b = make_param_set(wide_tgt);
  auto va = tensor_views(a);
  auto vb = tensor_views(b);
  out << "tensors:\n";
  for (const auto& ref : vb) {
    std::size_t src_size = 0;
    for (const auto& s : va) {
      if (s.name == ref.name) {
        src_size = s.size;
        break;
      }
    }
    out << "  " << ref.name << ": " << src_size << " -> " << ref.size << "\n";
  }
  if (verification) {
    out << "verification: max_logit_gap=" << verification->max_logit_gap
        << " loss_gap=" << verification->loss_gap
        << " source_loss=" << verification->source_loss
        << " target_loss=" << verification->target_loss
        << " pass=" << (verification->pass ? "yes" : "no") << "\n";
  }
  return out.str();
}

}  // namespace growformer
