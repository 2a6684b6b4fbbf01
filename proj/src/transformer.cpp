#include "growformer/transformer.hpp"

#include <cmath>
#include <fstream>
#include <mutex>
#include <stdexcept>

namespace growformer {

namespace {

constexpr float kMaskBias = -1e9f;
constexpr float kLnEps = 1e-12f;

Matrix col_block(const Matrix& m, std::size_t c0, std::size_t width) {
  Matrix out(m.rows, width);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const float* src = m.row(r) + c0;
    float* dst = out.row(r);
    for (std::size_t c = 0; c < width; ++c) dst[c] = src[c];
  }
  return out;
}

void add_col_block(Matrix& m, std::size_t c0, const Matrix& block) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    float* dst = m.row(r) + c0;
    const float* src = block.row(r);
    for (std::size_t c = 0; c < block.cols; ++c) dst[c] += src[c];
  }
}

void add_in_place(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

struct LnCache {
  Matrix xhat;
  std::vector<float> inv_sigma;
};

Matrix ln_forward(const Matrix& x, std::span<const float> gain,
                  std::span<const float> bias, LnCache& cache) {
  cache.xhat = Matrix(x.rows, x.cols);
  cache.inv_sigma.assign(x.rows, 0.0f);
  Matrix out(x.rows, x.cols);
  const float n = static_cast<float>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const float* in = x.row(r);
    float mean = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c) mean += in[c];
    mean /= n;
    float var = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c) {
      const float d = in[c] - mean;
      var += d * d;
    }
    var /= n;
    const float inv_sigma = 1.0f / std::sqrt(var + kLnEps);
    cache.inv_sigma[r] = inv_sigma;
    float* xh = cache.xhat.row(r);
    float* o = out.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) {
      xh[c] = (in[c] - mean) * inv_sigma;
      o[c] = xh[c] * gain[c] + bias[c];
    }
  }
  return out;
}

Matrix ln_backward(const Matrix& dout, const LnCache& cache,
                   std::span<const float> gain, float* dgain, float* dbias) {
  Matrix dx(dout.rows, dout.cols);
  const float n = static_cast<float>(dout.cols);
  for (std::size_t r = 0; r < dout.rows; ++r) {
    const float* dy = dout.row(r);
    const float* xh = cache.xhat.row(r);
    const float inv_sigma = cache.inv_sigma[r];
    float sum_dxhat = 0.0f;
    float sum_dxhat_xhat = 0.0f;
    for (std::size_t c = 0; c < dout.cols; ++c) {
      const float dxhat = dy[c] * gain[c];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xh[c];
      if (dgain) dgain[c] += dy[c] * xh[c];
      if (dbias) dbias[c] += dy[c];
    }
    const float m1 = sum_dxhat / n;
    const float m2 = sum_dxhat_xhat / n;
    float* dxr = dx.row(r);
    for (std::size_t c = 0; c < dout.cols; ++c) {
      const float dxhat = dy[c] * gain[c];
      dxr[c] = inv_sigma * (dxhat - m1 - xh[c] * m2);
    }
  }
  return dx;
}

// Y = X W + b
Matrix linear(const Matrix& x, const Matrix& w, std::span<const float> b) {
  Matrix y = matmul(x, w);
  for (std::size_t r = 0; r < y.rows; ++r) {
    float* row = y.row(r);
    for (std::size_t c = 0; c < y.cols; ++c) row[c] += b[c];
  }
  return y;
}

void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy,
                     Matrix& dx_out, Matrix* dw, float* db) {
  dx_out = matmul_transpose_b(dy, w);
  if (dw) {
    Matrix g = matmul_transpose_a(x, dy);
    add_in_place(*dw, g);
  }
  if (db) {
    for (std::size_t r = 0; r < dy.rows; ++r) {
      const float* row = dy.row(r);
      for (std::size_t c = 0; c < dy.cols; ++c) db[c] += row[c];
    }
  }
}

struct LayerCache {
  Matrix input;          // H_{l-1}
  LnCache pre_ln1;       // pre-LN only
  Matrix attn_in;        // input to Q/K/V projections
  Matrix q, k, v;        // T x D, head-blocked
  std::vector<Matrix> probs;  // per head, T x T
  Matrix concat;         // T x D
  LnCache ln1;           // post-LN only
  Matrix mha_out;        // H^MHA
  LnCache pre_ln2;       // pre-LN only
  Matrix ffn_in;
  Matrix z;              // pre-activation, T x ffn
  Matrix act;            // gelu(z)
  LnCache ln2;           // post-LN only
  Matrix output;         // H_l
};

struct SeqCache {
  Matrix embedded;       // tok + pos
  LnCache emb_ln;
  Matrix h0;
  std::vector<LayerCache> layers;
  LnCache final_ln;
  Matrix head_in;
  Matrix logits;         // T x vocab
};

void attention_forward(const ModelConfig& cfg, const LayerParams& lp,
                       const Batch& batch, std::size_t b, LayerCache& lc) {
  const std::size_t T = batch.seq;
  const std::size_t dk = cfg.head_dim;
  const bool causal = cfg.variant == Variant::PreLnDecoder;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));

  lc.q = linear(lc.attn_in, lp.wq, lp.bq);
  lc.k = linear(lc.attn_in, lp.wk, lp.bk);
  lc.v = linear(lc.attn_in, lp.wv, lp.bv);
  lc.concat = Matrix(T, cfg.hidden);
  lc.probs.resize(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Matrix qh = col_block(lc.q, h * dk, dk);
    const Matrix kh = col_block(lc.k, h * dk, dk);
    const Matrix vh = col_block(lc.v, h * dk, dk);
    Matrix scores = matmul_transpose_b(qh, kh);
    for (std::size_t i = 0; i < T; ++i) {
      float* row = scores.row(i);
      for (std::size_t j = 0; j < T; ++j) {
        row[j] *= scale;
        if (!batch.mask[b * T + j] || (causal && j > i)) row[j] += kMaskBias;
      }
    }
    lc.probs[h] = softmax_rows(scores);
    const Matrix oh = matmul(lc.probs[h], vh);
    add_col_block(lc.concat, h * dk, oh);
  }
  lc.mha_out = linear(lc.concat, lp.wo, lp.bo);
}

// dconcat -> grads of q/k/v/attn_in; accumulates into layer grads.
Matrix attention_backward(const ModelConfig& cfg, const LayerParams& lp,
                          const Batch& batch, std::size_t b,
                          const LayerCache& lc, const Matrix& dconcat,
                          LayerParams& grads) {
  const std::size_t T = batch.seq;
  const std::size_t dk = cfg.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  (void)b;

  Matrix dq(T, cfg.hidden), dkm(T, cfg.hidden), dv(T, cfg.hidden);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Matrix qh = col_block(lc.q, h * dk, dk);
    const Matrix kh = col_block(lc.k, h * dk, dk);
    const Matrix vh = col_block(lc.v, h * dk, dk);
    const Matrix doh = col_block(dconcat, h * dk, dk);
    const Matrix& p = lc.probs[h];

    Matrix dp = matmul_transpose_b(doh, vh);
    Matrix dvh = matmul_transpose_a(p, doh);
    // softmax rows backward
    Matrix ds(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      const float* pr = p.row(i);
      const float* dpr = dp.row(i);
      float dot = 0.0f;
      for (std::size_t j = 0; j < T; ++j) dot += pr[j] * dpr[j];
      float* dsr = ds.row(i);
      for (std::size_t j = 0; j < T; ++j) dsr[j] = pr[j] * (dpr[j] - dot);
    }
    for (std::size_t i = 0; i < ds.size(); ++i) ds.data[i] *= scale;
    Matrix dqh = matmul(ds, kh);
    Matrix dkh = matmul_transpose_a(ds, qh);
    add_col_block(dq, h * dk, dqh);
    add_col_block(dkm, h * dk, dkh);
    add_col_block(dv, h * dk, dvh);
  }

  Matrix dx(T, cfg.hidden), tmp(T, cfg.hidden);
  linear_backward(lc.attn_in, lp.wq, dq, dx, &grads.wq, grads.bq.data());
  linear_backward(lc.attn_in, lp.wk, dkm, tmp, &grads.wk, grads.bk.data());
  add_in_place(dx, tmp);
  linear_backward(lc.attn_in, lp.wv, dv, tmp, &grads.wv, grads.bv.data());
  add_in_place(dx, tmp);
  return dx;
}

void sequence_forward(const ModelConfig& cfg, const ParamSet& params,
                      const Batch& batch, std::size_t b, std::size_t depth,
                      SeqCache& sc) {
  const std::size_t T = batch.seq;
  sc.embedded = Matrix(T, cfg.hidden);
  for (std::size_t s = 0; s < T; ++s) {
    const std::int32_t id = batch.id(b, s);
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
      throw std::out_of_range("forward: token id " + std::to_string(id) +
                              " out of vocabulary range");
    }
    const float* tok = params.tok_emb.row(static_cast<std::size_t>(id));
    const float* pos = params.pos_emb.row(s);
    float* dst = sc.embedded.row(s);
    for (std::size_t c = 0; c < cfg.hidden; ++c) dst[c] = tok[c] + pos[c];
  }
  if (cfg.variant == Variant::PostLnEncoder) {
    sc.h0 = ln_forward(sc.embedded, params.emb_ln_gain, params.emb_ln_bias,
                       sc.emb_ln);
  } else {
    sc.h0 = sc.embedded;
  }

  sc.layers.resize(depth);
  Matrix h = sc.h0;
  for (std::size_t l = 0; l < depth; ++l) {
    const LayerParams& lp = params.layers[l];
    LayerCache& lc = sc.layers[l];
    lc.input = h;
    if (cfg.variant == Variant::PreLnDecoder) {
      lc.attn_in = ln_forward(lc.input, lp.ln1_gain, lp.ln1_bias, lc.pre_ln1);
    } else {
      lc.attn_in = lc.input;
    }
    attention_forward(cfg, lp, batch, b, lc);

    Matrix residual = lc.input;
    add_in_place(residual, lc.mha_out);
    Matrix ffn_entry;
    if (cfg.variant == Variant::PostLnEncoder) {
      ffn_entry = ln_forward(residual, lp.ln1_gain, lp.ln1_bias, lc.ln1);
      lc.ffn_in = ffn_entry;
    } else {
      ffn_entry = residual;  // residual stream
      lc.ffn_in = ln_forward(residual, lp.ln2_gain, lp.ln2_bias, lc.pre_ln2);
    }
    lc.z = linear(lc.ffn_in, lp.w1, lp.b1);
    lc.act = gelu(lc.z);
    Matrix g = linear(lc.act, lp.w2, lp.b2);
    Matrix r2 = ffn_entry;
    add_in_place(r2, g);
    if (cfg.variant == Variant::PostLnEncoder) {
      lc.output = ln_forward(r2, lp.ln2_gain, lp.ln2_bias, lc.ln2);
    } else {
      lc.output = r2;
    }
    h = lc.output;
  }

  if (cfg.variant == Variant::PreLnDecoder) {
    sc.head_in = ln_forward(h, params.final_ln_gain, params.final_ln_bias,
                            sc.final_ln);
  } else {
    sc.head_in = h;
  }
  sc.logits = linear(sc.head_in, params.head, params.head_bias);
}

// Per-position labels for the variant loss: MLM labels for the encoder,
// next-token targets for the decoder.
const std::vector<std::int32_t>& loss_labels(const ModelConfig& cfg,
                                             const Batch& batch) {
  if (cfg.variant == Variant::PostLnEncoder) return batch.mlm_labels;
  return batch.lm_targets;
}

double row_cross_entropy(const float* logits, std::size_t vocab,
                         std::int32_t label, double* dlogits, double grad_scale) {
  double mx = logits[0];
  for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, (double)logits[v]);
  double sum = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) sum += std::exp((double)logits[v] - mx);
  const double log_z = std::log(sum) + mx;
  if (dlogits) {
    for (std::size_t v = 0; v < vocab; ++v) {
      const double p = std::exp((double)logits[v] - log_z);
      dlogits[v] = (p - (static_cast<std::int32_t>(v) == label ? 1.0 : 0.0)) *
                   grad_scale;
    }
  }
  return log_z - (double)logits[label];
}

void sequence_backward(const ModelConfig& cfg, const ParamSet& params,
                       const Batch& batch, std::size_t b, std::size_t depth,
                       SeqCache& sc, ParamSet& grads, double grad_scale,
                       double& loss_sum) {
  const std::size_t T = batch.seq;
  const auto& labels = loss_labels(cfg, batch);

  Matrix dlogits(T, cfg.vocab);
  std::vector<double> drow(cfg.vocab);
  for (std::size_t s = 0; s < T; ++s) {
    const std::int32_t label = labels[b * T + s];
    if (label < 0) continue;
    loss_sum += row_cross_entropy(sc.logits.row(s), cfg.vocab, label,
                                  drow.data(), grad_scale);
    float* dst = dlogits.row(s);
    for (std::size_t v = 0; v < cfg.vocab; ++v) dst[v] = (float)drow[v];
  }

  Matrix dh;
  linear_backward(sc.head_in, params.head, dlogits, dh, &grads.head,
                  grads.head_bias.data());
  if (cfg.variant == Variant::PreLnDecoder) {
    dh = ln_backward(dh, sc.final_ln, params.final_ln_gain,
                     grads.final_ln_gain.data(), grads.final_ln_bias.data());
  }

  for (std::size_t l = depth; l-- > 0;) {
    const LayerParams& lp = params.layers[l];
    LayerParams& gl = grads.layers[l];
    LayerCache& lc = sc.layers[l];

    Matrix d_ffn_entry;  // grad at the FFN residual entry point
    Matrix dg;           // grad of FFN output
    if (cfg.variant == Variant::PostLnEncoder) {
      Matrix dr2 = ln_backward(dh, lc.ln2, lp.ln2_gain, gl.ln2_gain.data(),
                               gl.ln2_bias.data());
      d_ffn_entry = dr2;
      dg = dr2;
    } else {
      d_ffn_entry = dh;
      dg = dh;
    }

    Matrix dact;
    linear_backward(lc.act, lp.w2, dg, dact, &gl.w2, gl.b2.data());
    Matrix dz(dact.rows, dact.cols);
    for (std::size_t i = 0; i < dz.size(); ++i) {
      dz.data[i] = dact.data[i] * gelu_derivative(lc.z.data[i]);
    }
    Matrix d_ffn_in;
    linear_backward(lc.ffn_in, lp.w1, dz, d_ffn_in, &gl.w1, gl.b1.data());

    Matrix d_mha_out;  // grad at H^MHA / residual stream after attention
    if (cfg.variant == Variant::PostLnEncoder) {
      // ffn_in == ffn residual entry == LN1 output
      Matrix dhmha = d_ffn_entry;
      add_in_place(dhmha, d_ffn_in);
      Matrix dr1 = ln_backward(dhmha, lc.ln1, lp.ln1_gain, gl.ln1_gain.data(),
                               gl.ln1_bias.data());
      d_mha_out = dr1;
    } else {
      Matrix dn2 = ln_backward(d_ffn_in, lc.pre_ln2, lp.ln2_gain,
                               gl.ln2_gain.data(), gl.ln2_bias.data());
      d_mha_out = d_ffn_entry;
      add_in_place(d_mha_out, dn2);
    }

    Matrix dconcat;
    linear_backward(lc.concat, lp.wo, d_mha_out, dconcat, &gl.wo,
                    gl.bo.data());
    Matrix d_attn_in =
        attention_backward(cfg, lp, batch, b, lc, dconcat, gl);

    if (cfg.variant == Variant::PreLnDecoder) {
      Matrix din = ln_backward(d_attn_in, lc.pre_ln1, lp.ln1_gain,
                               gl.ln1_gain.data(), gl.ln1_bias.data());
      dh = d_mha_out;  // residual passthrough
      add_in_place(dh, din);
    } else {
      dh = d_mha_out;  // residual
      add_in_place(dh, d_attn_in);
    }
  }

  Matrix d_emb;
  if (cfg.variant == Variant::PostLnEncoder) {
    d_emb = ln_backward(dh, sc.emb_ln, params.emb_ln_gain,
                        grads.emb_ln_gain.data(), grads.emb_ln_bias.data());
  } else {
    d_emb = dh;
  }
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t id = static_cast<std::size_t>(batch.id(b, s));
    float* tok = grads.tok_emb.row(id);
    float* pos = grads.pos_emb.row(s);
    const float* src = d_emb.row(s);
    for (std::size_t c = 0; c < cfg.hidden; ++c) {
      tok[c] += src[c];
      pos[c] += src[c];
    }
  }
}

std::size_t resolve_depth(const ModelConfig& cfg, std::size_t depth) {
  if (depth == kFullDepth) return cfg.layers;
  if (depth > cfg.layers) {
    throw std::invalid_argument("depth exceeds layer count");
  }
  return depth;
}

void check_batch(const ModelConfig& cfg, const Batch& batch) {
  if (batch.batch == 0 || batch.seq == 0) {
    throw std::invalid_argument("empty batch");
  }
  if (batch.seq > cfg.max_seq) {
    throw std::invalid_argument("sequence longer than max_seq");
  }
  const std::size_t n = batch.batch * batch.seq;
  if (batch.ids.size() != n || batch.mask.size() != n ||
      batch.mlm_labels.size() != n || batch.lm_targets.size() != n) {
    throw std::invalid_argument("batch field sizes inconsistent");
  }
}

}  // namespace

std::string variant_name(Variant v) {
  return v == Variant::PostLnEncoder ? "post-ln-encoder" : "pre-ln-decoder";
}

Variant variant_from_name(const std::string& name) {
  if (name == "post-ln-encoder") return Variant::PostLnEncoder;
  if (name == "pre-ln-decoder") return Variant::PreLnDecoder;
  throw std::invalid_argument("unknown variant: " + name);
}

void ModelConfig::validate() const {
  if (hidden != heads * head_dim) {
    throw std::invalid_argument("config: hidden must equal heads * head_dim");
  }
  if (layers < 1 || vocab < 2 || ffn < 1 || max_seq < 1) {
    throw std::invalid_argument("config: layers >= 1, vocab >= 2, ffn >= 1 required");
  }
}

ParamSet make_param_set(const ModelConfig& cfg) {
  ParamSet p;
  p.tok_emb = Matrix(cfg.vocab, cfg.hidden);
  p.pos_emb = Matrix(cfg.max_seq, cfg.hidden);
  p.emb_ln_gain.assign(cfg.hidden, 0.0f);
  p.emb_ln_bias.assign(cfg.hidden, 0.0f);
  p.layers.resize(cfg.layers);
  for (auto& lp : p.layers) {
    lp.wq = Matrix(cfg.hidden, cfg.hidden);
    lp.wk = Matrix(cfg.hidden, cfg.hidden);
    lp.wv = Matrix(cfg.hidden, cfg.hidden);
    lp.wo = Matrix(cfg.hidden, cfg.hidden);
    lp.bq.assign(cfg.hidden, 0.0f);
    lp.bk.assign(cfg.hidden, 0.0f);
    lp.bv.assign(cfg.hidden, 0.0f);
    lp.bo.assign(cfg.hidden, 0.0f);
    lp.w1 = Matrix(cfg.hidden, cfg.ffn);
    lp.w2 = Matrix(cfg.ffn, cfg.hidden);
    lp.b1.assign(cfg.ffn, 0.0f);
    lp.b2.assign(cfg.hidden, 0.0f);
    lp.ln1_gain.assign(cfg.hidden, 0.0f);
    lp.ln1_bias.assign(cfg.hidden, 0.0f);
    lp.ln2_gain.assign(cfg.hidden, 0.0f);
    lp.ln2_bias.assign(cfg.hidden, 0.0f);
  }
  p.final_ln_gain.assign(cfg.hidden, 0.0f);
  p.final_ln_bias.assign(cfg.hidden, 0.0f);
  p.head = Matrix(cfg.hidden, cfg.vocab);
  p.head_bias.assign(cfg.vocab, 0.0f);
  return p;
}

void check_shapes(const ModelConfig& cfg, const ParamSet& p) {
  auto bad = [](const std::string& what) {
    throw std::invalid_argument("param shape mismatch: " + what);
  };
  if (p.tok_emb.rows != cfg.vocab || p.tok_emb.cols != cfg.hidden) bad("tok_emb");
  if (p.pos_emb.rows != cfg.max_seq || p.pos_emb.cols != cfg.hidden) bad("pos_emb");
  if (p.emb_ln_gain.size() != cfg.hidden || p.emb_ln_bias.size() != cfg.hidden) bad("emb_ln");
  if (p.layers.size() != cfg.layers) bad("layer count");
  for (const auto& lp : p.layers) {
    if (lp.wq.rows != cfg.hidden || lp.wq.cols != cfg.hidden) bad("wq");
    if (lp.wk.rows != cfg.hidden || lp.wk.cols != cfg.hidden) bad("wk");
    if (lp.wv.rows != cfg.hidden || lp.wv.cols != cfg.hidden) bad("wv");
    if (lp.wo.rows != cfg.hidden || lp.wo.cols != cfg.hidden) bad("wo");
    if (lp.bq.size() != cfg.hidden || lp.bk.size() != cfg.hidden ||
        lp.bv.size() != cfg.hidden || lp.bo.size() != cfg.hidden) bad("attn bias");
    if (lp.w1.rows != cfg.hidden || lp.w1.cols != cfg.ffn) bad("w1");
    if (lp.w2.rows != cfg.ffn || lp.w2.cols != cfg.hidden) bad("w2");
    if (lp.b1.size() != cfg.ffn || lp.b2.size() != cfg.hidden) bad("ffn bias");
    if (lp.ln1_gain.size() != cfg.hidden || lp.ln1_bias.size() != cfg.hidden ||
        lp.ln2_gain.size() != cfg.hidden || lp.ln2_bias.size() != cfg.hidden) bad("ln");
  }
  if (p.final_ln_gain.size() != cfg.hidden || p.final_ln_bias.size() != cfg.hidden) bad("final_ln");
  if (p.head.rows != cfg.hidden || p.head.cols != cfg.vocab) bad("head");
  if (p.head_bias.size() != cfg.vocab) bad("head_bias");
}

std::size_t param_count(const ModelConfig& cfg) {
  return param_count(cfg, cfg.layers);
}

std::size_t param_count(const ModelConfig& cfg, std::size_t depth) {
  const std::size_t d = cfg.hidden;
  const std::size_t per_layer = 4 * d * d + 4 * d          // attention
                                + 2 * d * cfg.ffn + cfg.ffn + d  // ffn
                                + 4 * d;                    // two LN pairs
  return cfg.vocab * d + cfg.max_seq * d + 2 * d  // embeddings + emb LN
         + depth * per_layer + 2 * d              // final LN
         + d * cfg.vocab + cfg.vocab;             // head
}

std::vector<TensorRef> tensor_views(ParamSet& p) {
  std::vector<TensorRef> refs;
  auto mat = [&](const std::string& name, Matrix& m) {
    refs.push_back({name, m.data.data(), m.size()});
  };
  auto vec = [&](const std::string& name, std::vector<float>& v) {
    refs.push_back({name, v.data(), v.size()});
  };
  mat("tok_emb", p.tok_emb);
  mat("pos_emb", p.pos_emb);
  vec("emb_ln_gain", p.emb_ln_gain);
  vec("emb_ln_bias", p.emb_ln_bias);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    LayerParams& lp = p.layers[l];
    mat(pre + "wq", lp.wq);
    vec(pre + "bq", lp.bq);
    mat(pre + "wk", lp.wk);
    vec(pre + "bk", lp.bk);
    mat(pre + "wv", lp.wv);
    vec(pre + "bv", lp.bv);
    mat(pre + "wo", lp.wo);
    vec(pre + "bo", lp.bo);
    vec(pre + "ln1_gain", lp.ln1_gain);
    vec(pre + "ln1_bias", lp.ln1_bias);
    mat(pre + "w1", lp.w1);
    vec(pre + "b1", lp.b1);
    mat(pre + "w2", lp.w2);
    vec(pre + "b2", lp.b2);
    vec(pre + "ln2_gain", lp.ln2_gain);
    vec(pre + "ln2_bias", lp.ln2_bias);
  }
  vec("final_ln_gain", p.final_ln_gain);
  vec("final_ln_bias", p.final_ln_bias);
  mat("head", p.head);
  vec("head_bias", p.head_bias);
  return refs;
}

std::vector<std::string> layer_tensor_names(std::size_t layer) {
  const std::string pre = "layer." + std::to_string(layer) + ".";
  return {pre + "wq", pre + "bq", pre + "wk", pre + "bk",
          pre + "wv", pre + "bv", pre + "wo", pre + "bo",
          pre + "ln1_gain", pre + "ln1_bias",
          pre + "w1", pre + "b1", pre + "w2", pre + "b2",
          pre + "ln2_gain", pre + "ln2_bias"};
}

ForwardOut forward(const ModelConfig& cfg, const ParamSet& params,
                   const Batch& batch, std::size_t depth) {
  check_shapes(cfg, params);
  check_batch(cfg, batch);
  const std::size_t d = resolve_depth(cfg, depth);
  ForwardOut out;
  out.logits = Matrix(batch.batch * batch.seq, cfg.vocab);
  out.hidden = Matrix(batch.batch * batch.seq, cfg.hidden);
  parallel_for(batch.batch, [&](std::size_t b) {
    SeqCache sc;
    sequence_forward(cfg, params, batch, b, d, sc);
    for (std::size_t s = 0; s < batch.seq; ++s) {
      const std::size_t r = b * batch.seq + s;
      std::copy(sc.logits.row(s), sc.logits.row(s) + cfg.vocab,
                out.logits.row(r));
      std::copy(sc.head_in.row(s), sc.head_in.row(s) + cfg.hidden,
                out.hidden.row(r));
    }
  });
  return out;
}

namespace {
double labeled_cross_entropy(const Matrix& logits, const Batch& batch,
                             const std::vector<std::int32_t>& labels,
                             const char* what) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const std::int32_t label = labels[r];
    if (label < 0) continue;
    sum += row_cross_entropy(logits.row(r), logits.cols, label, nullptr, 0.0);
    ++count;
  }
  if (count == 0) throw std::invalid_argument(std::string(what) + ": no labeled positions");
  return sum / static_cast<double>(count);
}
}  // namespace

double mlm_loss(const Matrix& logits, const Batch& batch) {
  return labeled_cross_entropy(logits, batch, batch.mlm_labels, "mlm_loss");
}

double lm_loss(const Matrix& logits, const Batch& batch) {
  return labeled_cross_entropy(logits, batch, batch.lm_targets, "lm_loss");
}

double eval_loss(const ModelConfig& cfg, const ParamSet& params,
                 const Batch& batch, std::size_t depth) {
  ForwardOut out = forward(cfg, params, batch, depth);
  return cfg.variant == Variant::PostLnEncoder ? mlm_loss(out.logits, batch)
                                               : lm_loss(out.logits, batch);
}

BackwardOut backward(const ModelConfig& cfg, const ParamSet& params,
                     const Batch& batch, const std::set<std::string>& freeze,
                     std::size_t depth, float loss_scale) {
  check_shapes(cfg, params);
  check_batch(cfg, batch);
  const std::size_t d = resolve_depth(cfg, depth);
  const auto& labels = loss_labels(cfg, batch);
  std::size_t total_labeled = 0;
  for (const auto label : labels) total_labeled += label >= 0 ? 1 : 0;
  if (total_labeled == 0) {
    throw std::invalid_argument("backward: no labeled positions in batch");
  }
  const double grad_scale =
      static_cast<double>(loss_scale) / static_cast<double>(total_labeled);

  // Per-sequence gradient buffers reduced in sequence order, so the result
  // does not depend on the thread count.
  std::vector<ParamSet> seq_grads(batch.batch);
  std::vector<double> seq_loss(batch.batch, 0.0);
  parallel_for(batch.batch, [&](std::size_t b) {
    seq_grads[b] = make_param_set(cfg);
    SeqCache sc;
    sequence_forward(cfg, params, batch, b, d, sc);
    sequence_backward(cfg, params, batch, b, d, sc, seq_grads[b], grad_scale,
                      seq_loss[b]);
  });

  BackwardOut out;
  out.grads = make_param_set(cfg);
  auto dst = tensor_views(out.grads);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    auto src = tensor_views(seq_grads[b]);
    for (std::size_t t = 0; t < dst.size(); ++t) {
      for (std::size_t i = 0; i < dst[t].size; ++i) {
        dst[t].data[i] += src[t].data[i];
      }
    }
    out.loss += seq_loss[b];
  }
  out.loss = out.loss * loss_scale / static_cast<double>(total_labeled);

  for (auto& ref : dst) {
    if (freeze.count(ref.name)) {
      std::fill(ref.data, ref.data + ref.size, 0.0f);
    }
  }
  return out;
}

std::vector<std::vector<Matrix>> attention_maps(const ModelConfig& cfg,
                                                const ParamSet& params,
                                                const Batch& batch) {
  check_shapes(cfg, params);
  check_batch(cfg, batch);
  SeqCache sc;
  sequence_forward(cfg, params, batch, 0, cfg.layers, sc);
  std::vector<std::vector<Matrix>> maps(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) maps[l] = sc.layers[l].probs;
  return maps;
}

void dump_attention(const ModelConfig& cfg, const ParamSet& params,
                    const Batch& batch, const std::filesystem::path& out_path) {
  const auto maps = attention_maps(cfg, params, batch);
  std::ofstream out(out_path);
  if (!out) {
    throw std::runtime_error("dump_attention: cannot open " + out_path.string());
  }
  out << "layer,head,row,col,value\n";
  out.precision(9);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    for (std::size_t h = 0; h < maps[l].size(); ++h) {
      const Matrix& p = maps[l][h];
      for (std::size_t r = 0; r < p.rows; ++r) {
        for (std::size_t c = 0; c < p.cols; ++c) {
          out << l << ',' << h << ',' << r << ',' << c << ',' << p.at(r, c)
              << '\n';
        }
      }
    }
  }
  if (!out.good()) {
    throw std::runtime_error("dump_attention: write failed for " +
                             out_path.string());
  }
}

}  // namespace growformer
