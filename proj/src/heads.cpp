#include "binfm/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "binfm/bpe.hpp"

namespace binfm::heads {

Linear::Linear(const std::string& name, int64_t out_dim, int64_t in_dim, Rng& rng) {
  w_ = Param(name + ".w", {out_dim, in_dim});
  b_ = Param(name + ".b", {out_dim});
  nn::init_truncated_normal(w_.value, rng, 0.02);
}

Tensor Linear::forward(const Tensor& x, LinearCache* cache) const {
  Tensor out;
  nn::matmul_bt(x, w_.value, out);
  for (int64_t r = 0; r < out.dim(0); ++r) {
    double* row = out.row(r);
    for (int64_t c = 0; c < out.dim(1); ++c) row[c] += b_.value[c];
  }
  if (cache != nullptr) cache->input = x;
  return out;
}

Tensor Linear::backward(const LinearCache& cache, const Tensor& d_out) {
  Tensor d_x;
  nn::matmul(d_out, w_.value, d_x);
  nn::matmul_at_acc(d_out, cache.input, w_.grad);
  for (int64_t r = 0; r < d_out.dim(0); ++r) {
    const double* row = d_out.row(r);
    for (int64_t c = 0; c < d_out.dim(1); ++c) b_.grad[c] += row[c];
  }
  return d_x;
}

double cross_entropy(const Tensor& logits, int64_t row, int32_t target, double scale,
                     Tensor& d_logits) {
  const int64_t n = logits.dim(1);
  if (target < 0 || target >= n) raise(Errc::id_out_of_range, "cross-entropy target");
  if (d_logits.shape() != logits.shape()) d_logits = Tensor(logits.shape());
  const double* lrow = logits.row(row);
  double row_max = lrow[0];
  for (int64_t i = 1; i < n; ++i) row_max = std::max(row_max, lrow[i]);
  double sum = 0.0;
  for (int64_t i = 0; i < n; ++i) sum += std::exp(lrow[i] - row_max);
  const double loss = -(lrow[target] - row_max - std::log(sum));
  double* drow = d_logits.row(row);
  for (int64_t i = 0; i < n; ++i) drow[i] += scale * std::exp(lrow[i] - row_max) / sum;
  drow[target] -= scale;
  return loss;
}

// ---- SeqClassifierHead ----

SeqClassifierHead::SeqClassifierHead(int64_t n_classes, int64_t hidden_dim, uint64_t seed)
    : hidden_dim_(hidden_dim) {
  Rng rng(derive_seed(seed, "seq-classifier-init"));
  linear_ = Linear("seq_head", n_classes, hidden_dim, rng);
}

Tensor SeqClassifierHead::forward(const Tensor& hidden, LinearCache* cache) const {
  Tensor x0({1, hidden_dim_});
  std::memcpy(x0.data(), hidden.row(0), static_cast<size_t>(hidden_dim_) * sizeof(double));
  return linear_.forward(x0, cache);
}

Tensor SeqClassifierHead::backward(const LinearCache& cache, const Tensor& d_logits,
                                   int64_t seq_len) {
  const Tensor d_x0 = linear_.backward(cache, d_logits);
  Tensor d_hidden({seq_len, hidden_dim_});
  std::memcpy(d_hidden.row(0), d_x0.data(), static_cast<size_t>(hidden_dim_) * sizeof(double));
  return d_hidden;
}

// ---- extended vocabulary / API prediction ----

ExtendedVocabModel extend_vocab(const EncoderModel& pretrained,
                                std::vector<std::string> api_names, uint64_t seed) {
  std::set<std::string> unique(api_names.begin(), api_names.end());
  if (unique.size() != api_names.size()) {
    raise(Errc::duplicate_api_name, "API token names must be distinct");
  }
  ExtendedVocabModel evm{pretrained, std::move(api_names), Linear{}, pretrained.config().vocab_size};
  evm.model.extend_embeddings(static_cast<int64_t>(evm.api_names.size()), seed);
  Rng rng(derive_seed(seed, "api-head-init"));
  evm.api_head = Linear("api_head", static_cast<int64_t>(evm.api_names.size()),
                        pretrained.config().hidden_dim, rng);
  return evm;
}

ApiForward api_predict_forward(ExtendedVocabModel& evm, std::span<const int32_t> ids,
                               bool training, Rng* dropout_rng, bool keep_caches) {
  ApiForward fwd;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == bpe::kMaskId) fwd.mask_positions.push_back(static_cast<int64_t>(i));
  }
  if (fwd.mask_positions.empty()) {
    raise(Errc::no_mask_present, "API prediction input contains no <mask>");
  }
  const Tensor hidden =
      evm.model.forward(ids, training, dropout_rng, keep_caches ? &fwd.encoder_cache : nullptr);
  const int64_t h = evm.model.config().hidden_dim;
  Tensor rows({static_cast<int64_t>(fwd.mask_positions.size()), h});
  for (size_t m = 0; m < fwd.mask_positions.size(); ++m) {
    std::memcpy(rows.row(static_cast<int64_t>(m)), hidden.row(fwd.mask_positions[m]),
                static_cast<size_t>(h) * sizeof(double));
  }
  fwd.logits = evm.api_head.forward(rows, keep_caches ? &fwd.head_cache : nullptr);
  return fwd;
}

// ---- DocAggregatorHead ----

DocAggregatorHead::DocAggregatorHead(const HeadConfig& config, uint64_t seed) : config_(config) {
  const int64_t h = config.hidden_dim;
  if (h % config.n_heads != 0) raise(Errc::invalid_config, "aggregator heads must divide H");
  if ((h / config.n_heads) % 2 != 0) raise(Errc::invalid_config, "aggregator head_dim must be even");
  Rng rng(derive_seed(seed, "doc-aggregator-init"));
  norm_w_ = Param("agg.norm", {h});
  norm_w_.value.fill(1.0);
  wq_ = Param("agg.wq", {h, h});
  wk_ = Param("agg.wk", {h, h});
  wv_ = Param("agg.wv", {h, h});
  wo_ = Param("agg.wo", {h, h});
  for (Param* p : {&wq_, &wk_, &wv_, &wo_}) nn::init_truncated_normal(p->value, rng, 0.02);
  l1_ = Linear("agg.ffn1", config.ffn_hidden, h, rng);
  l2_ = Linear("agg.ffn2", config.n_classes, config.ffn_hidden, rng);
}

std::vector<Param*> DocAggregatorHead::parameters() {
  std::vector<Param*> out = {&norm_w_, &wq_, &wk_, &wv_, &wo_};
  for (Param* p : l1_.parameters()) out.push_back(p);
  for (Param* p : l2_.parameters()) out.push_back(p);
  return out;
}

Tensor DocAggregatorHead::forward(const Tensor& chunk_embs, Cache* cache) const {
  const int64_t n = chunk_embs.dim(0), h = config_.hidden_dim;
  const int64_t nh = config_.n_heads, hd = h / nh;
  if (n < 1) raise(Errc::empty_document, "aggregator needs at least one chunk embedding");

  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.x = chunk_embs;
  c.xn = Tensor({n, h});
  nn::rmsnorm_rows(c.x, norm_w_.value, 1e-5, c.xn, c.rms_inv);

  nn::matmul(c.xn, wq_.value, c.q);
  nn::matmul(c.xn, wk_.value, c.k);
  nn::matmul(c.xn, wv_.value, c.v);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t head = 0; head < nh; ++head) {
      nn::rope_apply(c.q.row(i) + head * hd, hd, i, config_.rope_theta);
      nn::rope_apply(c.k.row(i) + head * hd, hd, i, config_.rope_theta);
    }
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  c.probs = Tensor({nh, n, n});
  c.ctx = Tensor({n, h});
  std::vector<double> scores(static_cast<size_t>(n));
  for (int64_t head = 0; head < nh; ++head) {
    const int64_t off = head * hd;
    for (int64_t i = 0; i < n; ++i) {
      const double* qi = c.q.row(i) + off;
      double row_max = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < n; ++j) {
        const double* kj = c.k.row(j) + off;
        double dot = 0.0;
        for (int64_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
        scores[static_cast<size_t>(j)] = dot * scale;
        row_max = std::max(row_max, scores[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double e = std::exp(scores[static_cast<size_t>(j)] - row_max);
        c.probs.at(head, i, j) = e;
        denom += e;
      }
      double* ci = c.ctx.row(i) + off;
      for (int64_t j = 0; j < n; ++j) {
        const double p = c.probs.at(head, i, j) / denom;
        c.probs.at(head, i, j) = p;
        const double* vj = c.v.row(j) + off;
        for (int64_t d = 0; d < hd; ++d) ci[d] += p * vj[d];
      }
    }
  }

  Tensor attn_out;
  nn::matmul(c.ctx, wo_.value, attn_out);
  c.y = c.x;
  nn::add_inplace(c.y, attn_out);

  c.pooled = Tensor({1, h});
  for (int64_t i = 0; i < n; ++i) {
    const double* yr = c.y.row(i);
    for (int64_t d = 0; d < h; ++d) c.pooled[d] += yr[d];
  }
  for (int64_t d = 0; d < h; ++d) c.pooled[d] /= static_cast<double>(n);

  c.ffn_pre = l1_.forward(c.pooled, cache != nullptr ? &c.l1_cache : nullptr);
  Tensor act({1, config_.ffn_hidden});
  for (int64_t i = 0; i < act.size(); ++i) act[i] = nn::gelu(c.ffn_pre[i]);
  return l2_.forward(act, cache != nullptr ? &c.l2_cache : nullptr);
}

Tensor DocAggregatorHead::backward(const Cache& c, const Tensor& d_logits) {
  const int64_t n = c.x.dim(0), h = config_.hidden_dim;
  const int64_t nh = config_.n_heads, hd = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor d_act = l2_.backward(c.l2_cache, d_logits);
  for (int64_t i = 0; i < d_act.size(); ++i) d_act[i] *= nn::gelu_grad(c.ffn_pre[i]);
  const Tensor d_pooled = l1_.backward(c.l1_cache, d_act);

  Tensor d_y({n, h});
  for (int64_t i = 0; i < n; ++i) {
    double* dyr = d_y.row(i);
    for (int64_t d = 0; d < h; ++d) dyr[d] = d_pooled[d] / static_cast<double>(n);
  }

  // y = x + ctx @ wo
  Tensor d_ctx;
  nn::matmul_bt(d_y, wo_.value, d_ctx);
  nn::matmul_at_acc(c.ctx, d_y, wo_.grad);

  Tensor dq({n, h}), dk({n, h}), dv({n, h});
  std::vector<double> dp(static_cast<size_t>(n));
  for (int64_t head = 0; head < nh; ++head) {
    const int64_t off = head * hd;
    for (int64_t i = 0; i < n; ++i) {
      const double* dci = d_ctx.row(i) + off;
      double dot_pp = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        const double p = c.probs.at(head, i, j);
        const double* vj = c.v.row(j) + off;
        double g = 0.0;
        for (int64_t d = 0; d < hd; ++d) g += dci[d] * vj[d];
        dp[static_cast<size_t>(j)] = g;
        dot_pp += g * p;
        double* dvj = dv.row(j) + off;
        for (int64_t d = 0; d < hd; ++d) dvj[d] += p * dci[d];
      }
      double* dqi = dq.row(i) + off;
      const double* qi = c.q.row(i) + off;
      for (int64_t j = 0; j < n; ++j) {
        const double p = c.probs.at(head, i, j);
        const double ds = p * (dp[static_cast<size_t>(j)] - dot_pp) * scale;
        if (ds == 0.0) continue;
        const double* kj = c.k.row(j) + off;
        double* dkj = dk.row(j) + off;
        for (int64_t d = 0; d < hd; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
        }
      }
    }
  }
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t head = 0; head < nh; ++head) {
      nn::rope_apply(dq.row(i) + head * hd, hd, i, config_.rope_theta, -1);
      nn::rope_apply(dk.row(i) + head * hd, hd, i, config_.rope_theta, -1);
    }
  }

  Tensor d_xn({n, h});
  d_xn.zero();
  nn::matmul_bt_acc(dq, wq_.value, d_xn);
  nn::matmul_bt_acc(dk, wk_.value, d_xn);
  nn::matmul_bt_acc(dv, wv_.value, d_xn);
  nn::matmul_at_acc(c.xn, dq, wq_.grad);
  nn::matmul_at_acc(c.xn, dk, wk_.grad);
  nn::matmul_at_acc(c.xn, dv, wv_.grad);

  Tensor d_x({n, h});
  nn::rmsnorm_rows_backward(c.x, norm_w_.value, c.rms_inv, d_xn, norm_w_.grad, d_x);
  nn::add_inplace(d_x, d_y);  // residual branch
  return d_x;
}

// ---- AvgPoolHead ----

AvgPoolHead::AvgPoolHead(const HeadConfig& config, uint64_t seed) : config_(config) {
  Rng rng(derive_seed(seed, "avgpool-head-init"));
  l1_ = Linear("avg.ffn1", config.ffn_hidden, config.hidden_dim, rng);
  l2_ = Linear("avg.ffn2", config.n_classes, config.ffn_hidden, rng);
}

std::vector<Param*> AvgPoolHead::parameters() {
  std::vector<Param*> out;
  for (Param* p : l1_.parameters()) out.push_back(p);
  for (Param* p : l2_.parameters()) out.push_back(p);
  return out;
}

Tensor AvgPoolHead::forward(const Tensor& chunk_embs, Cache* cache) const {
  const int64_t n = chunk_embs.dim(0), h = config_.hidden_dim;
  if (n < 1) raise(Errc::too_few_chunks, "average-pool head needs at least one chunk");
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.n_chunks = n;
  c.pooled = Tensor({1, h});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = chunk_embs.row(i);
    for (int64_t d = 0; d < h; ++d) c.pooled[d] += row[d];
  }
  for (int64_t d = 0; d < h; ++d) c.pooled[d] /= static_cast<double>(n);
  c.ffn_pre = l1_.forward(c.pooled, cache != nullptr ? &c.l1_cache : nullptr);
  Tensor act({1, config_.ffn_hidden});
  for (int64_t i = 0; i < act.size(); ++i) act[i] = nn::gelu(c.ffn_pre[i]);
  return l2_.forward(act, cache != nullptr ? &c.l2_cache : nullptr);
}

Tensor AvgPoolHead::backward(const Cache& c, const Tensor& d_logits) {
  Tensor d_act = l2_.backward(c.l2_cache, d_logits);
  for (int64_t i = 0; i < d_act.size(); ++i) d_act[i] *= nn::gelu_grad(c.ffn_pre[i]);
  const Tensor d_pooled = l1_.backward(c.l1_cache, d_act);
  Tensor d_x({c.n_chunks, config_.hidden_dim});
  for (int64_t i = 0; i < c.n_chunks; ++i) {
    double* row = d_x.row(i);
    for (int64_t d = 0; d < config_.hidden_dim; ++d) {
      row[d] = d_pooled[d] / static_cast<double>(c.n_chunks);
    }
  }
  return d_x;
}

// ---- Cnn1dHead ----

Cnn1dHead::Cnn1dHead(const HeadConfig& config, uint64_t seed) : config_(config) {
  Rng rng(derive_seed(seed, "cnn1d-head-init"));
  conv_w_ = Param("cnn.w", {config.hidden_dim, config.cnn_kernel, config.hidden_dim});
  conv_b_ = Param("cnn.b", {config.hidden_dim});
  nn::init_truncated_normal(conv_w_.value, rng, 0.02);
  l1_ = Linear("cnn.ffn1", config.ffn_hidden, config.hidden_dim, rng);
  l2_ = Linear("cnn.ffn2", config.n_classes, config.ffn_hidden, rng);
}

std::vector<Param*> Cnn1dHead::parameters() {
  std::vector<Param*> out = {&conv_w_, &conv_b_};
  for (Param* p : l1_.parameters()) out.push_back(p);
  for (Param* p : l2_.parameters()) out.push_back(p);
  return out;
}

int64_t Cnn1dHead::output_frames(int64_t n_chunks) const {
  const int64_t padded = std::max(n_chunks, config_.cnn_kernel);
  const int64_t conv_frames = padded - config_.cnn_kernel + 1;
  if (conv_frames <= config_.pool_kernel) return 1;  // ceil-mode partial window
  return (conv_frames - config_.pool_kernel + config_.pool_stride - 1) / config_.pool_stride + 1;
}

Tensor Cnn1dHead::forward(const Tensor& chunk_embs, Cache* cache) const {
  const int64_t n = chunk_embs.dim(0), h = config_.hidden_dim, k = config_.cnn_kernel;
  if (n < 1) raise(Errc::too_few_chunks, "CNN head needs at least one chunk");
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.orig_n = n;

  const int64_t padded_n = std::max(n, k);
  c.padded = Tensor({padded_n, h});
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(c.padded.row(padded_n - n + i), chunk_embs.row(i),
                static_cast<size_t>(h) * sizeof(double));
  }

  const int64_t f0 = padded_n - k + 1;
  c.conv_pre = Tensor({f0, h});
  for (int64_t f = 0; f < f0; ++f) {
    double* out = c.conv_pre.row(f);
    for (int64_t co = 0; co < h; ++co) out[co] = conv_b_.value[co];
    for (int64_t t = 0; t < k; ++t) {
      const double* in = c.padded.row(f + t);
      for (int64_t co = 0; co < h; ++co) {
        const double* wrow = conv_w_.value.data() + (co * k + t) * h;
        double acc = 0.0;
        for (int64_t ci = 0; ci < h; ++ci) acc += in[ci] * wrow[ci];
        out[co] += acc;
      }
    }
  }
  c.conv_act = Tensor({f0, h});
  for (int64_t i = 0; i < c.conv_pre.size(); ++i) c.conv_act[i] = nn::gelu(c.conv_pre[i]);

  const int64_t f1 = output_frames(n);
  c.pooled_frames = f1;
  c.argmax.assign(static_cast<size_t>(f1 * h), 0);
  c.pooled_mean = Tensor({1, h});
  for (int64_t w = 0; w < f1; ++w) {
    const int64_t start = w * config_.pool_stride;
    const int64_t end = std::min(start + config_.pool_kernel, f0);
    for (int64_t ch = 0; ch < h; ++ch) {
      int64_t best = start;
      for (int64_t f = start + 1; f < end; ++f) {
        if (c.conv_act.at(f, ch) > c.conv_act.at(best, ch)) best = f;
      }
      c.argmax[static_cast<size_t>(w * h + ch)] = best;
      c.pooled_mean[ch] += c.conv_act.at(best, ch);
    }
  }
  for (int64_t ch = 0; ch < h; ++ch) c.pooled_mean[ch] /= static_cast<double>(f1);

  c.ffn_pre = l1_.forward(c.pooled_mean, cache != nullptr ? &c.l1_cache : nullptr);
  Tensor act({1, config_.ffn_hidden});
  for (int64_t i = 0; i < act.size(); ++i) act[i] = nn::gelu(c.ffn_pre[i]);
  return l2_.forward(act, cache != nullptr ? &c.l2_cache : nullptr);
}

Tensor Cnn1dHead::backward(const Cache& c, const Tensor& d_logits) {
  const int64_t h = config_.hidden_dim, k = config_.cnn_kernel;
  const int64_t padded_n = c.padded.dim(0);
  const int64_t f0 = c.conv_pre.dim(0);

  Tensor d_act = l2_.backward(c.l2_cache, d_logits);
  for (int64_t i = 0; i < d_act.size(); ++i) d_act[i] *= nn::gelu_grad(c.ffn_pre[i]);
  const Tensor d_pooled = l1_.backward(c.l1_cache, d_act);

  Tensor d_conv_act({f0, h});
  for (int64_t w = 0; w < c.pooled_frames; ++w) {
    for (int64_t ch = 0; ch < h; ++ch) {
      const int64_t f = c.argmax[static_cast<size_t>(w * h + ch)];
      d_conv_act.at(f, ch) += d_pooled[ch] / static_cast<double>(c.pooled_frames);
    }
  }
  for (int64_t i = 0; i < d_conv_act.size(); ++i) d_conv_act[i] *= nn::gelu_grad(c.conv_pre[i]);

  Tensor d_padded({padded_n, h});
  for (int64_t f = 0; f < f0; ++f) {
    const double* dout = d_conv_act.row(f);
    for (int64_t co = 0; co < h; ++co) {
      const double g = dout[co];
      if (g == 0.0) continue;
      conv_b_.grad[co] += g;
      for (int64_t t = 0; t < k; ++t) {
        const double* in = c.padded.row(f + t);
        double* din = d_padded.row(f + t);
        const double* wrow = conv_w_.value.data() + (co * k + t) * h;
        double* dwrow = conv_w_.grad.data() + (co * k + t) * h;
        for (int64_t ci = 0; ci < h; ++ci) {
          dwrow[ci] += g * in[ci];
          din[ci] += g * wrow[ci];
        }
      }
    }
  }

  Tensor d_x({c.orig_n, h});
  for (int64_t i = 0; i < c.orig_n; ++i) {
    std::memcpy(d_x.row(i), d_padded.row(padded_n - c.orig_n + i),
                static_cast<size_t>(h) * sizeof(double));
  }
  return d_x;
}

// ---- MlpBaseline ----

MlpBaseline::MlpBaseline(int64_t vocab_size, int64_t embed_dim, int64_t ffn_hidden,
                         int64_t n_classes, uint64_t seed) {
  Rng rng(derive_seed(seed, "mlp-baseline-init"));
  embeddings_ = Param("mlp.embeddings", {vocab_size, embed_dim});
  nn::init_truncated_normal(embeddings_.value, rng, 0.02);
  l1_ = Linear("mlp.l1", ffn_hidden, embed_dim, rng);
  l2_ = Linear("mlp.l2", ffn_hidden, ffn_hidden, rng);
  l3_ = Linear("mlp.l3", n_classes, ffn_hidden, rng);
}

std::vector<Param*> MlpBaseline::parameters() {
  std::vector<Param*> out = {&embeddings_};
  for (Linear* l : {&l1_, &l2_, &l3_}) {
    for (Param* p : l->parameters()) out.push_back(p);
  }
  return out;
}

Tensor MlpBaseline::forward(std::span<const int32_t> ids, bool training, Rng* dropout_rng,
                            Cache* cache) const {
  if (ids.empty()) raise(Errc::empty_input, "MLP baseline needs at least one token");
  const int64_t e = embeddings_.value.dim(1);
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.ids.assign(ids.begin(), ids.end());
  c.pooled = Tensor({1, e});
  for (int32_t id : ids) {
    if (id < 0 || id >= embeddings_.value.dim(0)) {
      raise(Errc::id_out_of_range, "token id " + std::to_string(id));
    }
    const double* row = embeddings_.value.row(id);
    for (int64_t d = 0; d < e; ++d) c.pooled[d] += row[d];
  }
  for (int64_t d = 0; d < e; ++d) c.pooled[d] /= static_cast<double>(ids.size());

  c.pre1 = l1_.forward(c.pooled, cache != nullptr ? &c.l1_cache : nullptr);
  c.act1 = Tensor(c.pre1.shape());
  for (int64_t i = 0; i < c.pre1.size(); ++i) c.act1[i] = std::max(0.0, c.pre1[i]);
  if (training && dropout_ > 0.0) {
    if (dropout_rng == nullptr) raise(Errc::invalid_config, "training dropout requires an RNG");
    c.drop_mask = Tensor(c.act1.shape());
    const double keep = 1.0 - dropout_;
    for (int64_t i = 0; i < c.act1.size(); ++i) {
      c.drop_mask[i] = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      c.act1[i] *= c.drop_mask[i];
    }
  }
  c.pre2 = l2_.forward(c.act1, cache != nullptr ? &c.l2_cache : nullptr);
  c.act2 = Tensor(c.pre2.shape());
  for (int64_t i = 0; i < c.pre2.size(); ++i) c.act2[i] = std::max(0.0, c.pre2[i]);
  return l3_.forward(c.act2, cache != nullptr ? &c.l3_cache : nullptr);
}

void MlpBaseline::backward(const Cache& c, const Tensor& d_logits) {
  Tensor d_act2 = l3_.backward(c.l3_cache, d_logits);
  for (int64_t i = 0; i < d_act2.size(); ++i) {
    if (c.pre2[i] <= 0.0) d_act2[i] = 0.0;
  }
  Tensor d_act1 = l2_.backward(c.l2_cache, d_act2);
  if (!c.drop_mask.empty()) {
    for (int64_t i = 0; i < d_act1.size(); ++i) d_act1[i] *= c.drop_mask[i];
  }
  for (int64_t i = 0; i < d_act1.size(); ++i) {
    if (c.pre1[i] <= 0.0) d_act1[i] = 0.0;
  }
  const Tensor d_pooled = l1_.backward(c.l1_cache, d_act1);
  const int64_t e = embeddings_.value.dim(1);
  const double inv_n = 1.0 / static_cast<double>(c.ids.size());
  for (int32_t id : c.ids) {
    double* grow = embeddings_.grad.row(id);
    for (int64_t d = 0; d < e; ++d) grow[d] += d_pooled[d] * inv_n;
  }
}

// ---- document driver ----

DocForward doc_aggregate_forward(EncoderModel& model, DocAggregatorHead& head,
                                 const std::vector<std::vector<int32_t>>& chunks, int64_t cap,
                                 bool training, Rng* dropout_rng, bool keep_caches) {
  if (chunks.empty()) raise(Errc::empty_document, "document has no chunks");
  DocForward fwd;
  fwd.chunks_used = std::min<int64_t>(static_cast<int64_t>(chunks.size()), cap);
  const int64_t h = model.config().hidden_dim;
  Tensor chunk_embs({fwd.chunks_used, h});
  for (int64_t i = 0; i < fwd.chunks_used; ++i) {
    std::unique_ptr<EncoderCache> cache;
    const Tensor hidden = model.forward(chunks[static_cast<size_t>(i)], training, dropout_rng,
                                        keep_caches ? &cache : nullptr);
    std::memcpy(chunk_embs.row(i), hidden.row(0), static_cast<size_t>(h) * sizeof(double));
    if (keep_caches) fwd.encoder_caches.push_back(std::move(cache));
  }
  fwd.logits = head.forward(chunk_embs, keep_caches ? &fwd.agg_cache : nullptr);
  return fwd;
}

void doc_aggregate_backward(EncoderModel& model, DocAggregatorHead& head, const DocForward& fwd,
                            const Tensor& d_logits) {
  const Tensor d_chunk_embs = head.backward(fwd.agg_cache, d_logits);
  const int64_t h = model.config().hidden_dim;
  for (int64_t i = 0; i < fwd.chunks_used; ++i) {
    const EncoderCache& cache = *fwd.encoder_caches[static_cast<size_t>(i)];
    Tensor d_hidden({static_cast<int64_t>(cache.ids.size()), h});
    std::memcpy(d_hidden.row(0), d_chunk_embs.row(i), static_cast<size_t>(h) * sizeof(double));
    model.backward(cache, d_hidden);
  }
}

// ---- fine-tuning loop ----

FinetuneResult finetune_loop(int64_t n_train, int64_t n_val,
                             const std::function<double(int64_t, double, Rng*)>& train_example,
                             const std::function<double(int64_t)>& eval_loss,
                             const std::function<double()>& eval_metric, train::Adam& optimizer,
                             const FinetuneConfig& config) {
  if (n_train < 1) raise(Errc::empty_dataset, "fine-tuning needs training examples");
  FinetuneResult result;

  std::vector<Tensor> best_snapshot;
  auto snapshot = [&] {
    best_snapshot.clear();
    for (Param* p : optimizer.params()) best_snapshot.push_back(p->value);
  };

  std::vector<int64_t> epoch_order;
  int64_t cached_epoch = -1;
  auto train_index = [&](int64_t slot) {
    const int64_t epoch = slot / n_train;
    const int64_t offset = slot % n_train;
    if (cached_epoch != epoch) {
      epoch_order.resize(static_cast<size_t>(n_train));
      for (int64_t i = 0; i < n_train; ++i) epoch_order[static_cast<size_t>(i)] = i;
      Rng rng(derive_seed(derive_seed(config.seed, "ft-shuffle"), std::to_string(epoch)));
      rng.shuffle(epoch_order);
      cached_epoch = epoch;
    }
    return epoch_order[static_cast<size_t>(offset)];
  };

  for (int64_t step = 0; step < config.steps; ++step) {
    Rng dropout_rng(derive_seed(derive_seed(config.seed, "ft-dropout"), std::to_string(step)));
    optimizer.zero_grad();
    double loss_sum = 0.0;
    const double scale = 1.0 / static_cast<double>(config.batch);
    for (int64_t b = 0; b < config.batch; ++b) {
      const int64_t idx = train_index(step * config.batch + b);
      loss_sum += train_example(idx, scale, &dropout_rng);
    }
    optimizer.step(config.lr);
    result.steps_run = step + 1;

    const bool validate = config.validation_interval > 0 &&
                          (step + 1) % config.validation_interval == 0 && n_val > 0;
    if (validate) {
      FinetunePoint point;
      point.step = step + 1;
      point.train_loss = loss_sum / static_cast<double>(config.batch);
      double vsum = 0.0;
      for (int64_t i = 0; i < n_val; ++i) vsum += eval_loss(i);
      point.val_loss = vsum / static_cast<double>(n_val);
      point.val_metric =
          eval_metric ? eval_metric() : std::numeric_limits<double>::quiet_NaN();
      result.history.push_back(point);
      if (point.val_loss < result.best_validation_loss) {
        result.best_validation_loss = point.val_loss;
        result.best_step = point.step;
        snapshot();
      }
      if (config.stop_when_metric_at_least.has_value() && eval_metric &&
          point.val_metric >= *config.stop_when_metric_at_least) {
        break;
      }
    }
  }

  if (!best_snapshot.empty()) {
    auto& params = optimizer.params();
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_snapshot[i];
  }
  return result;
}

// ---- task losses ----

double classify_example(EncoderModel& model, SeqClassifierHead& head,
                        std::span<const int32_t> ids, int32_t label, double scale, bool training,
                        Rng* dropout_rng, Tensor* logits_out) {
  std::unique_ptr<EncoderCache> cache;
  LinearCache head_cache;
  const Tensor hidden = model.forward(ids, training, dropout_rng, training ? &cache : nullptr);
  const Tensor logits = head.forward(hidden, training ? &head_cache : nullptr);
  Tensor d_logits;
  const double loss = cross_entropy(logits, 0, label, scale, d_logits);
  if (training) {
    const Tensor d_hidden = head.backward(head_cache, d_logits, hidden.dim(0));
    model.backward(*cache, d_hidden);
  }
  if (logits_out != nullptr) *logits_out = logits;
  return loss;
}

double api_example(ExtendedVocabModel& evm, std::span<const int32_t> ids, int64_t mask_position,
                   int32_t target, double scale, bool training, Rng* dropout_rng,
                   Tensor* logits_out) {
  ApiForward fwd = api_predict_forward(evm, ids, training, dropout_rng, training);
  int64_t row = -1;
  for (size_t m = 0; m < fwd.mask_positions.size(); ++m) {
    if (fwd.mask_positions[m] == mask_position) {
      row = static_cast<int64_t>(m);
      break;
    }
  }
  if (row < 0) raise(Errc::no_mask_present, "mask position not found in sequence");
  Tensor d_logits;
  const double loss = cross_entropy(fwd.logits, row, target, scale, d_logits);
  if (training) {
    const Tensor d_rows = evm.api_head.backward(fwd.head_cache, d_logits);
    const int64_t h = evm.model.config().hidden_dim;
    Tensor d_hidden({static_cast<int64_t>(fwd.encoder_cache->ids.size()), h});
    for (size_t m = 0; m < fwd.mask_positions.size(); ++m) {
      std::memcpy(d_hidden.row(fwd.mask_positions[m]), d_rows.row(static_cast<int64_t>(m)),
                  static_cast<size_t>(h) * sizeof(double));
    }
    evm.model.backward(*fwd.encoder_cache, d_hidden);
  }
  if (logits_out != nullptr) *logits_out = fwd.logits;
  return loss;
}

double doc_example(EncoderModel& model, DocAggregatorHead& head,
                   const std::vector<std::vector<int32_t>>& chunks, int32_t label, int64_t cap,
                   double scale, bool training, Rng* dropout_rng, Tensor* logits_out) {
  DocForward fwd = doc_aggregate_forward(model, head, chunks, cap, training, dropout_rng, training);
  Tensor d_logits;
  const double loss = cross_entropy(fwd.logits, 0, label, scale, d_logits);
  if (training) doc_aggregate_backward(model, head, fwd, d_logits);
  if (logits_out != nullptr) *logits_out = fwd.logits;
  return loss;
}

}  // namespace binfm::heads
