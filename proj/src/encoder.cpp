#include "binfm/nn/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace binfm::nn {

namespace {

constexpr uint64_t kCheckpointMagic = 0x31504B434D464E42ull;  // "BNFMCKP1"

}  // namespace

void rmsnorm_rows(const Tensor& x, const Tensor& w, double eps, Tensor& out,
                  std::vector<double>& inv_cache) {
  const int64_t rows = x.dim(0), h = x.dim(1);
  inv_cache.resize(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.row(r);
    double ms = 0.0;
    for (int64_t i = 0; i < h; ++i) ms += xr[i] * xr[i];
    ms /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(ms + eps);
    inv_cache[static_cast<size_t>(r)] = inv;
    double* yr = out.row(r);
    const double* wp = w.data();
    for (int64_t i = 0; i < h; ++i) yr[i] = xr[i] * wp[i] * inv;
  }
}

// Accumulates dw; returns dx into dx_out (overwritten).
void rmsnorm_rows_backward(const Tensor& x, const Tensor& w, const std::vector<double>& inv_cache,
                           const Tensor& dy, Tensor& dw, Tensor& dx_out) {
  const int64_t rows = x.dim(0), h = x.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.row(r);
    const double* dyr = dy.row(r);
    const double* wp = w.data();
    double* dwp = dw.data();
    double* dxr = dx_out.row(r);
    const double inv = inv_cache[static_cast<size_t>(r)];
    double s = 0.0;
    for (int64_t i = 0; i < h; ++i) s += dyr[i] * wp[i] * xr[i];
    const double scale = inv * inv * inv * s / static_cast<double>(h);
    for (int64_t i = 0; i < h; ++i) {
      dwp[i] += dyr[i] * xr[i] * inv;
      dxr[i] = dyr[i] * wp[i] * inv - xr[i] * scale;
    }
  }
}

namespace {

void apply_dropout(Tensor& x, double p, Rng& rng, Tensor& mask_out) {
  mask_out = Tensor(x.shape());
  const double keep = 1.0 - p;
  const double scale = 1.0 / keep;
  double* m = mask_out.data();
  double* v = x.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    m[i] = rng.uniform() < keep ? scale : 0.0;
    v[i] *= m[i];
  }
}

void mul_inplace(Tensor& x, const Tensor& mask) {
  if (mask.empty()) return;
  double* v = x.data();
  const double* m = mask.data();
  for (int64_t i = 0; i < x.size(); ++i) v[i] *= m[i];
}

}  // namespace

void EncoderConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || hidden_dim < 1 || ffn_dim < 1 || vocab_size < 1 ||
      max_seq_len < 1) {
    raise(Errc::invalid_config, "all size fields must be positive");
  }
  if (hidden_dim % n_heads != 0) raise(Errc::invalid_config, "hidden_dim not divisible by n_heads");
  if (head_dim() % 2 != 0) raise(Errc::invalid_config, "head_dim must be even for RoPE pairs");
  if (global_period < 1) raise(Errc::invalid_config, "global_period must be >= 1");
  if (local_window < 2) raise(Errc::invalid_config, "local_window must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) raise(Errc::invalid_config, "dropout must be in [0,1)");
  if (norm_eps <= 0.0) raise(Errc::invalid_config, "norm_eps must be positive");
  if (rope_theta <= 0.0) raise(Errc::invalid_config, "rope_theta must be positive");
}

std::string EncoderConfig::to_text() const {
  std::ostringstream out;
  out << "n_layers=" << n_layers << "\n";
  out << "n_heads=" << n_heads << "\n";
  out << "hidden_dim=" << hidden_dim << "\n";
  out << "ffn_dim=" << ffn_dim << "\n";
  out << "vocab_size=" << vocab_size << "\n";
  out << "max_seq_len=" << max_seq_len << "\n";
  out << "local_window=" << local_window << "\n";
  out << "global_period=" << global_period << "\n";
  out << "rope_theta=" << std::hexfloat << rope_theta << "\n";
  out << "dropout=" << std::hexfloat << dropout << "\n";
  out << "norm_eps=" << std::hexfloat << norm_eps << "\n";
  out << "bos_global=" << (bos_global ? 1 : 0) << "\n";
  return out.str();
}

EncoderConfig EncoderConfig::from_text(const std::string& text) {
  EncoderConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) raise(Errc::parse_error, "bad config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto as_i64 = [&val] { return static_cast<int64_t>(std::stoll(val)); };
    auto as_f64 = [&val] { return std::strtod(val.c_str(), nullptr); };
    if (key == "n_layers") cfg.n_layers = as_i64();
    else if (key == "n_heads") cfg.n_heads = as_i64();
    else if (key == "hidden_dim") cfg.hidden_dim = as_i64();
    else if (key == "ffn_dim") cfg.ffn_dim = as_i64();
    else if (key == "vocab_size") cfg.vocab_size = as_i64();
    else if (key == "max_seq_len") cfg.max_seq_len = as_i64();
    else if (key == "local_window") cfg.local_window = as_i64();
    else if (key == "global_period") cfg.global_period = as_i64();
    else if (key == "rope_theta") cfg.rope_theta = as_f64();
    else if (key == "dropout") cfg.dropout = as_f64();
    else if (key == "norm_eps") cfg.norm_eps = as_f64();
    else if (key == "bos_global") cfg.bos_global = as_i64() != 0;
    else raise(Errc::parse_error, "unknown config key: " + key);
  }
  cfg.validate();
  return cfg;
}

int64_t param_count(const EncoderConfig& config) {
  config.validate();
  const int64_t h = config.hidden_dim, f = config.ffn_dim;
  const int64_t per_layer = 4 * h * h + 2 * h * f + 2 * h;
  const int64_t embeddings = config.vocab_size * h;
  const int64_t mlm_head = 2 * h + h * h;  // LayerNorm affine + dense; projection is tied
  return embeddings + config.n_layers * per_layer + h + mlm_head;
}

std::vector<uint8_t> build_attention_mask(int64_t seq_len, int64_t layer_idx,
                                          const EncoderConfig& config,
                                          const std::vector<uint8_t>& is_pad) {
  if (seq_len > config.max_seq_len) raise(Errc::invalid_config, "seq_len exceeds max_seq_len");
  std::vector<uint8_t> mask(static_cast<size_t>(seq_len * seq_len), 0);
  const bool global = config.is_global_layer(layer_idx);
  const int64_t half = config.local_window / 2;
  auto pad = [&is_pad](int64_t p) {
    return !is_pad.empty() && is_pad[static_cast<size_t>(p)] != 0;
  };
  for (int64_t i = 0; i < seq_len; ++i) {
    if (pad(i)) continue;
    for (int64_t j = 0; j < seq_len; ++j) {
      if (pad(j)) continue;
      bool allow = global || std::llabs(i - j) <= half;
      if (!allow && config.bos_global && (i == 0 || j == 0)) allow = true;
      if (allow) mask[static_cast<size_t>(i * seq_len + j)] = 1;
    }
  }
  return mask;
}

void rope_apply(double* head_vec, int64_t head_dim, int64_t position, double theta, int direction) {
  for (int64_t t = 0; t * 2 < head_dim; ++t) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(t) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(direction) * static_cast<double>(position) * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = head_vec[2 * t];
    const double x1 = head_vec[2 * t + 1];
    head_vec[2 * t] = x0 * c - x1 * s;
    head_vec[2 * t + 1] = x0 * s + x1 * c;
  }
}

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> weight, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + eps);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * weight[i] * inv;
  return out;
}

EncoderModel::EncoderModel(EncoderConfig config, uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const int64_t h = config_.hidden_dim, f = config_.ffn_dim, v = config_.vocab_size;
  token_embeddings_ = Param("token_embeddings", {v, h});
  layers_.resize(static_cast<size_t>(config_.n_layers));
  for (int64_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerParams& lp = layers_[static_cast<size_t>(l)];
    lp.attn_norm = Param(p + "attn_norm", {h});
    lp.wq = Param(p + "wq", {h, h});
    lp.wk = Param(p + "wk", {h, h});
    lp.wv = Param(p + "wv", {h, h});
    lp.wo = Param(p + "wo", {h, h});
    lp.ffn_norm = Param(p + "ffn_norm", {h});
    lp.w_in = Param(p + "w_in", {h, f});
    lp.w_out = Param(p + "w_out", {f, h});
  }
  final_norm_ = Param("final_norm", {h});

  Rng rng(derive_seed(seed, "encoder-init"));
  init_truncated_normal(token_embeddings_.value, rng, 0.02);
  for (LayerParams& lp : layers_) {
    lp.attn_norm.value.fill(1.0);
    init_truncated_normal(lp.wq.value, rng, 0.02);
    init_truncated_normal(lp.wk.value, rng, 0.02);
    init_truncated_normal(lp.wv.value, rng, 0.02);
    init_truncated_normal(lp.wo.value, rng, 0.02);
    lp.ffn_norm.value.fill(1.0);
    init_truncated_normal(lp.w_in.value, rng, 0.02);
    init_truncated_normal(lp.w_out.value, rng, 0.02);
  }
  final_norm_.value.fill(1.0);
}

std::vector<Param*> EncoderModel::parameters() {
  std::vector<Param*> out;
  out.push_back(&token_embeddings_);
  for (LayerParams& lp : layers_) {
    for (Param* p : {&lp.attn_norm, &lp.wq, &lp.wk, &lp.wv, &lp.wo, &lp.ffn_norm, &lp.w_in,
                     &lp.w_out}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_norm_);
  return out;
}

void EncoderModel::zero_grad() {
  for (Param* p : parameters()) p->grad.zero();
}

void EncoderModel::extend_embeddings(int64_t extra_rows, uint64_t seed) {
  if (extra_rows < 0) raise(Errc::invalid_config, "extra_rows must be non-negative");
  const int64_t v = config_.vocab_size, h = config_.hidden_dim;
  Tensor grown({v + extra_rows, h});
  std::memcpy(grown.data(), token_embeddings_.value.data(),
              static_cast<size_t>(v * h) * sizeof(double));
  if (extra_rows > 0) {
    Rng rng(derive_seed(seed, "vocab-extend"));
    for (int64_t r = v; r < v + extra_rows; ++r) {
      for (int64_t c = 0; c < h; ++c) grown.at(r, c) = rng.truncated_normal(0.02);
    }
  }
  token_embeddings_.value = std::move(grown);
  token_embeddings_.grad = Tensor({v + extra_rows, h});
  config_.vocab_size = v + extra_rows;
}

Tensor EncoderModel::forward(std::span<const int32_t> ids, bool training, Rng* dropout_rng,
                             std::unique_ptr<EncoderCache>* cache_out) const {
  const int64_t s = static_cast<int64_t>(ids.size());
  const int64_t h = config_.hidden_dim, f = config_.ffn_dim;
  const int64_t nh = config_.n_heads, hd = config_.head_dim();
  if (s < 1) raise(Errc::empty_input, "encoder needs at least one token");
  if (s > config_.max_seq_len) raise(Errc::invalid_config, "sequence exceeds max_seq_len");
  for (int32_t id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      raise(Errc::id_out_of_range, "token id " + std::to_string(id));
    }
  }
  const bool use_dropout = training && config_.dropout > 0.0;
  if (use_dropout && dropout_rng == nullptr) {
    raise(Errc::invalid_config, "training with dropout requires an RNG");
  }

  auto cache = std::make_unique<EncoderCache>();
  cache->ids.assign(ids.begin(), ids.end());
  cache->is_pad.resize(static_cast<size_t>(s));
  for (int64_t i = 0; i < s; ++i) {
    cache->is_pad[static_cast<size_t>(i)] = ids[i] == kPadTokenId ? 1 : 0;
  }

  bool need_local = false, need_global = false;
  for (int64_t l = 0; l < config_.n_layers; ++l) {
    (config_.is_global_layer(l) ? need_global : need_local) = true;
  }
  if (need_local) cache->mask_local = build_attention_mask(s, 0, config_, cache->is_pad);
  if (need_global) {
    cache->mask_global = build_attention_mask(s, config_.global_period - 1, config_, cache->is_pad);
  }

  Tensor x({s, h});
  for (int64_t i = 0; i < s; ++i) {
    std::memcpy(x.row(i), token_embeddings_.value.row(ids[i]), static_cast<size_t>(h) * sizeof(double));
  }

  cache->layers.resize(static_cast<size_t>(config_.n_layers));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int64_t l = 0; l < config_.n_layers; ++l) {
    LayerCache& lc = cache->layers[static_cast<size_t>(l)];
    const LayerParams& lp = layers_[static_cast<size_t>(l)];
    const std::vector<uint8_t>& mask = cache->mask_for(config_, l);

    lc.x_in = x;
    lc.xn = Tensor({s, h});
    rmsnorm_rows(lc.x_in, lp.attn_norm.value, config_.norm_eps, lc.xn, lc.rms_inv);

    matmul(lc.xn, lp.wq.value, lc.q);
    matmul(lc.xn, lp.wk.value, lc.k);
    matmul(lc.xn, lp.wv.value, lc.v);
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t head = 0; head < nh; ++head) {
        rope_apply(lc.q.row(i) + head * hd, hd, i, config_.rope_theta);
        rope_apply(lc.k.row(i) + head * hd, hd, i, config_.rope_theta);
      }
    }

    lc.probs = Tensor({nh, s, s});
    lc.ctx = Tensor({s, h});
    std::vector<double> scores(static_cast<size_t>(s));
    for (int64_t head = 0; head < nh; ++head) {
      const int64_t off = head * hd;
      for (int64_t i = 0; i < s; ++i) {
        const uint8_t* mrow = mask.data() + i * s;
        const double* qi = lc.q.row(i) + off;
        double row_max = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < s; ++j) {
          if (!mrow[j]) continue;
          const double* kj = lc.k.row(j) + off;
          double dot = 0.0;
          for (int64_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
          scores[static_cast<size_t>(j)] = dot * scale;
          row_max = std::max(row_max, scores[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        if (std::isfinite(row_max)) {
          for (int64_t j = 0; j < s; ++j) {
            if (!mrow[j]) continue;
            const double e = std::exp(scores[static_cast<size_t>(j)] - row_max);
            lc.probs.at(head, i, j) = e;
            denom += e;
          }
        }
        double* ci = lc.ctx.row(i) + off;
        if (denom > 0.0) {
          for (int64_t j = 0; j < s; ++j) {
            if (!mrow[j]) continue;
            const double p = lc.probs.at(head, i, j) / denom;
            lc.probs.at(head, i, j) = p;
            const double* vj = lc.v.row(j) + off;
            for (int64_t d = 0; d < hd; ++d) ci[d] += p * vj[d];
          }
        }
        // fully masked rows (pads) keep a zero context vector
      }
    }

    Tensor attn_out;
    matmul(lc.ctx, lp.wo.value, attn_out);
    if (use_dropout) apply_dropout(attn_out, config_.dropout, *dropout_rng, lc.attn_drop);
    lc.x_mid = lc.x_in;
    add_inplace(lc.x_mid, attn_out);

    lc.xn2 = Tensor({s, h});
    rmsnorm_rows(lc.x_mid, lp.ffn_norm.value, config_.norm_eps, lc.xn2, lc.rms_inv2);
    matmul(lc.xn2, lp.w_in.value, lc.pre);
    lc.act = Tensor({s, f});
    for (int64_t i = 0; i < lc.pre.size(); ++i) lc.act[i] = gelu(lc.pre[i]);
    Tensor ffn_out;
    matmul(lc.act, lp.w_out.value, ffn_out);
    if (use_dropout) apply_dropout(ffn_out, config_.dropout, *dropout_rng, lc.ffn_drop);

    x = lc.x_mid;
    add_inplace(x, ffn_out);
  }

  cache->final_in = x;
  Tensor out({s, h});
  rmsnorm_rows(cache->final_in, final_norm_.value, config_.norm_eps, out, cache->rms_inv_final);

  if (cache_out != nullptr) {
    *cache_out = std::move(cache);
  }
  return out;
}

void EncoderModel::backward(const EncoderCache& cache, const Tensor& d_hidden) {
  const int64_t s = static_cast<int64_t>(cache.ids.size());
  const int64_t h = config_.hidden_dim;
  const int64_t nh = config_.n_heads, hd = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor dx({s, h});
  rmsnorm_rows_backward(cache.final_in, final_norm_.value, cache.rms_inv_final, d_hidden,
                        final_norm_.grad, dx);

  Tensor d_xn({s, h}), d_tmp({s, h});
  for (int64_t l = config_.n_layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[static_cast<size_t>(l)];
    LayerParams& lp = layers_[static_cast<size_t>(l)];
    const std::vector<uint8_t>& mask = cache.mask_for(config_, l);

    // FFN block: x_out = x_mid + drop(gelu(xn2 W_in) W_out)
    Tensor d_ffn_out = dx;
    mul_inplace(d_ffn_out, lc.ffn_drop);
    Tensor d_act;
    matmul_bt(d_ffn_out, lp.w_out.value, d_act);
    matmul_at_acc(lc.act, d_ffn_out, lp.w_out.grad);
    for (int64_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad(lc.pre[i]);
    Tensor d_xn2;
    matmul_bt(d_act, lp.w_in.value, d_xn2);
    matmul_at_acc(lc.xn2, d_act, lp.w_in.grad);
    rmsnorm_rows_backward(lc.x_mid, lp.ffn_norm.value, lc.rms_inv2, d_xn2, lp.ffn_norm.grad, d_tmp);
    Tensor d_x_mid = dx;  // residual branch
    add_inplace(d_x_mid, d_tmp);

    // Attention block: x_mid = x_in + drop(ctx Wo)
    Tensor d_attn_out = d_x_mid;
    mul_inplace(d_attn_out, lc.attn_drop);
    Tensor d_ctx;
    matmul_bt(d_attn_out, lp.wo.value, d_ctx);
    matmul_at_acc(lc.ctx, d_attn_out, lp.wo.grad);

    Tensor dq({s, h}), dk({s, h}), dv({s, h});
    std::vector<double> dp(static_cast<size_t>(s));
    for (int64_t head = 0; head < nh; ++head) {
      const int64_t off = head * hd;
      for (int64_t i = 0; i < s; ++i) {
        const uint8_t* mrow = mask.data() + i * s;
        const double* dci = d_ctx.row(i) + off;
        // dP and dV
        double dot_pp = 0.0;
        for (int64_t j = 0; j < s; ++j) {
          if (!mrow[j]) continue;
          const double p = lc.probs.at(head, i, j);
          const double* vj = lc.v.row(j) + off;
          double g = 0.0;
          for (int64_t d = 0; d < hd; ++d) g += dci[d] * vj[d];
          dp[static_cast<size_t>(j)] = g;
          dot_pp += g * p;
          double* dvj = dv.row(j) + off;
          for (int64_t d = 0; d < hd; ++d) dvj[d] += p * dci[d];
        }
        // softmax backward, then scores -> q,k
        double* dqi = dq.row(i) + off;
        const double* qi = lc.q.row(i) + off;
        for (int64_t j = 0; j < s; ++j) {
          if (!mrow[j]) continue;
          const double p = lc.probs.at(head, i, j);
          const double ds = p * (dp[static_cast<size_t>(j)] - dot_pp) * scale;
          if (ds == 0.0) continue;
          const double* kj = lc.k.row(j) + off;
          double* dkj = dk.row(j) + off;
          for (int64_t d = 0; d < hd; ++d) {
            dqi[d] += ds * kj[d];
            dkj[d] += ds * qi[d];
          }
        }
      }
    }
    // un-rotate
    for (int64_t i = 0; i < s; ++i) {
      for (int64_t head = 0; head < nh; ++head) {
        rope_apply(dq.row(i) + head * hd, hd, i, config_.rope_theta, -1);
        rope_apply(dk.row(i) + head * hd, hd, i, config_.rope_theta, -1);
      }
    }

    d_xn.zero();
    matmul_bt_acc(dq, lp.wq.value, d_xn);
    matmul_bt_acc(dk, lp.wk.value, d_xn);
    matmul_bt_acc(dv, lp.wv.value, d_xn);
    matmul_at_acc(lc.xn, dq, lp.wq.grad);
    matmul_at_acc(lc.xn, dk, lp.wk.grad);
    matmul_at_acc(lc.xn, dv, lp.wv.grad);

    rmsnorm_rows_backward(lc.x_in, lp.attn_norm.value, lc.rms_inv, d_xn, lp.attn_norm.grad, d_tmp);
    dx = d_x_mid;
    add_inplace(dx, d_tmp);
  }

  for (int64_t i = 0; i < s; ++i) {
    double* erow = token_embeddings_.grad.row(cache.ids[static_cast<size_t>(i)]);
    const double* dxr = dx.row(i);
    for (int64_t c = 0; c < h; ++c) erow[c] += dxr[c];
  }
}

// ---- MLM head ----

MlmHead::MlmHead(const EncoderConfig& config, uint64_t seed) : eps_(config.norm_eps) {
  const int64_t h = config.hidden_dim;
  norm_w_ = Param("mlm.norm_w", {h});
  norm_b_ = Param("mlm.norm_b", {h});
  dense_ = Param("mlm.dense", {h, h});
  norm_w_.value.fill(1.0);
  Rng rng(derive_seed(seed, "mlm-head-init"));
  init_truncated_normal(dense_.value, rng, 0.02);
}

std::vector<Param*> MlmHead::parameters() { return {&norm_w_, &norm_b_, &dense_}; }

void MlmHead::zero_grad() {
  for (Param* p : parameters()) p->grad.zero();
}

Tensor MlmHead::forward(const Tensor& hidden, const EncoderModel& model,
                        std::unique_ptr<MlmCache>* cache_out) const {
  const int64_t s = hidden.dim(0), h = hidden.dim(1);
  auto cache = std::make_unique<MlmCache>();
  cache->xhat = Tensor({s, h});
  cache->inv.resize(static_cast<size_t>(s));
  cache->ln_out = Tensor({s, h});
  for (int64_t r = 0; r < s; ++r) {
    const double* x = hidden.row(r);
    double mu = 0.0;
    for (int64_t i = 0; i < h; ++i) mu += x[i];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (int64_t i = 0; i < h; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(var + eps_);
    cache->inv[static_cast<size_t>(r)] = inv;
    double* xh = cache->xhat.row(r);
    double* lo = cache->ln_out.row(r);
    for (int64_t i = 0; i < h; ++i) {
      xh[i] = (x[i] - mu) * inv;
      lo[i] = xh[i] * norm_w_.value[i] + norm_b_.value[i];
    }
  }
  matmul(cache->ln_out, dense_.value, cache->dense_out);
  cache->gelu_out = Tensor({s, h});
  for (int64_t i = 0; i < cache->dense_out.size(); ++i) {
    cache->gelu_out[i] = gelu(cache->dense_out[i]);
  }
  Tensor logits;
  matmul_bt(cache->gelu_out, model.token_embeddings().value, logits);
  if (cache_out != nullptr) *cache_out = std::move(cache);
  return logits;
}

Tensor MlmHead::backward(const MlmCache& cache, const Tensor& d_logits, EncoderModel& model) {
  const int64_t s = cache.xhat.dim(0), h = cache.xhat.dim(1);
  // logits = gelu_out @ E^T (tied)
  Tensor d_gelu;
  matmul(d_logits, model.token_embeddings().value, d_gelu);
  matmul_at_acc(d_logits, cache.gelu_out, model.token_embeddings().grad);

  for (int64_t i = 0; i < d_gelu.size(); ++i) d_gelu[i] *= gelu_grad(cache.dense_out[i]);
  Tensor d_ln_out;
  matmul_bt(d_gelu, dense_.value, d_ln_out);
  matmul_at_acc(cache.ln_out, d_gelu, dense_.grad);

  Tensor d_hidden({s, h});
  for (int64_t r = 0; r < s; ++r) {
    const double* dlo = d_ln_out.row(r);
    const double* xh = cache.xhat.row(r);
    const double inv = cache.inv[static_cast<size_t>(r)];
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int64_t i = 0; i < h; ++i) {
      norm_w_.grad[i] += dlo[i] * xh[i];
      norm_b_.grad[i] += dlo[i];
      const double dxh = dlo[i] * norm_w_.value[i];
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xh[i];
    }
    mean_dxhat /= static_cast<double>(h);
    mean_dxhat_xhat /= static_cast<double>(h);
    double* dh = d_hidden.row(r);
    for (int64_t i = 0; i < h; ++i) {
      const double dxh = dlo[i] * norm_w_.value[i];
      dh[i] = inv * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
  }
  return d_hidden;
}

// ---- checkpoint io ----

void pack_parameters(const std::vector<Param*>& params, Checkpoint& ckpt) {
  for (const Param* p : params) ckpt.tensors.emplace_back(p->name, p->value);
}

void unpack_parameters(const Checkpoint& ckpt, const std::vector<Param*>& params) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : ckpt.tensors) by_name[name] = &tensor;
  for (Param* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) raise(Errc::corrupt_model_file, "checkpoint missing tensor " + p->name);
    if (it->second->shape() != p->value.shape()) {
      raise(Errc::corrupt_model_file, "checkpoint shape mismatch for " + p->name);
    }
    p->value = *it->second;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  BinWriter w;
  w.u64(kCheckpointMagic);
  w.u32(1);
  w.str(ckpt.config.to_text());
  std::string extra;
  for (const auto& [k, v] : ckpt.extra) extra += k + "=" + v + "\n";
  w.str(extra);
  w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(tensor.shape().size()));
    for (int64_t d : tensor.shape()) w.i64(d);
    for (int64_t i = 0; i < tensor.size(); ++i) w.f64(tensor[i]);
  }
  const auto& body = w.buffer();
  BinWriter tail;
  tail.u64(fnv1a64(std::string_view(reinterpret_cast<const char*>(body.data()), body.size())));
  std::vector<uint8_t> out = body;
  out.insert(out.end(), tail.buffer().begin(), tail.buffer().end());
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 8) raise(Errc::corrupt_model_file, "checkpoint too small");
  const size_t body_size = bytes.size() - 8;
  BinReader tail(bytes.data() + body_size, 8);
  const uint64_t expect = tail.u64();
  const uint64_t actual =
      fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), body_size));
  if (expect != actual) raise(Errc::corrupt_model_file, "checkpoint checksum mismatch");

  BinReader r(bytes.data(), body_size);
  if (r.u64() != kCheckpointMagic) raise(Errc::corrupt_model_file, "bad checkpoint magic");
  if (r.u32() != 1) raise(Errc::corrupt_model_file, "unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.config = EncoderConfig::from_text(r.str());
  const std::string extra = r.str();
  std::istringstream in(extra);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) raise(Errc::corrupt_model_file, "bad extra-state line");
    ckpt.extra[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const uint32_t n = r.u32();
  for (uint32_t t = 0; t < n; ++t) {
    std::string name = r.str();
    const uint32_t ndim = r.u32();
    std::vector<int64_t> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = r.i64();
    Tensor tensor(shape);
    for (int64_t i = 0; i < tensor.size(); ++i) tensor[i] = r.f64();
    ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  if (r.remaining() != 0) raise(Errc::corrupt_model_file, "trailing checkpoint bytes");
  return ckpt;
}

}  // namespace binfm::nn
