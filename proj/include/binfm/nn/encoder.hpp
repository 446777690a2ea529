#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "binfm/nn/tensor.hpp"

namespace binfm::nn {

struct EncoderConfig {
  int64_t n_layers = 12;
  int64_t n_heads = 12;
  int64_t hidden_dim = 768;
  int64_t ffn_dim = 3072;
  int64_t vocab_size = 1029;
  int64_t max_seq_len = 1024;
  int64_t local_window = 128;   // total span; each side sees local_window/2
  int64_t global_period = 4;    // every global_period-th layer is full attention
  double rope_theta = 10000.0;
  double dropout = 0.1;
  double norm_eps = 1e-5;
  // Position 0 (<s>) attends and is attended globally on local layers.
  // Disabling is a test-only probe for locality checks.
  bool bos_global = true;

  int64_t head_dim() const { return hidden_dim / n_heads; }
  bool is_global_layer(int64_t layer_idx) const { return (layer_idx + 1) % global_period == 0; }
  void validate() const;

  std::string to_text() const;
  static EncoderConfig from_text(const std::string& text);
  bool operator==(const EncoderConfig&) const = default;
};

/// Exact learnable-scalar count for a configuration, tied matrices
/// counted once. Closed form; no allocation.
int64_t param_count(const EncoderConfig& config);

/// Row-major seq_len x seq_len boolean mask for one layer; 1 = query i
/// may attend key j. Global layers allow all non-pad pairs; local layers
/// allow |i-j| <= local_window/2 plus row 0 and column 0. Pad rows and
/// columns are always 0.
std::vector<uint8_t> build_attention_mask(int64_t seq_len, int64_t layer_idx,
                                          const EncoderConfig& config,
                                          const std::vector<uint8_t>& is_pad);

/// In-place rotary embedding of one head vector: dimension pair (2t,2t+1)
/// rotates by angle position * theta^(-2t/head_dim). direction=-1 applies
/// the inverse rotation (used in backward).
void rope_apply(double* head_vec, int64_t head_dim, int64_t position, double theta,
                int direction = +1);

/// x * weight / sqrt(mean(x^2) + eps), elementwise over the row.
std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> weight, double eps);

/// Row-wise RMSNorm over a 2-D tensor; caches 1/sqrt(ms+eps) per row.
void rmsnorm_rows(const Tensor& x, const Tensor& w, double eps, Tensor& out,
                  std::vector<double>& inv_cache);
/// Accumulates dw and writes dx for a cached rmsnorm_rows call.
void rmsnorm_rows_backward(const Tensor& x, const Tensor& w, const std::vector<double>& inv_cache,
                           const Tensor& dy, Tensor& dw, Tensor& dx_out);

struct LayerParams {
  Param attn_norm;  // H
  Param wq, wk, wv, wo;  // H x H each, bias-free
  Param ffn_norm;   // H
  Param w_in;       // H x F
  Param w_out;      // F x H
};

/// Token id of <pad>; fixed across every tokenizer (see the tokenizer's
/// special-token layout). Pad positions are fully masked both ways.
constexpr int32_t kPadTokenId = 2;

struct LayerCache {
  Tensor x_in, xn;
  std::vector<double> rms_inv;
  Tensor q, k, v;    // q,k post-RoPE
  Tensor probs;      // n_heads x S x S attention probabilities
  Tensor ctx;        // pre-Wo head concat
  Tensor attn_drop;  // dropout multipliers, empty when inactive
  Tensor x_mid, xn2;
  std::vector<double> rms_inv2;
  Tensor pre, act;   // FFN pre-activation / GELU output
  Tensor ffn_drop;
};

struct EncoderCache {
  std::vector<int32_t> ids;
  std::vector<uint8_t> is_pad;
  std::vector<uint8_t> mask_local, mask_global;
  std::vector<LayerCache> layers;
  Tensor final_in;
  std::vector<double> rms_inv_final;

  const std::vector<uint8_t>& mask_for(const EncoderConfig& cfg, int64_t layer) const {
    return cfg.is_global_layer(layer) ? mask_global : mask_local;
  }
};

/// The bidirectional encoder: embeddings, hybrid-attention transformer
/// stack, final norm. Owns every learnable tensor except task heads.
class EncoderModel {
public:
  EncoderModel(EncoderConfig config, uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  Param& token_embeddings() { return token_embeddings_; }
  const Param& token_embeddings() const { return token_embeddings_; }
  std::vector<LayerParams>& layers() { return layers_; }
  Param& final_norm() { return final_norm_; }

  /// Registry in checkpoint order: embeddings, per-layer tensors, final norm.
  std::vector<Param*> parameters();

  /// One hidden-state row per position. When training, dropout draws from
  /// dropout_rng; cache (if non-null) retains activations for backward.
  Tensor forward(std::span<const int32_t> ids, bool training, Rng* dropout_rng,
                 std::unique_ptr<EncoderCache>* cache_out) const;

  /// Accumulates parameter gradients for one cached forward pass.
  void backward(const EncoderCache& cache, const Tensor& d_hidden);

  void zero_grad();

  /// Grows the embedding matrix by extra_rows freshly initialized rows
  /// (existing rows preserved bit-exactly) and bumps vocab_size.
  void extend_embeddings(int64_t extra_rows, uint64_t seed);

private:
  EncoderConfig config_;
  Param token_embeddings_;
  std::vector<LayerParams> layers_;
  Param final_norm_;
};

struct MlmCache {
  Tensor xhat;  // LayerNorm normalized input
  std::vector<double> inv;
  Tensor ln_out, dense_out, gelu_out;
};

/// Tied-projection MLM head: LayerNorm -> dense HxH -> GELU -> logits
/// through the transpose of the token-embedding matrix.
class MlmHead {
public:
  MlmHead(const EncoderConfig& config, uint64_t seed);

  std::vector<Param*> parameters();

  Tensor forward(const Tensor& hidden, const EncoderModel& model,
                 std::unique_ptr<MlmCache>* cache_out) const;

  /// Accumulates head gradients plus the tied-embedding gradient; returns
  /// d_hidden for the encoder backward.
  Tensor backward(const MlmCache& cache, const Tensor& d_logits, EncoderModel& model);

  void zero_grad();

private:
  Param norm_w_, norm_b_;  // LayerNorm affine
  Param dense_;            // H x H, bias-free
  double eps_ = 1e-5;
};

// ---- checkpoint container ----
// Little-endian layout: magic u64, version u32, config text (length-
// prefixed), extra-state text (length-prefixed key=value lines),
// tensor count u32, then per tensor: name, ndim u32, dims i64[],
// f64 payload; finally a FNV-1a checksum of everything before it.

struct Checkpoint {
  EncoderConfig config;
  std::map<std::string, std::string> extra;           // scalar state (step, seed, ...)
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies registry tensors into / out of a checkpoint tensor list,
/// validating names and shapes.
void pack_parameters(const std::vector<Param*>& params, Checkpoint& ckpt);
void unpack_parameters(const Checkpoint& ckpt, const std::vector<Param*>& params);

}  // namespace binfm::nn
