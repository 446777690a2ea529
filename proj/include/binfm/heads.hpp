#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "binfm/nn/encoder.hpp"
#include "binfm/train.hpp"

namespace binfm::heads {

using nn::EncoderCache;
using nn::EncoderModel;
using nn::Param;
using nn::Tensor;

// ---- building blocks ----

struct LinearCache {
  Tensor input;
};

/// Dense layer with bias: out = x @ W^T + b, weights (out_dim x in_dim).
class Linear {
public:
  Linear() = default;
  Linear(const std::string& name, int64_t out_dim, int64_t in_dim, Rng& rng);

  Tensor forward(const Tensor& x, LinearCache* cache) const;
  Tensor backward(const LinearCache& cache, const Tensor& d_out);
  std::vector<Param*> parameters() { return {&w_, &b_}; }

private:
  Param w_, b_;
};

/// Softmax cross-entropy on one logit row; gradient scaled by `scale`.
double cross_entropy(const Tensor& logits, int64_t row, int32_t target, double scale,
                     Tensor& d_logits);

struct HeadConfig {
  int64_t hidden_dim = 768;
  int64_t n_heads = 12;          // aggregator attention heads
  int64_t ffn_hidden = 3072;
  int64_t n_classes = 2;
  double rope_theta = 10000.0;
  int64_t chunk_cap = 128;       // document chunks consumed, max
  int64_t cnn_kernel = 8;
  int64_t pool_kernel = 2;
  int64_t pool_stride = 2;
};

// ---- task heads ----

/// F-way classifier over the position-0 (<s>) hidden state.
class SeqClassifierHead {
public:
  SeqClassifierHead(int64_t n_classes, int64_t hidden_dim, uint64_t seed);

  /// hidden: S x H -> 1 x F logits from row 0 only.
  Tensor forward(const Tensor& hidden, LinearCache* cache) const;
  /// Returns d_hidden (zero everywhere except row 0).
  Tensor backward(const LinearCache& cache, const Tensor& d_logits, int64_t seq_len);
  std::vector<Param*> parameters() { return linear_.parameters(); }

private:
  Linear linear_;
  int64_t hidden_dim_ = 0;
};

/// Extended-vocabulary model for masked API prediction: pretrained
/// embeddings plus A fresh rows, and a dedicated A-way output head in
/// place of the MLM head.
struct ExtendedVocabModel {
  EncoderModel model;
  std::vector<std::string> api_names;
  Linear api_head;  // A x H
  int64_t base_vocab = 0;  // U, before extension
};

ExtendedVocabModel extend_vocab(const EncoderModel& pretrained,
                                std::vector<std::string> api_names, uint64_t seed);

struct ApiForward {
  std::vector<int64_t> mask_positions;
  Tensor logits;  // n_masks x A
  std::unique_ptr<EncoderCache> encoder_cache;
  LinearCache head_cache;
};

/// Encoder forward plus the API head applied at every <mask> position.
ApiForward api_predict_forward(ExtendedVocabModel& evm, std::span<const int32_t> ids,
                               bool training = false, Rng* dropout_rng = nullptr,
                               bool keep_caches = false);

/// RoPE multi-head self-attention over chunk embeddings (norm ->
/// attention -> residual), mean-pooled into an FFN classifier.
class DocAggregatorHead {
public:
  DocAggregatorHead(const HeadConfig& config, uint64_t seed);

  struct Cache {
    Tensor x, xn;
    std::vector<double> rms_inv;
    Tensor q, k, v;  // q,k post-RoPE
    Tensor probs;    // n_heads x n x n
    Tensor ctx;
    Tensor y;        // post-residual
    Tensor pooled;   // 1 x H
    LinearCache l1_cache, l2_cache;
    Tensor ffn_pre;  // 1 x ffn_hidden
  };

  /// chunk_embs: n x H -> 1 x n_classes logits.
  Tensor forward(const Tensor& chunk_embs, Cache* cache) const;
  /// Returns d_chunk_embs.
  Tensor backward(const Cache& cache, const Tensor& d_logits);
  std::vector<Param*> parameters();
  const HeadConfig& config() const { return config_; }

private:
  HeadConfig config_;
  Param norm_w_;
  Param wq_, wk_, wv_, wo_;
  Linear l1_, l2_;
};

/// Mean over chunk embeddings, then FFN classifier. Chunk-permutation
/// invariant by construction.
class AvgPoolHead {
public:
  AvgPoolHead(const HeadConfig& config, uint64_t seed);

  struct Cache {
    int64_t n_chunks = 0;
    Tensor pooled, ffn_pre;
    LinearCache l1_cache, l2_cache;
  };

  Tensor forward(const Tensor& chunk_embs, Cache* cache) const;
  Tensor backward(const Cache& cache, const Tensor& d_logits);
  std::vector<Param*> parameters();

private:
  HeadConfig config_;
  Linear l1_, l2_;
};

/// 1-D convolution over the chunk axis (kernel 8, stride 1), GELU,
/// ceil-mode max-pool (kernel 2, stride 2), frame mean, FFN classifier.
/// Documents shorter than kernel+1 chunks are left-padded with zero
/// embeddings so pooling always yields at least one frame.
class Cnn1dHead {
public:
  Cnn1dHead(const HeadConfig& config, uint64_t seed);

  struct Cache {
    int64_t orig_n = 0;
    Tensor padded;              // n' x H
    Tensor conv_pre, conv_act;  // F0 x H
    std::vector<int64_t> argmax;  // per (frame, channel) winning conv frame
    int64_t pooled_frames = 0;
    Tensor pooled_mean;  // 1 x H
    Tensor ffn_pre;
    LinearCache l1_cache, l2_cache;
  };

  Tensor forward(const Tensor& chunk_embs, Cache* cache) const;
  Tensor backward(const Cache& cache, const Tensor& d_logits);
  std::vector<Param*> parameters();

  /// Frames produced by conv+pool for n input chunks (after padding).
  int64_t output_frames(int64_t n_chunks) const;

private:
  HeadConfig config_;
  Param conv_w_;  // H_out x kernel x H_in
  Param conv_b_;  // H_out
  Linear l1_, l2_;
};

/// Appendix-style MLP baseline: independent token embeddings, average
/// pooling, 3072 -> ReLU -> dropout 0.2 -> 3072 -> ReLU -> F.
class MlpBaseline {
public:
  MlpBaseline(int64_t vocab_size, int64_t embed_dim, int64_t ffn_hidden, int64_t n_classes,
              uint64_t seed);

  struct Cache {
    std::vector<int32_t> ids;
    Tensor pooled;  // 1 x E
    Tensor pre1, act1, drop_mask, pre2, act2;
    LinearCache l1_cache, l2_cache, l3_cache;
  };

  Tensor forward(std::span<const int32_t> ids, bool training, Rng* dropout_rng,
                 Cache* cache) const;
  void backward(const Cache& cache, const Tensor& d_logits);
  std::vector<Param*> parameters();

private:
  Param embeddings_;
  Linear l1_, l2_, l3_;
  double dropout_ = 0.2;
};

// ---- document-level driver ----

struct DocForward {
  Tensor logits;  // 1 x n_classes
  int64_t chunks_used = 0;
  std::vector<std::unique_ptr<EncoderCache>> encoder_caches;
  DocAggregatorHead::Cache agg_cache;
};

/// Encodes the first min(n, cap) chunks independently, collects each
/// chunk's <s> embedding, and aggregates. Chunks beyond the cap have
/// exactly zero influence on output and gradients.
DocForward doc_aggregate_forward(EncoderModel& model, DocAggregatorHead& head,
                                 const std::vector<std::vector<int32_t>>& chunks, int64_t cap,
                                 bool training = false, Rng* dropout_rng = nullptr,
                                 bool keep_caches = false);

/// Backward for a kept-cache doc_aggregate_forward.
void doc_aggregate_backward(EncoderModel& model, DocAggregatorHead& head, const DocForward& fwd,
                            const Tensor& d_logits);

// ---- generic fine-tuning loop ----

struct FinetuneConfig {
  int64_t steps = 0;
  int64_t batch = 1;
  double lr = 1e-4;
  int64_t validation_interval = 0;  // 0 disables validation
  uint64_t seed = 0;
  // stops early once the extra validation metric reaches this value
  std::optional<double> stop_when_metric_at_least;
};

struct FinetunePoint {
  int64_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;  // NaN when no metric callback
};

struct FinetuneResult {
  int64_t best_step = 0;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  std::vector<FinetunePoint> history;
  int64_t steps_run = 0;
};

/// Joint Adam fine-tuning over whatever parameters the optimizer holds.
/// `train_example(idx, scale, rng)` accumulates gradients and returns the
/// example loss; `eval_loss(idx)` is gradient-free. The parameter
/// snapshot with the lowest validation loss is restored before returning.
FinetuneResult finetune_loop(int64_t n_train, int64_t n_val,
                             const std::function<double(int64_t, double, Rng*)>& train_example,
                             const std::function<double(int64_t)>& eval_loss,
                             const std::function<double()>& eval_metric, train::Adam& optimizer,
                             const FinetuneConfig& config);

// ---- shared task losses (accumulate gradients when training) ----

double classify_example(EncoderModel& model, SeqClassifierHead& head,
                        std::span<const int32_t> ids, int32_t label, double scale, bool training,
                        Rng* dropout_rng, Tensor* logits_out = nullptr);

double api_example(ExtendedVocabModel& evm, std::span<const int32_t> ids, int64_t mask_position,
                   int32_t target, double scale, bool training, Rng* dropout_rng,
                   Tensor* logits_out = nullptr);

double doc_example(EncoderModel& model, DocAggregatorHead& head,
                   const std::vector<std::vector<int32_t>>& chunks, int32_t label, int64_t cap,
                   double scale, bool training, Rng* dropout_rng, Tensor* logits_out = nullptr);

}  // namespace binfm::heads
