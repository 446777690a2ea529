#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "binfm/nn/encoder.hpp"

namespace binfm::train {

using nn::EncoderConfig;
using nn::EncoderModel;
using nn::MlmHead;
using nn::Param;
using nn::Tensor;

enum class Replacement : uint8_t { mask_token, random_token, unchanged };

struct MaskingPlan {
  std::vector<int64_t> selected_positions;
  std::vector<Replacement> replacement;
  std::vector<int32_t> targets;      // original ids, recorded before corruption
  std::vector<int32_t> corrupted;    // full sequence with corruptions applied
};

/// Selects each non-special position independently with probability
/// `ratio`; selected positions get <mask>/random/unchanged at 80/10/10.
/// Random replacements draw uniformly from the non-special vocabulary.
/// Plans are sampled fresh every step (dynamic re-masking).
MaskingPlan sample_mlm_mask(std::span<const int32_t> sequence, double ratio, Rng& rng,
                            int32_t vocab_size);

/// Mean cross-entropy over exactly the selected positions, plus the
/// gradient w.r.t. logits (zero at unselected positions). `denom`
/// overrides the averaging count so gradient accumulation over
/// micro-batches reproduces the combined-batch update exactly.
struct MlmLoss {
  double loss_sum = 0.0;   // summed CE over selected positions
  int64_t count = 0;       // selected positions
  Tensor d_logits;
};

MlmLoss mlm_loss(const Tensor& logits, const MaskingPlan& plan, int64_t denom);

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;  // plain Adam by default
};

class Adam {
public:
  Adam(std::vector<Param*> params, AdamConfig config);

  void step(double lr);
  void zero_grad();

  int64_t step_count() const { return step_; }
  std::vector<Param*>& params() { return params_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void restore(int64_t step) { step_ = step; }

private:
  std::vector<Param*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  int64_t step_ = 0;
};

// ---- learning-rate schedule ----

struct Schedule {
  double base_lr = 1e-4;
  double warmup_fraction = 0.01;  // linear ramp over the first 1% of steps
  int64_t total_steps = 0;
  double decay_power = 1.0;       // polynomial decay exponent

  int64_t warmup_steps() const;
};

double lr_at(int64_t step, const Schedule& schedule);

// ---- pretraining loop ----

struct PretrainConfig {
  Schedule schedule;
  AdamConfig adam;
  int64_t micro_batch = 64;
  int64_t accumulation = 2;  // effective batch = micro_batch * accumulation
  double mask_ratio = 0.25;
  int64_t validation_interval = 2500;
  int64_t checkpoint_interval = 5000;
  double validation_fraction = 0.1;
  uint64_t seed = 0;
  std::string checkpoint_path;  // empty disables checkpointing
  std::string metrics_path;     // empty disables the metrics log

  std::string to_text() const;
  static PretrainConfig from_text(const std::string& text);
};

struct StepMetrics {
  int64_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;        // NaN when not evaluated this step
  double val_perplexity = 0.0;
  double lr = 0.0;
};

struct TrainState {
  int64_t step = 0;
  double best_validation_loss = std::numeric_limits<double>::infinity();
};

/// MLM pretraining with gradient accumulation, periodic validation and
/// checkpointing. Per-step mask RNG derives from (seed, step) so a
/// resumed run is bit-identical to an uninterrupted one.
TrainState pretrain_loop(const std::vector<std::vector<int32_t>>& sequences, EncoderModel& model,
                         MlmHead& head, Adam& optimizer, const PretrainConfig& config,
                         TrainState state = {},
                         std::vector<StepMetrics>* metrics_out = nullptr);

/// Validation cross-entropy (mean over masked positions) with masks fixed
/// by (seed, "validation") so successive evaluations are comparable.
double validation_loss(const std::vector<std::vector<int32_t>>& val_sequences, EncoderModel& model,
                       MlmHead& head, double mask_ratio, uint64_t seed);

// training-state checkpoints (parameters + Adam moments + counters)
void save_train_checkpoint(const std::string& path, EncoderModel& model, MlmHead& head,
                           Adam& optimizer, const TrainState& state, const PretrainConfig& config);
TrainState load_train_checkpoint(const std::string& path, EncoderModel& model, MlmHead& head,
                                 Adam& optimizer);

// ---- key=value config text ----

std::map<std::string, std::string> parse_kv_text(const std::string& text);

}  // namespace binfm::train
