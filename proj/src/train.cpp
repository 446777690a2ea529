#include "binfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "binfm/bpe.hpp"

namespace binfm::train {

MaskingPlan sample_mlm_mask(std::span<const int32_t> sequence, double ratio, Rng& rng,
                            int32_t vocab_size) {
  std::vector<int64_t> maskable;
  for (size_t i = 0; i < sequence.size(); ++i) {
    if (!bpe::is_special(sequence[i])) maskable.push_back(static_cast<int64_t>(i));
  }
  if (maskable.empty()) {
    raise(Errc::no_maskable_tokens, "sequence contains only special tokens");
  }
  const int64_t n_random_ids = vocab_size - bpe::kNumSpecials;

  MaskingPlan plan;
  plan.corrupted.assign(sequence.begin(), sequence.end());
  auto select = [&](int64_t pos) {
    plan.selected_positions.push_back(pos);
    plan.targets.push_back(sequence[static_cast<size_t>(pos)]);
    const double u = rng.uniform();
    if (u < 0.8) {
      plan.replacement.push_back(Replacement::mask_token);
      plan.corrupted[static_cast<size_t>(pos)] = bpe::kMaskId;
    } else if (u < 0.9) {
      plan.replacement.push_back(Replacement::random_token);
      plan.corrupted[static_cast<size_t>(pos)] =
          bpe::kNumSpecials + static_cast<int32_t>(rng.below(static_cast<uint64_t>(n_random_ids)));
    } else {
      plan.replacement.push_back(Replacement::unchanged);
    }
  };

  for (int64_t pos : maskable) {
    if (rng.uniform() < ratio) select(pos);
  }
  if (plan.selected_positions.empty()) {
    // Bernoulli selection can come up empty on short sequences; the loss
    // needs at least one target, so force one uniformly.
    select(maskable[static_cast<size_t>(rng.below(maskable.size()))]);
  }
  return plan;
}

MlmLoss mlm_loss(const Tensor& logits, const MaskingPlan& plan, int64_t denom) {
  const int64_t vocab = logits.dim(1);
  MlmLoss out;
  out.d_logits = Tensor(logits.shape());
  out.count = static_cast<int64_t>(plan.selected_positions.size());
  if (denom <= 0) denom = out.count;

  std::vector<double> probs(static_cast<size_t>(vocab));
  for (size_t s = 0; s < plan.selected_positions.size(); ++s) {
    const int64_t pos = plan.selected_positions[s];
    const int32_t target = plan.targets[s];
    const double* lrow = logits.row(pos);
    double row_max = lrow[0];
    for (int64_t v = 1; v < vocab; ++v) row_max = std::max(row_max, lrow[v]);
    double sum = 0.0;
    for (int64_t v = 0; v < vocab; ++v) {
      probs[static_cast<size_t>(v)] = std::exp(lrow[v] - row_max);
      sum += probs[static_cast<size_t>(v)];
    }
    out.loss_sum += -(lrow[target] - row_max - std::log(sum));
    double* drow = out.d_logits.row(pos);
    const double inv = 1.0 / (sum * static_cast<double>(denom));
    for (int64_t v = 0; v < vocab; ++v) drow[v] = probs[static_cast<size_t>(v)] * inv;
    drow[target] -= 1.0 / static_cast<double>(denom);
  }
  return out;
}

Adam::Adam(std::vector<Param*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Param* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Param& p = *params_[pi];
    double* value = p.value.data();
    const double* grad = p.grad.data();
    double* m = m_[pi].data();
    double* v = v_[pi].data();
    for (int64_t i = 0; i < p.value.size(); ++i) {
      double g = grad[i];
      if (config_.weight_decay != 0.0) g += config_.weight_decay * value[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->grad.zero();
}

int64_t Schedule::warmup_steps() const {
  return static_cast<int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

double lr_at(int64_t step, const Schedule& schedule) {
  if (step < 0 || step > schedule.total_steps) {
    raise(Errc::step_out_of_range, "step " + std::to_string(step));
  }
  const int64_t warmup = schedule.warmup_steps();
  if (warmup > 0 && step < warmup) {
    return schedule.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const int64_t span = schedule.total_steps - warmup;
  if (span <= 0) return schedule.base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return schedule.base_lr * std::pow(1.0 - progress, schedule.decay_power);
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      raise(Errc::parse_error, "line " + std::to_string(line_no) + ": expected key=value");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string PretrainConfig::to_text() const {
  std::ostringstream out;
  out << "lr=" << std::hexfloat << schedule.base_lr << "\n";
  out << "warmup_fraction=" << std::hexfloat << schedule.warmup_fraction << "\n";
  out << "total_steps=" << schedule.total_steps << "\n";
  out << "decay_power=" << std::hexfloat << schedule.decay_power << "\n";
  out << "beta1=" << std::hexfloat << adam.beta1 << "\n";
  out << "beta2=" << std::hexfloat << adam.beta2 << "\n";
  out << "eps=" << std::hexfloat << adam.eps << "\n";
  out << "weight_decay=" << std::hexfloat << adam.weight_decay << "\n";
  out << "micro_batch=" << micro_batch << "\n";
  out << "accumulation=" << accumulation << "\n";
  out << "mask_ratio=" << std::hexfloat << mask_ratio << "\n";
  out << "validation_interval=" << validation_interval << "\n";
  out << "checkpoint_interval=" << checkpoint_interval << "\n";
  out << "validation_fraction=" << std::hexfloat << validation_fraction << "\n";
  out << "seed=" << seed << "\n";
  return out.str();
}

PretrainConfig PretrainConfig::from_text(const std::string& text) {
  PretrainConfig cfg;
  for (const auto& [key, val] : parse_kv_text(text)) {
    auto as_i64 = [&] { return static_cast<int64_t>(std::stoll(val)); };
    auto as_f64 = [&] { return std::strtod(val.c_str(), nullptr); };
    if (key == "lr") cfg.schedule.base_lr = as_f64();
    else if (key == "warmup_fraction") cfg.schedule.warmup_fraction = as_f64();
    else if (key == "total_steps") cfg.schedule.total_steps = as_i64();
    else if (key == "decay_power") cfg.schedule.decay_power = as_f64();
    else if (key == "beta1") cfg.adam.beta1 = as_f64();
    else if (key == "beta2") cfg.adam.beta2 = as_f64();
    else if (key == "eps") cfg.adam.eps = as_f64();
    else if (key == "weight_decay") cfg.adam.weight_decay = as_f64();
    else if (key == "micro_batch") cfg.micro_batch = as_i64();
    else if (key == "accumulation") cfg.accumulation = as_i64();
    else if (key == "mask_ratio") cfg.mask_ratio = as_f64();
    else if (key == "validation_interval") cfg.validation_interval = as_i64();
    else if (key == "checkpoint_interval") cfg.checkpoint_interval = as_i64();
    else if (key == "validation_fraction") cfg.validation_fraction = as_f64();
    else if (key == "seed") cfg.seed = static_cast<uint64_t>(std::stoull(val));
    else raise(Errc::parse_error, "unknown pretrain config key: " + key);
  }
  return cfg;
}

namespace {

/// CE over one sequence batch; gradients scaled by 1/denom flow into the
/// model when denom > 0 (skipped entirely for evaluation-only calls).
double masked_step(EncoderModel& model, MlmHead& head, const MaskingPlan& plan, int64_t denom,
                   bool training, Rng* dropout_rng, int64_t* count_out) {
  std::unique_ptr<nn::EncoderCache> enc_cache;
  std::unique_ptr<nn::MlmCache> head_cache;
  const Tensor hidden =
      model.forward(plan.corrupted, training, dropout_rng, denom > 0 ? &enc_cache : nullptr);
  const Tensor logits = head.forward(hidden, model, denom > 0 ? &head_cache : nullptr);
  MlmLoss loss = mlm_loss(logits, plan, denom);
  if (denom > 0) {
    const Tensor d_hidden = head.backward(*head_cache, loss.d_logits, model);
    model.backward(*enc_cache, d_hidden);
  }
  if (count_out != nullptr) *count_out = loss.count;
  return loss.loss_sum;
}

}  // namespace

double validation_loss(const std::vector<std::vector<int32_t>>& val_sequences, EncoderModel& model,
                       MlmHead& head, double mask_ratio, uint64_t seed) {
  if (val_sequences.empty()) return std::numeric_limits<double>::quiet_NaN();
  Rng rng(derive_seed(seed, "validation"));
  double loss_sum = 0.0;
  int64_t count = 0;
  for (const auto& seq : val_sequences) {
    const MaskingPlan plan = sample_mlm_mask(seq, mask_ratio, rng, model.config().vocab_size);
    int64_t n = 0;
    loss_sum += masked_step(model, head, plan, /*denom=*/0, /*training=*/false, nullptr, &n);
    count += n;
  }
  return loss_sum / static_cast<double>(count);
}

TrainState pretrain_loop(const std::vector<std::vector<int32_t>>& sequences, EncoderModel& model,
                         MlmHead& head, Adam& optimizer, const PretrainConfig& config,
                         TrainState state, std::vector<StepMetrics>* metrics_out) {
  if (sequences.empty()) raise(Errc::empty_dataset, "pretraining dataset is empty");
  const int64_t n_val =
      std::min<int64_t>(static_cast<int64_t>(sequences.size()) - 1,
                        static_cast<int64_t>(std::floor(config.validation_fraction *
                                                        static_cast<double>(sequences.size()))));
  const int64_t n_train = static_cast<int64_t>(sequences.size()) - n_val;
  std::vector<std::vector<int32_t>> val_slice(sequences.end() - n_val, sequences.end());

  const int64_t effective_batch = config.micro_batch * config.accumulation;
  std::vector<StepMetrics> metrics;

  // Deterministic epoch order: step k consumes effective_batch slots from
  // the shuffled indices of epoch (k*B / n_train). Keyed on (seed, epoch)
  // so a resumed run sees the same order as an uninterrupted one.
  std::vector<int64_t> epoch_order;
  int64_t cached_epoch = -1;
  auto train_index = [&](int64_t slot) {
    const int64_t epoch = slot / n_train;
    const int64_t offset = slot % n_train;
    if (cached_epoch != epoch) {
      epoch_order.resize(static_cast<size_t>(n_train));
      for (int64_t i = 0; i < n_train; ++i) epoch_order[static_cast<size_t>(i)] = i;
      Rng shuffle_rng(derive_seed(derive_seed(config.seed, "shuffle"), std::to_string(epoch)));
      shuffle_rng.shuffle(epoch_order);
      cached_epoch = epoch;
    }
    return epoch_order[static_cast<size_t>(offset)];
  };

  while (state.step < config.schedule.total_steps) {
    const int64_t step = state.step;
    Rng mask_rng(derive_seed(derive_seed(config.seed, "mask"), std::to_string(step)));
    Rng dropout_rng(derive_seed(derive_seed(config.seed, "dropout"), std::to_string(step)));

    std::vector<MaskingPlan> plans;
    plans.reserve(static_cast<size_t>(effective_batch));
    int64_t total_selected = 0;
    for (int64_t b = 0; b < effective_batch; ++b) {
      const int64_t idx = train_index(step * effective_batch + b);
      plans.push_back(sample_mlm_mask(sequences[static_cast<size_t>(idx)], config.mask_ratio,
                                      mask_rng, model.config().vocab_size));
      total_selected += static_cast<int64_t>(plans.back().selected_positions.size());
    }

    optimizer.zero_grad();
    head.zero_grad();
    double loss_sum = 0.0;
    for (const MaskingPlan& plan : plans) {
      loss_sum += masked_step(model, head, plan, total_selected, /*training=*/true, &dropout_rng,
                              nullptr);
    }
    const double lr = lr_at(std::min(step + 1, config.schedule.total_steps), config.schedule);
    optimizer.step(lr);
    state.step = step + 1;

    StepMetrics sm;
    sm.step = state.step;
    sm.train_loss = loss_sum / static_cast<double>(total_selected);
    sm.lr = lr;
    sm.val_loss = std::numeric_limits<double>::quiet_NaN();
    sm.val_perplexity = std::numeric_limits<double>::quiet_NaN();
    if (config.validation_interval > 0 && state.step % config.validation_interval == 0) {
      sm.val_loss = validation_loss(val_slice, model, head, config.mask_ratio, config.seed);
      sm.val_perplexity = std::exp(sm.val_loss);
      state.best_validation_loss = std::min(state.best_validation_loss, sm.val_loss);
    }
    metrics.push_back(sm);

    if (!config.checkpoint_path.empty() && config.checkpoint_interval > 0 &&
        state.step % config.checkpoint_interval == 0) {
      save_train_checkpoint(config.checkpoint_path, model, head, optimizer, state, config);
    }
  }

  if (!config.metrics_path.empty()) {
    std::ostringstream out;
    out << "# step\ttrain_loss\tval_loss\tval_perplexity\tlr\n";
    out.precision(17);
    for (const StepMetrics& sm : metrics) {
      out << sm.step << "\t" << sm.train_loss << "\t";
      if (std::isnan(sm.val_loss)) {
        out << "-\t-\t";
      } else {
        out << sm.val_loss << "\t" << sm.val_perplexity << "\t";
      }
      out << sm.lr << "\n";
    }
    write_file_atomic(config.metrics_path, out.str());
  }
  if (metrics_out != nullptr) *metrics_out = std::move(metrics);
  return state;
}

void save_train_checkpoint(const std::string& path, EncoderModel& model, MlmHead& head,
                           Adam& optimizer, const TrainState& state, const PretrainConfig& config) {
  nn::Checkpoint ckpt;
  ckpt.config = model.config();
  {
    std::ostringstream best;
    best << std::hexfloat << state.best_validation_loss;
    ckpt.extra["step"] = std::to_string(state.step);
    ckpt.extra["adam_step"] = std::to_string(optimizer.step_count());
    ckpt.extra["best_validation_loss"] = best.str();
    ckpt.extra["seed"] = std::to_string(config.seed);
  }
  std::vector<Param*> params = model.parameters();
  for (Param* p : head.parameters()) params.push_back(p);
  nn::pack_parameters(params, ckpt);
  auto& m = optimizer.first_moments();
  auto& v = optimizer.second_moments();
  for (size_t i = 0; i < optimizer.params().size(); ++i) {
    ckpt.tensors.emplace_back("adam.m." + optimizer.params()[i]->name, m[i]);
    ckpt.tensors.emplace_back("adam.v." + optimizer.params()[i]->name, v[i]);
  }
  nn::save_checkpoint(path, ckpt);
}

TrainState load_train_checkpoint(const std::string& path, EncoderModel& model, MlmHead& head,
                                 Adam& optimizer) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  if (!(ckpt.config == model.config())) {
    raise(Errc::corrupt_model_file, "checkpoint config does not match model config");
  }
  std::vector<Param*> params = model.parameters();
  for (Param* p : head.parameters()) params.push_back(p);
  nn::unpack_parameters(ckpt, params);

  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : ckpt.tensors) by_name[name] = &tensor;
  auto& m = optimizer.first_moments();
  auto& v = optimizer.second_moments();
  for (size_t i = 0; i < optimizer.params().size(); ++i) {
    const std::string& pname = optimizer.params()[i]->name;
    auto im = by_name.find("adam.m." + pname);
    auto iv = by_name.find("adam.v." + pname);
    if (im == by_name.end() || iv == by_name.end()) {
      raise(Errc::corrupt_model_file, "checkpoint missing Adam moments for " + pname);
    }
    m[i] = *im->second;
    v[i] = *iv->second;
  }

  TrainState state;
  state.step = std::stoll(ckpt.extra.at("step"));
  optimizer.restore(std::stoll(ckpt.extra.at("adam_step")));
  state.best_validation_loss = std::strtod(ckpt.extra.at("best_validation_loss").c_str(), nullptr);
  return state;
}

}  // namespace binfm::train
