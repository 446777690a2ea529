// binfm - command-line front end for the binary-code foundation-model
// toolkit: code-section extraction, tokenizer training, dataset curation,
// MLM pretraining, task fine-tuning, and evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "binfm/bpe.hpp"
#include "binfm/common.hpp"
#include "binfm/corpus.hpp"
#include "binfm/heads.hpp"
#include "binfm/metrics.hpp"
#include "binfm/pe.hpp"
#include "binfm/train.hpp"

namespace fs = std::filesystem;
using namespace binfm;

namespace {

uint64_t digest_of(const std::vector<std::pair<std::string, std::string>>& settings) {
  std::string canon;
  for (const auto& [k, v] : settings) canon += k + "=" + v + "\n";
  return fnv1a64(canon);
}

std::string hex64(uint64_t v) {
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

std::vector<std::string> sorted_dir_files(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) raise(Errc::empty_input, "no files in " + dir);
  return files;
}

// ---- extract ----

struct ExtractArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
  bool all_exec_sections = false;
};

int cmd_extract(const ExtractArgs& args) {
  if (!args.out_dir.empty()) fs::create_directories(args.out_dir);
  for (const std::string& path : args.inputs) {
    const auto bytes = read_file_bytes(path);
    const pe::PeImage image = pe::parse_pe(bytes);
    bool multiple = false;
    const pe::CodeSection code = args.all_exec_sections
                                     ? pe::extract_executable_sections(image, bytes)
                                     : pe::extract_code_section(image, bytes, &multiple);
    if (multiple) {
      std::cerr << "warning: " << path << ": entry point inside multiple sections; using "
                << code.source_section_name << "\n";
    }
    std::cout << path << "\tsection=" << code.source_section_name << "\tx86_32="
              << (pe::is_x86_32(image) ? 1 : 0) << "\tbytes=" << code.bytes.size()
              << "\tentropy=" << code.entropy_bits << "\tmd5=" << md5_hex(code.bytes) << "\n";
    if (!args.out_dir.empty()) {
      const std::string out =
          (fs::path(args.out_dir) / fs::path(path).filename().replace_extension(".code")).string();
      write_file_atomic(out, code.bytes);
    }
  }
  return 0;
}

// ---- tokenizer commands ----

int cmd_tokenizer_train(const std::string& corpus_dir, int64_t vocab, int64_t window,
                        const std::string& out) {
  std::vector<std::vector<uint8_t>> windows;
  for (const std::string& file : sorted_dir_files(corpus_dir)) {
    const auto bytes = read_file_bytes(file);
    if (bytes.empty()) continue;
    for (auto& w : bpe::window_corpus(bytes, static_cast<size_t>(window))) {
      windows.push_back(std::move(w));
    }
  }
  const bpe::BpeModel model = bpe::train_bpe(windows, static_cast<int32_t>(vocab));
  bpe::save_model(model, out);
  std::cout << "trained base vocab " << model.base_vocab_size() << " (+"
            << bpe::kNumSpecials << " specials), " << model.merges().size() << " merges -> " << out
            << "\n";
  return 0;
}

int cmd_tokenizer_encode(const std::string& model_path, const std::string& input,
                         const std::string& out) {
  const bpe::BpeModel model = bpe::load_model(model_path);
  const auto bytes = read_file_bytes(input);
  const std::vector<int32_t> ids = model.encode(bytes);
  std::ostringstream text;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) text << " ";
    text << ids[i];
  }
  text << "\n";
  write_file_atomic(out, text.str());
  std::cout << bytes.size() << " bytes -> " << ids.size() << " tokens\n";
  return 0;
}

int cmd_tokenizer_decode(const std::string& model_path, const std::string& input,
                         const std::string& out) {
  const bpe::BpeModel model = bpe::load_model(model_path);
  std::istringstream in(read_file_text(input));
  std::vector<int32_t> ids;
  int64_t id = 0;
  while (in >> id) ids.push_back(static_cast<int32_t>(id));
  write_file_atomic(out, model.decode(ids));
  return 0;
}

// ---- dataset-split ----

struct SplitArgs {
  std::string manifest, out_manifest, out_assignments;
  int64_t pretrain_count = 0;
  int64_t cohorts = 3;
  bool no_dedup = false, no_cap = false;
  int64_t malicious_cap = 2, benign_cap = 10;
};

int cmd_dataset_split(const SplitArgs& args) {
  std::vector<corpus::SampleRecord> records = corpus::parse_manifest(read_file_text(args.manifest));
  if (!args.no_dedup) records = corpus::dedup_by_code_md5(records);
  if (!args.no_cap) records = corpus::cap_variants(records, args.malicious_cap, args.benign_cap);
  const auto assignments = corpus::temporal_split(records, args.pretrain_count, args.cohorts);

  const uint64_t digest = digest_of({{"pretrain_count", std::to_string(args.pretrain_count)},
                                     {"cohorts", std::to_string(args.cohorts)},
                                     {"dedup", args.no_dedup ? "0" : "1"},
                                     {"cap", args.no_cap ? "0" : "1"},
                                     {"malicious_cap", std::to_string(args.malicious_cap)},
                                     {"benign_cap", std::to_string(args.benign_cap)}});
  const std::string header = "# config_digest=" + hex64(digest) + "\n";
  write_file_atomic(args.out_manifest, header + corpus::write_manifest(records));
  write_file_atomic(args.out_assignments, header + corpus::write_assignments(assignments));
  std::cout << records.size() << " records curated, " << assignments.size() << " assignments\n";
  return 0;
}

// ---- dataset-build ----

struct BuildArgs {
  std::string task;
  std::string manifest, assignments, functions, tokenizer, out;
  double entropy_threshold = 7.0;
  int64_t chunk_length = 1024;
  std::vector<std::string> train_cohorts;
  int64_t min_freq = 100, per_api_cap = 100;
  double holdout_fraction = 0.5;
  int64_t min_train = 50, train_cap = 1000;
  uint64_t seed = 0;
};

int cmd_dataset_build(const BuildArgs& args) {
  const bpe::BpeModel tokenizer = bpe::load_model(args.tokenizer);
  corpus::DatasetFile out;
  out.task = args.task;
  out.chunk_length = args.chunk_length;
  out.config_digest = digest_of({{"task", args.task},
                                 {"chunk_length", std::to_string(args.chunk_length)},
                                 {"seed", std::to_string(args.seed)},
                                 {"entropy_threshold", std::to_string(args.entropy_threshold)},
                                 {"min_freq", std::to_string(args.min_freq)},
                                 {"per_api_cap", std::to_string(args.per_api_cap)},
                                 {"holdout_fraction", std::to_string(args.holdout_fraction)},
                                 {"min_train", std::to_string(args.min_train)},
                                 {"train_cap", std::to_string(args.train_cap)}});

  if (args.task == "pretrain" || args.task == "detection") {
    auto records = corpus::parse_manifest(read_file_text(args.manifest));
    auto assignments = corpus::parse_assignments(read_file_text(args.assignments));
    std::map<std::string, const corpus::SplitAssignment*> by_id;
    for (const auto& a : assignments) by_id[a.sample_id] = &a;
    const corpus::CodeLoader loader = [](const corpus::SampleRecord& r) {
      return read_file_bytes(r.code_path);
    };

    if (args.task == "pretrain") {
      std::set<std::string> train_cohorts(args.train_cohorts.begin(), args.train_cohorts.end());
      std::vector<corpus::SampleRecord> selected;
      for (const auto& r : records) {
        auto it = by_id.find(r.sample_id);
        if (it == by_id.end()) continue;
        const auto& a = *it->second;
        const bool in_m2 = a.cohort == "M2";
        const bool in_train = a.role == "train" &&
                              (train_cohorts.empty() ? a.cohort != "benign"
                                                     : train_cohorts.count(a.cohort) != 0);
        if (in_m2 || in_train) selected.push_back(r);
      }
      const corpus::PretrainSequenceSet set = corpus::build_pretrain_set(
          selected, tokenizer, args.entropy_threshold, args.chunk_length, loader);
      for (size_t i = 0; i < set.sequences.size(); ++i) {
        corpus::DatasetRecord rec;
        rec.sample_id = set.provenance[i];
        rec.split = corpus::kSplitTrain;
        rec.chunks.push_back(set.sequences[i]);
        out.records.push_back(std::move(rec));
      }
      out.label_names = {"sequence"};
    } else {
      out.label_names = {"benign", "malicious"};
      for (const auto& r : records) {
        auto it = by_id.find(r.sample_id);
        if (it == by_id.end()) continue;
        const auto& a = *it->second;
        if (a.cohort == "M2") continue;  // pretraining-only
        corpus::DatasetRecord rec;
        rec.sample_id = r.sample_id;
        rec.label = r.malicious ? 1 : 0;
        rec.tag = a.cohort;
        rec.split = a.role == "train"        ? corpus::kSplitTrain
                    : a.role == "validation" ? corpus::kSplitValidation
                                             : corpus::kSplitTest;
        const auto code = loader(r);
        if (code.empty()) continue;
        const auto ids = tokenizer.encode(code);
        rec.chunks = bpe::chunk(ids, args.chunk_length).chunks;
        out.records.push_back(std::move(rec));
      }
    }
  } else if (args.task == "api") {
    const auto functions = corpus::parse_function_records(read_file_text(args.functions));
    const corpus::ApiMaskDataset ds = corpus::build_api_mask_dataset(
        functions, args.min_freq, args.per_api_cap, tokenizer, args.chunk_length, args.seed);
    out.label_names = ds.api_names;
    auto emit = [&out](const std::vector<corpus::MaskedExample>& examples, uint8_t split) {
      for (const auto& ex : examples) {
        corpus::DatasetRecord rec;
        rec.sample_id = ex.function_id;
        rec.split = split;
        rec.label = ex.target;
        rec.aux = ex.mask_position;
        rec.chunks.push_back(ex.ids);
        out.records.push_back(std::move(rec));
      }
    };
    emit(ds.train, corpus::kSplitTrain);
    emit(ds.validation, corpus::kSplitValidation);
    emit(ds.test, corpus::kSplitTest);
  } else if (args.task == "function") {
    const auto functions = corpus::parse_function_records(read_file_text(args.functions));
    const corpus::RuleShiftSplits splits = corpus::build_rule_shift_splits(
        functions, args.holdout_fraction, args.min_train, args.train_cap, args.seed);
    out.label_names = splits.class_names;
    auto emit = [&](const std::vector<size_t>& idxs, uint8_t split) {
      for (size_t idx : idxs) {
        const corpus::FunctionRecord& f = functions[idx];
        corpus::DatasetRecord rec;
        rec.sample_id = f.function_id;
        rec.split = split;
        rec.label = splits.class_index.at(f.label);
        rec.tag = f.rule_id;
        rec.chunks.push_back(corpus::tokenize_function(f, tokenizer, args.chunk_length));
        out.records.push_back(std::move(rec));
      }
    };
    emit(splits.train, corpus::kSplitTrain);
    emit(splits.validation, corpus::kSplitValidation);
    emit(splits.normal_test, corpus::kSplitTest);
    emit(splits.rule_shift_test, corpus::kSplitShiftTest);
  } else {
    raise(Errc::invalid_config, "unknown dataset task: " + args.task);
  }

  corpus::save_dataset(out, args.out);
  std::cout << out.records.size() << " records (" << out.label_names.size() << " labels) -> "
            << args.out << "\n";
  return 0;
}

// ---- pretrain ----

struct PretrainArgs {
  std::string dataset, train_config, encoder_config, tokenizer, out, metrics, resume;
  int64_t steps_override = -1;
  int64_t seed_override = -1;
};

int cmd_pretrain(const PretrainArgs& args) {
  const corpus::DatasetFile ds = corpus::load_dataset(args.dataset);
  std::vector<std::vector<int32_t>> sequences;
  for (const auto& rec : ds.records) {
    for (const auto& c : rec.chunks) sequences.push_back(c);
  }

  train::PretrainConfig cfg = train::PretrainConfig::from_text(read_file_text(args.train_config));
  if (args.steps_override >= 0) cfg.schedule.total_steps = args.steps_override;
  if (args.seed_override >= 0) cfg.seed = static_cast<uint64_t>(args.seed_override);
  cfg.checkpoint_path = args.out;
  cfg.metrics_path = args.metrics;

  nn::EncoderConfig enc_cfg = nn::EncoderConfig::from_text(read_file_text(args.encoder_config));
  if (!args.tokenizer.empty()) {
    enc_cfg.vocab_size = bpe::load_model(args.tokenizer).vocab_size();
  }

  nn::EncoderModel model(enc_cfg, cfg.seed);
  nn::MlmHead head(enc_cfg, cfg.seed);
  std::vector<nn::Param*> params = model.parameters();
  for (nn::Param* p : head.parameters()) params.push_back(p);
  train::Adam optimizer(params, cfg.adam);

  train::TrainState state;
  if (!args.resume.empty()) {
    state = train::load_train_checkpoint(args.resume, model, head, optimizer);
  }
  state = train::pretrain_loop(sequences, model, head, optimizer, cfg, state);
  train::save_train_checkpoint(args.out, model, head, optimizer, state, cfg);
  std::cout << "pretrained " << state.step << " steps; best val loss "
            << state.best_validation_loss << " -> " << args.out << "\n";
  return 0;
}

// ---- finetune ----

struct FinetuneFileConfig {
  std::string task = "function";  // function | api | detection | function-mlp
  std::string head = "attention"; // detection heads: attention | avgpool | cnn
  int64_t steps = 100;
  int64_t batch = 8;
  double lr = 1e-4;
  int64_t validation_interval = 10;
  int64_t chunk_cap = 128;
  uint64_t seed = 0;
};

FinetuneFileConfig parse_finetune_config(const std::string& text) {
  FinetuneFileConfig cfg;
  for (const auto& [key, val] : train::parse_kv_text(text)) {
    if (key == "task") cfg.task = val;
    else if (key == "head") cfg.head = val;
    else if (key == "steps") cfg.steps = std::stoll(val);
    else if (key == "batch") cfg.batch = std::stoll(val);
    else if (key == "lr") cfg.lr = std::strtod(val.c_str(), nullptr);
    else if (key == "validation_interval") cfg.validation_interval = std::stoll(val);
    else if (key == "chunk_cap") cfg.chunk_cap = std::stoll(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else raise(Errc::parse_error, "unknown finetune config key: " + key);
  }
  return cfg;
}

struct FinetuneArgs {
  std::string dataset, config, checkpoint, out, predictions;
  bool scratch = false;
  std::string encoder_config;  // required with --scratch
  int64_t seed_override = -1;
};

std::vector<const corpus::DatasetRecord*> records_of(const corpus::DatasetFile& ds,
                                                     uint8_t split) {
  std::vector<const corpus::DatasetRecord*> out;
  for (const auto& r : ds.records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

std::string logits_csv(const heads::Tensor& logits, int64_t row) {
  std::ostringstream out;
  out.precision(17);
  for (int64_t c = 0; c < logits.dim(1); ++c) {
    if (c > 0) out << ",";
    out << logits.at(row, c);
  }
  return out.str();
}

int cmd_finetune(const FinetuneArgs& args) {
  const corpus::DatasetFile ds = corpus::load_dataset(args.dataset);
  FinetuneFileConfig fc = parse_finetune_config(read_file_text(args.config));
  if (args.seed_override >= 0) fc.seed = static_cast<uint64_t>(args.seed_override);

  nn::EncoderConfig enc_cfg;
  std::unique_ptr<nn::EncoderModel> model;
  if (args.scratch) {
    if (args.encoder_config.empty()) {
      raise(Errc::invalid_config, "--scratch requires --encoder-config");
    }
    enc_cfg = nn::EncoderConfig::from_text(read_file_text(args.encoder_config));
    model = std::make_unique<nn::EncoderModel>(enc_cfg, fc.seed);
  } else {
    const nn::Checkpoint ckpt = nn::load_checkpoint(args.checkpoint);
    enc_cfg = ckpt.config;
    model = std::make_unique<nn::EncoderModel>(enc_cfg, fc.seed);
    nn::unpack_parameters(ckpt, model->parameters());
  }

  const auto train_recs = records_of(ds, corpus::kSplitTrain);
  const auto val_recs = records_of(ds, corpus::kSplitValidation);
  auto test_recs = records_of(ds, corpus::kSplitTest);
  const auto shift_recs = records_of(ds, corpus::kSplitShiftTest);
  if (train_recs.empty()) raise(Errc::empty_dataset, "dataset has no training records");

  heads::FinetuneConfig ftc;
  ftc.steps = fc.steps;
  ftc.batch = fc.batch;
  ftc.lr = fc.lr;
  ftc.validation_interval = fc.validation_interval;
  ftc.seed = fc.seed;

  std::ostringstream preds;
  preds << "# config_digest=" << hex64(ds.config_digest) << "\n";
  preds.precision(17);

  if (fc.task == "api") {
    heads::ExtendedVocabModel evm = heads::extend_vocab(*model, ds.label_names, fc.seed);
    std::vector<nn::Param*> params = evm.model.parameters();
    for (nn::Param* p : evm.api_head.parameters()) params.push_back(p);
    train::Adam opt(params, {});
    auto run = [&](const corpus::DatasetRecord& r, double scale, bool training, Rng* rng,
                   heads::Tensor* logits) {
      return heads::api_example(evm, r.chunks[0], r.aux, r.label, scale, training, rng, logits);
    };
    heads::finetune_loop(
        static_cast<int64_t>(train_recs.size()), static_cast<int64_t>(val_recs.size()),
        [&](int64_t i, double scale, Rng* rng) {
          return run(*train_recs[static_cast<size_t>(i)], scale, true, rng, nullptr);
        },
        [&](int64_t i) { return run(*val_recs[static_cast<size_t>(i)], 1.0, false, nullptr, nullptr); },
        nullptr, opt, ftc);
    for (const auto* r : test_recs) {
      heads::Tensor logits;
      run(*r, 1.0, false, nullptr, &logits);
      preds << r->sample_id << "\t" << r->label << "\t" << logits_csv(logits, 0) << "\n";
    }
  } else if (fc.task == "function" || fc.task == "function-mlp") {
    const int64_t n_classes = static_cast<int64_t>(ds.label_names.size());
    if (fc.task == "function-mlp") {
      heads::MlpBaseline mlp(enc_cfg.vocab_size, enc_cfg.hidden_dim, 3072, n_classes, fc.seed);
      train::Adam opt(mlp.parameters(), {});
      auto run = [&](const corpus::DatasetRecord& r, double scale, bool training, Rng* rng,
                     heads::Tensor* logits_out) {
        heads::MlpBaseline::Cache cache;
        const heads::Tensor logits = mlp.forward(r.chunks[0], training, rng, &cache);
        heads::Tensor d_logits;
        const double loss = heads::cross_entropy(logits, 0, r.label, scale, d_logits);
        if (training) mlp.backward(cache, d_logits);
        if (logits_out != nullptr) *logits_out = logits;
        return loss;
      };
      heads::finetune_loop(
          static_cast<int64_t>(train_recs.size()), static_cast<int64_t>(val_recs.size()),
          [&](int64_t i, double scale, Rng* rng) {
            return run(*train_recs[static_cast<size_t>(i)], scale, true, rng, nullptr);
          },
          [&](int64_t i) {
            return run(*val_recs[static_cast<size_t>(i)], 1.0, false, nullptr, nullptr);
          },
          nullptr, opt, ftc);
      for (const auto* r : test_recs) {
        heads::Tensor logits;
        run(*r, 1.0, false, nullptr, &logits);
        preds << r->sample_id << "\t" << r->label << "\tnormal\t" << logits_csv(logits, 0) << "\n";
      }
      for (const auto* r : shift_recs) {
        heads::Tensor logits;
        run(*r, 1.0, false, nullptr, &logits);
        preds << r->sample_id << "\t" << r->label << "\tshift\t" << logits_csv(logits, 0) << "\n";
      }
    } else {
      heads::SeqClassifierHead head(n_classes, enc_cfg.hidden_dim, fc.seed);
      std::vector<nn::Param*> params = model->parameters();
      for (nn::Param* p : head.parameters()) params.push_back(p);
      train::Adam opt(params, {});
      auto run = [&](const corpus::DatasetRecord& r, double scale, bool training, Rng* rng,
                     heads::Tensor* logits) {
        return heads::classify_example(*model, head, r.chunks[0], r.label, scale, training, rng,
                                       logits);
      };
      heads::finetune_loop(
          static_cast<int64_t>(train_recs.size()), static_cast<int64_t>(val_recs.size()),
          [&](int64_t i, double scale, Rng* rng) {
            return run(*train_recs[static_cast<size_t>(i)], scale, true, rng, nullptr);
          },
          [&](int64_t i) {
            return run(*val_recs[static_cast<size_t>(i)], 1.0, false, nullptr, nullptr);
          },
          nullptr, opt, ftc);
      for (const auto* r : test_recs) {
        heads::Tensor logits;
        run(*r, 1.0, false, nullptr, &logits);
        preds << r->sample_id << "\t" << r->label << "\tnormal\t" << logits_csv(logits, 0) << "\n";
      }
      for (const auto* r : shift_recs) {
        heads::Tensor logits;
        run(*r, 1.0, false, nullptr, &logits);
        preds << r->sample_id << "\t" << r->label << "\tshift\t" << logits_csv(logits, 0) << "\n";
      }
    }
  } else if (fc.task == "detection") {
    heads::HeadConfig hc;
    hc.hidden_dim = enc_cfg.hidden_dim;
    hc.n_heads = enc_cfg.n_heads;
    hc.chunk_cap = fc.chunk_cap;
    hc.n_classes = 2;
    std::unique_ptr<heads::DocAggregatorHead> attn_head;
    std::unique_ptr<heads::AvgPoolHead> avg_head;
    std::unique_ptr<heads::Cnn1dHead> cnn_head;
    std::vector<nn::Param*> params = model->parameters();
    if (fc.head == "attention") {
      attn_head = std::make_unique<heads::DocAggregatorHead>(hc, fc.seed);
      for (nn::Param* p : attn_head->parameters()) params.push_back(p);
    } else if (fc.head == "avgpool") {
      avg_head = std::make_unique<heads::AvgPoolHead>(hc, fc.seed);
      for (nn::Param* p : avg_head->parameters()) params.push_back(p);
    } else if (fc.head == "cnn") {
      cnn_head = std::make_unique<heads::Cnn1dHead>(hc, fc.seed);
      for (nn::Param* p : cnn_head->parameters()) params.push_back(p);
    } else {
      raise(Errc::invalid_config, "unknown detection head: " + fc.head);
    }
    train::Adam opt(params, {});

    auto run = [&](const corpus::DatasetRecord& r, double scale, bool training, Rng* rng,
                   heads::Tensor* logits_out) -> double {
      if (attn_head != nullptr) {
        return heads::doc_example(*model, *attn_head, r.chunks, r.label, fc.chunk_cap, scale,
                                  training, rng, logits_out);
      }
      // pooled-variant heads share the encode-then-aggregate path
      const int64_t use = std::min<int64_t>(static_cast<int64_t>(r.chunks.size()), fc.chunk_cap);
      heads::Tensor chunk_embs({use, enc_cfg.hidden_dim});
      std::vector<std::unique_ptr<nn::EncoderCache>> caches;
      for (int64_t i = 0; i < use; ++i) {
        std::unique_ptr<nn::EncoderCache> cache;
        const heads::Tensor hidden = model->forward(r.chunks[static_cast<size_t>(i)], training,
                                                    rng, training ? &cache : nullptr);
        std::memcpy(chunk_embs.row(i), hidden.row(0),
                    static_cast<size_t>(enc_cfg.hidden_dim) * sizeof(double));
        if (training) caches.push_back(std::move(cache));
      }
      heads::Tensor logits, d_logits;
      heads::AvgPoolHead::Cache avg_cache;
      heads::Cnn1dHead::Cache cnn_cache;
      if (avg_head != nullptr) {
        logits = avg_head->forward(chunk_embs, training ? &avg_cache : nullptr);
      } else {
        logits = cnn_head->forward(chunk_embs, training ? &cnn_cache : nullptr);
      }
      const double loss = heads::cross_entropy(logits, 0, r.label, scale, d_logits);
      if (training) {
        const heads::Tensor d_embs = avg_head != nullptr
                                         ? avg_head->backward(avg_cache, d_logits)
                                         : cnn_head->backward(cnn_cache, d_logits);
        for (int64_t i = 0; i < use; ++i) {
          heads::Tensor d_hidden(
              {static_cast<int64_t>(r.chunks[static_cast<size_t>(i)].size()), enc_cfg.hidden_dim});
          std::memcpy(d_hidden.row(0), d_embs.row(i),
                      static_cast<size_t>(enc_cfg.hidden_dim) * sizeof(double));
          model->backward(*caches[static_cast<size_t>(i)], d_hidden);
        }
      }
      if (logits_out != nullptr) *logits_out = logits;
      return loss;
    };

    heads::finetune_loop(
        static_cast<int64_t>(train_recs.size()), static_cast<int64_t>(val_recs.size()),
        [&](int64_t i, double scale, Rng* rng) {
          return run(*train_recs[static_cast<size_t>(i)], scale, true, rng, nullptr);
        },
        [&](int64_t i) { return run(*val_recs[static_cast<size_t>(i)], 1.0, false, nullptr, nullptr); },
        nullptr, opt, ftc);
    for (const auto* r : test_recs) {
      heads::Tensor logits;
      run(*r, 1.0, false, nullptr, &logits);
      // malicious probability from the 2-way softmax
      const double m = std::max(logits.at(0, 0), logits.at(0, 1));
      const double e0 = std::exp(logits.at(0, 0) - m), e1 = std::exp(logits.at(0, 1) - m);
      preds << r->sample_id << "\t" << r->label << "\t" << r->tag << "\t" << e1 / (e0 + e1) << "\n";
    }
  } else {
    raise(Errc::invalid_config, "unknown finetune task: " + fc.task);
  }

  if (!args.predictions.empty()) write_file_atomic(args.predictions, preds.str());
  if (!args.out.empty()) {
    nn::Checkpoint ckpt;
    ckpt.config = enc_cfg;
    ckpt.extra["task"] = fc.task;
    ckpt.extra["config_digest"] = hex64(ds.config_digest);
    nn::pack_parameters(model->parameters(), ckpt);
    nn::save_checkpoint(args.out, ckpt);
  }
  std::cout << "finetune " << fc.task << " done\n";
  return 0;
}

// ---- evaluate ----

struct EvalArgs {
  std::string scores, predictions, out;
  double target_fpr = 0.001;
  std::vector<int64_t> topk = {1, 3, 5};
};

int cmd_evaluate(const EvalArgs& args) {
  std::vector<std::pair<std::string, metrics::TaskReport>> sections;
  uint64_t digest = digest_of({{"target_fpr", std::to_string(args.target_fpr)}});

  if (!args.scores.empty()) {
    const auto records = metrics::parse_score_lines(read_file_text(args.scores));
    metrics::ScoredSet set;
    for (const auto& r : records) {
      set.scores.push_back(r.score);
      set.labels.push_back(r.label);
    }
    metrics::TaskReport report;
    report.values.emplace_back("auc", metrics::roc_auc(set));
    report.operating_point = metrics::tpr_at_fpr(set, args.target_fpr);
    report.values.emplace_back("tpr_at_fpr", report.operating_point.tpr);
    report.has_operating_point = true;
    sections.emplace_back("detection", std::move(report));
  }

  if (!args.predictions.empty()) {
    // lines: sample_id  label  tag  logit,logit,...
    std::istringstream in(read_file_text(args.predictions));
    std::string line;
    std::map<std::string, std::pair<std::vector<std::vector<double>>, std::vector<int>>> by_tag;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string id, tag, csv;
      int label = 0;
      if (!(ls >> id >> label >> tag >> csv)) raise(Errc::parse_error, "bad prediction line");
      std::vector<double> logits;
      std::istringstream cs(csv);
      std::string item;
      while (std::getline(cs, item, ',')) logits.push_back(std::strtod(item.c_str(), nullptr));
      by_tag[tag].first.push_back(std::move(logits));
      by_tag[tag].second.push_back(label);
      by_tag["all"].first.push_back(by_tag[tag].first.back());
      by_tag["all"].second.push_back(label);
    }
    for (const auto& [tag, data] : by_tag) {
      const auto& [logit_sets, labels] = data;
      metrics::TaskReport report;
      for (int64_t k : args.topk) {
        report.values.emplace_back("top" + std::to_string(k),
                                   metrics::topk_accuracy(logit_sets, labels, k));
      }
      std::vector<int> argmax;
      for (const auto& logits : logit_sets) {
        int best = 0;
        for (size_t c = 1; c < logits.size(); ++c) {
          if (logits[c] > logits[static_cast<size_t>(best)]) best = static_cast<int>(c);
        }
        argmax.push_back(best);
      }
      report.values.emplace_back("weighted_f1", metrics::weighted_f1(argmax, labels));
      sections.emplace_back(tag, std::move(report));
    }
  }

  const std::string report = metrics::render_report(sections, {}, digest);
  if (args.out.empty()) {
    std::cout << report;
  } else {
    write_file_atomic(args.out, report);
  }
  return 0;
}

// ---- inspect ----

int cmd_inspect(const std::string& model_path, const std::string& checkpoint_path,
                const std::string& dataset_path, const std::string& manifest_path) {
  if (!model_path.empty()) {
    const bpe::BpeModel model = bpe::load_model(model_path);
    std::cout << "tokenizer: base_vocab=" << model.base_vocab_size()
              << " vocab=" << model.vocab_size() << " merges=" << model.merges().size() << "\n";
    const auto& merges = model.merges();
    for (size_t i = 0; i < merges.size() && i < 10; ++i) {
      std::cout << "  merge[" << i << "]: " << merges[i].left << "+" << merges[i].right << " -> "
                << merges[i].merged << "\n";
    }
  }
  if (!checkpoint_path.empty()) {
    const nn::Checkpoint ckpt = nn::load_checkpoint(checkpoint_path);
    std::cout << "checkpoint config:\n" << ckpt.config.to_text();
    for (const auto& [k, v] : ckpt.extra) std::cout << "  " << k << "=" << v << "\n";
    int64_t total = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
      if (name.rfind("adam.", 0) != 0) total += tensor.size();
    }
    std::cout << "tensors=" << ckpt.tensors.size() << " learnable_scalars=" << total << "\n";
  }
  if (!dataset_path.empty()) {
    const corpus::DatasetFile ds = corpus::load_dataset(dataset_path);
    std::map<int, int64_t> by_split;
    for (const auto& r : ds.records) ++by_split[r.split];
    std::cout << "dataset task=" << ds.task << " labels=" << ds.label_names.size()
              << " chunk_length=" << ds.chunk_length << " records=" << ds.records.size() << "\n";
    for (const auto& [split, n] : by_split) {
      static const char* names[] = {"train", "validation", "test", "rule_shift_test"};
      std::cout << "  " << names[split] << "=" << n << "\n";
    }
  }
  if (!manifest_path.empty()) {
    const auto records = corpus::parse_manifest(read_file_text(manifest_path));
    int64_t mal = 0;
    for (const auto& r : records) mal += r.malicious ? 1 : 0;
    std::cout << "manifest records=" << records.size() << " malicious=" << mal
              << " benign=" << records.size() - mal << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"binfm: byte-level BPE tokenization, hybrid-attention MLM "
               "pretraining, and downstream task heads for PE code sections"};
  app.require_subcommand(1);

  ExtractArgs extract_args;
  auto* extract = app.add_subcommand(
      "extract", "Parse 32-bit PE files and extract the entry-point code section");
  extract->add_option("files", extract_args.inputs, "PE files to process")->required();
  extract->add_option("--out-dir", extract_args.out_dir, "directory for .code byte files");
  extract->add_flag("--all-exec-sections", extract_args.all_exec_sections,
                    "concatenate every readable+executable section instead");

  std::string tt_corpus, tt_out;
  int64_t tt_vocab = 1024, tt_window = 512;
  auto* ttrain = app.add_subcommand("tokenizer-train",
                                    "Train the byte-level BPE tokenizer on a corpus directory");
  ttrain->add_option("--corpus", tt_corpus, "directory of raw code-byte files")->required();
  ttrain->add_option("--vocab", tt_vocab, "target base vocabulary (bytes + merges)");
  ttrain->add_option("--window", tt_window, "training window size in bytes");
  ttrain->add_option("--out", tt_out, "output tokenizer model file")->required();

  std::string te_model, te_in, te_out;
  auto* tencode =
      app.add_subcommand("tokenizer-encode", "Encode a byte file to token-id text");
  tencode->add_option("--model", te_model, "tokenizer model file")->required();
  tencode->add_option("--input", te_in, "input byte file")->required();
  tencode->add_option("--out", te_out, "output token-id text file")->required();

  std::string td_model, td_in, td_out;
  auto* tdecode =
      app.add_subcommand("tokenizer-decode", "Decode token-id text back to bytes");
  tdecode->add_option("--model", td_model, "tokenizer model file")->required();
  tdecode->add_option("--input", td_in, "input token-id text file")->required();
  tdecode->add_option("--out", td_out, "output byte file")->required();

  SplitArgs split_args;
  auto* dsplit = app.add_subcommand(
      "dataset-split", "Dedup, cap variants, and assign temporal 50/10/40 splits");
  dsplit->add_option("--manifest", split_args.manifest, "input manifest")->required();
  dsplit->add_option("--out-manifest", split_args.out_manifest, "curated manifest")->required();
  dsplit->add_option("--out-assignments", split_args.out_assignments, "split assignments")
      ->required();
  dsplit->add_option("--pretrain-count", split_args.pretrain_count,
                     "oldest malicious samples reserved for pretraining (M2)");
  dsplit->add_option("--cohorts", split_args.cohorts, "number of temporal cohorts");
  dsplit->add_flag("--no-dedup", split_args.no_dedup, "skip MD5 deduplication");
  dsplit->add_flag("--no-cap", split_args.no_cap, "skip variant capping");
  dsplit->add_option("--malicious-cap", split_args.malicious_cap, "per-group malicious cap");
  dsplit->add_option("--benign-cap", split_args.benign_cap, "per-group benign cap");

  BuildArgs build_args;
  auto* dbuild = app.add_subcommand("dataset-build",
                                    "Build a task dataset (pretrain|api|function|detection)");
  dbuild->add_option("--task", build_args.task, "pretrain|api|function|detection")->required();
  dbuild->add_option("--manifest", build_args.manifest, "curated manifest");
  dbuild->add_option("--assignments", build_args.assignments, "split assignments");
  dbuild->add_option("--functions", build_args.functions, "function-record file");
  dbuild->add_option("--tokenizer", build_args.tokenizer, "tokenizer model file")->required();
  dbuild->add_option("--out", build_args.out, "output dataset file")->required();
  dbuild->add_option("--entropy-threshold", build_args.entropy_threshold,
                     "drop chunks above this entropy");
  dbuild->add_option("--chunk-length", build_args.chunk_length, "tokens per chunk");
  dbuild->add_option("--train-cohort", build_args.train_cohorts,
                     "cohorts whose train split joins pretraining (repeatable)");
  dbuild->add_option("--min-freq", build_args.min_freq, "API class frequency floor");
  dbuild->add_option("--per-api-cap", build_args.per_api_cap, "functions sampled per API class");
  dbuild->add_option("--holdout-fraction", build_args.holdout_fraction, "rule holdout fraction");
  dbuild->add_option("--min-train", build_args.min_train, "minimum training instances per class");
  dbuild->add_option("--train-cap", build_args.train_cap, "training instances cap per class");
  dbuild->add_option("--seed", build_args.seed, "sampling seed");

  PretrainArgs pre_args;
  auto* pretrain = app.add_subcommand("pretrain", "Masked-language-model pretraining");
  pretrain->add_option("--dataset", pre_args.dataset, "pretrain dataset file")->required();
  pretrain->add_option("--train-config", pre_args.train_config, "key=value training config")
      ->required();
  pretrain->add_option("--encoder-config", pre_args.encoder_config, "key=value encoder config")
      ->required();
  pretrain->add_option("--tokenizer", pre_args.tokenizer,
                       "tokenizer file (pins vocab_size when given)");
  pretrain->add_option("--out", pre_args.out, "output checkpoint")->required();
  pretrain->add_option("--metrics", pre_args.metrics, "metrics log file");
  pretrain->add_option("--resume", pre_args.resume, "resume from training checkpoint");
  pretrain->add_option("--steps", pre_args.steps_override, "override total_steps");
  pretrain->add_option("--seed", pre_args.seed_override, "override seed");

  FinetuneArgs ft_args;
  auto* finetune = app.add_subcommand("finetune", "Fine-tune a task head end-to-end");
  finetune->add_option("--dataset", ft_args.dataset, "task dataset file")->required();
  finetune->add_option("--config", ft_args.config, "key=value finetune config")->required();
  finetune->add_option("--checkpoint", ft_args.checkpoint, "pretrained checkpoint");
  finetune->add_flag("--scratch", ft_args.scratch, "randomly initialized backbone");
  finetune->add_option("--encoder-config", ft_args.encoder_config,
                       "encoder config (required with --scratch)");
  finetune->add_option("--out", ft_args.out, "output checkpoint");
  finetune->add_option("--predictions", ft_args.predictions, "test-split predictions file");
  finetune->add_option("--seed", ft_args.seed_override, "override seed");

  EvalArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics and reports");
  evaluate->add_option("--scores", eval_args.scores, "detection score file (id label score)");
  evaluate->add_option("--predictions", eval_args.predictions,
                       "classification predictions file (id label tag logits-csv)");
  evaluate->add_option("--target-fpr", eval_args.target_fpr, "operating-point FPR");
  evaluate->add_option("--topk", eval_args.topk, "top-k accuracies to report");
  evaluate->add_option("--out", eval_args.out, "report file (stdout when omitted)");

  std::string in_model, in_ckpt, in_dataset, in_manifest;
  auto* inspect = app.add_subcommand("inspect", "Summarize toolkit artifacts");
  inspect->add_option("--model", in_model, "tokenizer model file");
  inspect->add_option("--checkpoint", in_ckpt, "checkpoint file");
  inspect->add_option("--dataset", in_dataset, "dataset file");
  inspect->add_option("--manifest", in_manifest, "manifest file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage errors
  }

  try {
    if (extract->parsed()) return cmd_extract(extract_args);
    if (ttrain->parsed()) return cmd_tokenizer_train(tt_corpus, tt_vocab, tt_window, tt_out);
    if (tencode->parsed()) return cmd_tokenizer_encode(te_model, te_in, te_out);
    if (tdecode->parsed()) return cmd_tokenizer_decode(td_model, td_in, td_out);
    if (dsplit->parsed()) return cmd_dataset_split(split_args);
    if (dbuild->parsed()) return cmd_dataset_build(build_args);
    if (pretrain->parsed()) return cmd_pretrain(pre_args);
    if (finetune->parsed()) return cmd_finetune(ft_args);
    if (evaluate->parsed()) return cmd_evaluate(eval_args);
    if (inspect->parsed()) return cmd_inspect(in_model, in_ckpt, in_dataset, in_manifest);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
