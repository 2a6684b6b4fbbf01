#include "growformer/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "growformer/checkpoint.hpp"

namespace growformer {

namespace {

ModelConfig config_from_spec(const RunSpec& spec) {
  ModelConfig cfg;
  cfg.variant = variant_from_name(spec.variant);
  cfg.layers = spec.layers;
  cfg.hidden = spec.hidden;
  cfg.head_dim = spec.head_dim;
  cfg.heads = spec.heads != 0 ? spec.heads : spec.hidden / spec.head_dim;
  cfg.ffn = spec.ffn != 0 ? spec.ffn : 2 * spec.hidden;
  cfg.vocab = spec.vocab;
  cfg.max_seq = spec.max_seq;
  cfg.validate();
  return cfg;
}

ModelConfig target_config(const ModelConfig& src, const RunSpec& spec) {
  ModelConfig tgt = src;
  if (spec.target_layers != 0) tgt.layers = spec.target_layers;
  if (spec.target_hidden != 0) tgt.hidden = spec.target_hidden;
  tgt.heads = spec.target_heads != 0 ? spec.target_heads
                                     : tgt.hidden / tgt.head_dim;
  // FFN grows proportionally with the hidden size.
  tgt.ffn = src.ffn * tgt.hidden / src.hidden;
  tgt.validate();
  return tgt;
}

std::vector<std::int32_t> load_corpus(const RunSpec& spec, std::size_t vocab) {
  if (spec.corpus.empty()) {
    throw std::invalid_argument("--corpus is required");
  }
  if (spec.corpus == "markov") {
    return make_corpus_markov(vocab, spec.corpus_length, spec.seed);
  }
  return make_corpus_file(spec.corpus, vocab);
}

TrainSchedule schedule_from_spec(const RunSpec& spec, bool two_stage) {
  TrainSchedule sched;
  sched.peak_lr = static_cast<float>(spec.lr);
  sched.warmup_steps = spec.warmup;
  sched.epochs = spec.epochs;
  sched.submodel_epochs = two_stage ? spec.eb : 0;
  sched.layer_step = spec.lb;
  sched.batch_size = spec.batch;
  sched.seq_len = spec.seq;
  sched.seed = spec.seed;
  sched.max_steps = spec.steps;
  return sched;
}

int fail(const std::string& message) {
  std::cerr << "error: " << message << "\n";
  return kExitFailure;
}

}  // namespace

int cmd_pretrain(const RunSpec& spec) {
  const ModelConfig cfg = config_from_spec(spec);
  const auto corpus = load_corpus(spec, cfg.vocab);
  ParamSet params = rand_init(cfg, spec.seed);
  TrainSchedule sched = schedule_from_spec(spec, spec.two_stage);

  std::filesystem::create_directories(spec.out);
  const LossLog log = two_stage_train(cfg, params, sched, corpus);
  log.write_csv(spec.out / "loss.csv");
  save_checkpoint(cfg, params, spec.out / "model.grwf");
  if (!log.records.empty()) {
    std::cout << "pretrain: " << log.records.size() << " steps, final loss "
              << log.records.back().loss << "\n";
  }
  return kExitOk;
}

int cmd_expand(const RunSpec& spec) {
  auto [src_cfg, src_params] = load_checkpoint(spec.source);
  const ModelConfig tgt_cfg = target_config(src_cfg, spec);
  const SourceTargetPair pair{src_cfg, tgt_cfg};
  const Strategy strategy = strategy_from_name(spec.strategy);

  ExpansionPlan plan;
  ParamSet tgt_params = expand_model(pair, src_params, strategy, spec.seed,
                                     &plan);

  std::filesystem::create_directories(spec.out);
  save_checkpoint(tgt_cfg, tgt_params, spec.out / "model.grwf");

  // The preservation gap is only meaningful while the depth is unchanged
  // (stacked layers deliberately change the function).
  PreservationReport verification;
  const bool verifiable = src_cfg.layers == tgt_cfg.layers &&
                          (strategy == Strategy::Fpi ||
                           strategy == Strategy::DirectCopy);
  if (verifiable) {
    verification = verify_preservation(src_cfg, src_params, tgt_cfg,
                                       tgt_params, 10, spec.tol, spec.seed);
  }
  const bool has_plan =
      strategy == Strategy::Fpi || strategy == Strategy::Aki;
  const std::string report =
      expansion_report(pair, has_plan ? &plan : nullptr, strategy,
                       verifiable ? &verification : nullptr);
  std::ofstream report_file(spec.out / "report.txt");
  report_file << report;
  std::cout << report;
  return kExitOk;
}

int cmd_verify(const RunSpec& spec) {
  auto [src_cfg, src_params] = load_checkpoint(spec.source);
  auto [tgt_cfg, tgt_params] = load_checkpoint(spec.target);
  const PreservationReport report = verify_preservation(
      src_cfg, src_params, tgt_cfg, tgt_params, 10, spec.tol, spec.seed);
  std::cout << "max_logit_gap=" << report.max_logit_gap
            << " loss_gap=" << report.loss_gap
            << " source_loss=" << report.source_loss
            << " target_loss=" << report.target_loss << "\n";
  if (!report.pass) {
    std::cout << "FAIL: gap above tolerance " << spec.tol << "\n";
    return kExitFailure;
  }
  std::cout << "PASS\n";
  return kExitOk;
}

int cmd_compare(const RunSpec& spec) {
  auto [src_cfg, src_params] = load_checkpoint(spec.source);
  const ModelConfig tgt_cfg = target_config(src_cfg, spec);
  const SourceTargetPair pair{src_cfg, tgt_cfg};

  // One corpus instantiation shared by every strategy, so curves compare.
  const auto corpus = load_corpus(spec, tgt_cfg.vocab);

  std::vector<std::string> strategies = spec.strategies;
  if (strategies.empty()) {
    strategies = {"scratch", "directcopy", "fpi", "aki"};
  }

  double threshold = spec.threshold;
  if (threshold <= 0.0) {
    // Default target: match the source model's eval loss (plus 2% slack).
    TrainSchedule eval_sched = schedule_from_spec(spec, false);
    threshold = 1.02 * corpus_eval_loss(src_cfg, src_params, corpus,
                                        eval_sched, 8);
  }

  std::filesystem::create_directories(spec.out);
  struct Result {
    std::string name;
    std::size_t steps;
  };
  std::vector<Result> results;
  const std::size_t window = 50;

  for (const std::string& entry : strategies) {
    std::string name = entry;
    bool two_stage = false;
    const std::string suffix = "+two-stage";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      two_stage = true;
      name = name.substr(0, name.size() - suffix.size());
    }
    const Strategy strategy = strategy_from_name(name);
    ParamSet params = expand_model(pair, src_params, strategy, spec.seed);

    TrainSchedule sched = schedule_from_spec(spec, two_stage);
    sched.stop_loss = threshold;
    sched.stop_window = window;

    LossLog log = two_stage_train(tgt_cfg, params, sched, corpus);
    log.write_csv(spec.out / ("loss_" + entry + ".csv"));
    save_checkpoint(tgt_cfg, params, spec.out / ("model_" + entry + ".grwf"));
    const std::size_t steps = steps_to_threshold(log, threshold, window);
    results.push_back({entry, steps});
    std::cout << "compare: " << entry << " steps_to_threshold="
              << (steps == kNeverCrossed ? std::string("never")
                                         : std::to_string(steps))
              << "\n";
  }

  // Savings relative to the scratch baseline (scratch itself = 0%).
  std::size_t scratch_steps = kNeverCrossed;
  for (const auto& r : results) {
    if (r.name == "scratch") scratch_steps = r.steps;
  }
  std::ofstream summary(spec.out / "summary.csv");
  summary << "strategy,steps_to_threshold,savings_pct\n";
  summary.precision(4);
  for (const auto& r : results) {
    summary << r.name << ',';
    if (r.steps == kNeverCrossed) {
      summary << "never,";
    } else {
      summary << r.steps << ',';
    }
    if (scratch_steps != kNeverCrossed && scratch_steps > 0 &&
        r.steps != kNeverCrossed) {
      summary << 100.0 * (1.0 - static_cast<double>(r.steps) /
                                    static_cast<double>(scratch_steps));
    }
    summary << '\n';
  }
  std::cout << "threshold=" << threshold << " summary written to "
            << (spec.out / "summary.csv").string() << "\n";
  return kExitOk;
}

int cmd_dump_attention(const RunSpec& spec) {
  auto [cfg, params] = load_checkpoint(spec.source);
  Batch batch;
  batch.batch = 1;
  batch.seq = std::min<std::size_t>(spec.seq, cfg.max_seq);
  batch.ids.resize(batch.seq);
  batch.mask.assign(batch.seq, 1);
  batch.mlm_labels.assign(batch.seq, -1);
  batch.lm_targets.assign(batch.seq, -1);
  if (!spec.corpus.empty()) {
    const auto corpus = load_corpus(spec, cfg.vocab);
    for (std::size_t s = 0; s < batch.seq; ++s) batch.ids[s] = corpus[s];
  } else {
    SeededRng rng(spec.seed);
    for (std::size_t s = 0; s < batch.seq; ++s) {
      batch.ids[s] = static_cast<std::int32_t>(rng.sample_index(cfg.vocab));
    }
  }
  std::filesystem::create_directories(spec.out);
  dump_attention(cfg, params, batch, spec.out / "attention.csv");
  return kExitOk;
}

int run_command(const RunSpec& spec) {
  try {
    if (spec.command == "pretrain") return cmd_pretrain(spec);
    if (spec.command == "expand") return cmd_expand(spec);
    if (spec.command == "verify") return cmd_verify(spec);
    if (spec.command == "compare") return cmd_compare(spec);
    if (spec.command == "dump-attention") return cmd_dump_attention(spec);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  std::cerr << "usage error: unknown command " << spec.command << "\n";
  return kExitUsage;
}

}  // namespace growformer
