// growformer: grow a small trained transformer into a larger one and
// pre-train it. Subcommands: pretrain, expand, verify, compare,
// dump-attention.
#include <CLI11.hpp>

#include "growformer/cli.hpp"

int main(int argc, char** argv) {
  using growformer::RunSpec;
  RunSpec spec;

  CLI::App app{"growformer: function-preserving transformer growth toolkit"};
  app.require_subcommand(1);

  auto add_model_flags = [&](CLI::App* cmd) {
    cmd->add_option("--variant", spec.variant,
                    "post-ln-encoder or pre-ln-decoder");
    cmd->add_option("--layers", spec.layers, "transformer layer count");
    cmd->add_option("--hidden", spec.hidden, "hidden size");
    cmd->add_option("--heads", spec.heads, "head count (default hidden/head-dim)");
    cmd->add_option("--head-dim", spec.head_dim, "per-head dimension");
    cmd->add_option("--ffn", spec.ffn, "FFN inner size (default 2*hidden)");
    cmd->add_option("--vocab", spec.vocab, "vocabulary size");
    cmd->add_option("--max-seq", spec.max_seq, "maximum sequence length");
  };
  auto add_train_flags = [&](CLI::App* cmd, bool corpus_required) {
    auto* c = cmd->add_option("--corpus", spec.corpus,
                              "'markov' or a corpus file path");
    if (corpus_required) c->required();
    cmd->add_option("--corpus-len", spec.corpus_length, "synthetic corpus length");
    cmd->add_option("--steps", spec.steps, "hard step budget (0 = epochs decide)");
    cmd->add_option("--epochs", spec.epochs, "training epochs E");
    cmd->add_option("--batch", spec.batch, "batch size");
    cmd->add_option("--seq", spec.seq, "sequence length");
    cmd->add_option("--lr", spec.lr, "peak learning rate");
    cmd->add_option("--warmup", spec.warmup, "warmup steps");
    cmd->add_flag("--two-stage", spec.two_stage, "enable sub-model stage");
    cmd->add_option("--eb", spec.eb, "sub-model training epochs E_b");
    cmd->add_option("--lb", spec.lb, "sub-model layer step l_b");
  };
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", spec.seed, "RNG seed");
    cmd->add_option("--out", spec.out, "output directory");
  };

  auto* pretrain = app.add_subcommand("pretrain", "train a model from scratch");
  add_model_flags(pretrain);
  add_train_flags(pretrain, true);
  add_common(pretrain);

  auto* expand = app.add_subcommand("expand", "grow a checkpoint");
  expand->add_option("--source", spec.source, "source checkpoint")->required();
  expand->add_option("--target-layers", spec.target_layers, "target layer count");
  expand->add_option("--target-hidden", spec.target_hidden, "target hidden size");
  expand->add_option("--target-heads", spec.target_heads, "target head count");
  expand->add_option("--strategy", spec.strategy,
                     "scratch | directcopy | fpi | aki");
  expand->add_option("--tol", spec.tol, "verification tolerance");
  add_common(expand);

  auto* verify = app.add_subcommand("verify", "compare two checkpoints");
  verify->add_option("--source", spec.source, "source checkpoint")->required();
  verify->add_option("--target", spec.target, "target checkpoint")->required();
  verify->add_option("--tol", spec.tol, "max allowed logit gap");
  add_common(verify);

  auto* compare = app.add_subcommand("compare",
                                     "train several strategies and summarize");
  compare->add_option("--source", spec.source, "source checkpoint")->required();
  compare->add_option("--target-layers", spec.target_layers, "target layer count");
  compare->add_option("--target-hidden", spec.target_hidden, "target hidden size");
  compare->add_option("--target-heads", spec.target_heads, "target head count");
  compare->add_option("--strategies", spec.strategies,
                      "strategy list; entries may end in +two-stage")
      ->delimiter(',');
  compare->add_option("--threshold", spec.threshold,
                      "loss threshold (default: source eval loss + 2%)");
  add_train_flags(compare, true);
  add_common(compare);

  auto* dump = app.add_subcommand("dump-attention",
                                  "write per-layer/head attention CSVs");
  dump->add_option("--source", spec.source, "checkpoint")->required();
  dump->add_option("--corpus", spec.corpus, "'markov' or a corpus file path");
  dump->add_option("--seq", spec.seq, "probe sequence length");
  add_common(dump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return growformer::kExitUsage;
  }

  for (auto* cmd : app.get_subcommands()) {
    spec.command = cmd->get_name();
  }
  return growformer::run_command(spec);
}
