// Command implementations behind the growformer CLI. Each command is a pure
// function of its RunSpec (plus the seed), so reruns are reproducible.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "growformer/expansion.hpp"
#include "growformer/training.hpp"
#include "growformer/transformer.hpp"

namespace growformer {

// Exit codes shared by every command.
constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // verification / threshold / runtime failure
constexpr int kExitUsage = 2;

struct RunSpec {
  std::string command;

  // checkpoints
  std::filesystem::path source;
  std::filesystem::path target;  // second checkpoint for verify

  // model configuration (pretrain) / target overrides (expand, compare)
  std::string variant = "post-ln-encoder";
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 0;     // 0 = hidden / head_dim
  std::size_t head_dim = 32;
  std::size_t ffn = 0;       // 0 = 2 * hidden
  std::size_t vocab = 32;
  std::size_t max_seq = 64;
  std::size_t target_layers = 0;
  std::size_t target_hidden = 0;
  std::size_t target_heads = 0;

  // strategy selection
  std::string strategy = "fpi";
  std::vector<std::string> strategies;  // compare; may carry "+two-stage"
  bool two_stage = false;
  std::size_t eb = 2;  // E_b
  std::size_t lb = 1;  // l_b

  // training
  std::string corpus;  // "markov" or a file path
  std::size_t corpus_length = 100000;
  std::size_t steps = 0;  // 0 = epochs decide
  std::size_t epochs = 10;
  std::size_t batch = 32;
  std::size_t seq = 32;
  double lr = 1e-4;
  std::size_t warmup = 100;

  // verification / comparison
  double tol = 1e-4;
  double threshold = 0.0;  // 0 = derive from the source model's eval loss

  std::uint64_t seed = 0;
  std::filesystem::path out = ".";
};

int cmd_pretrain(const RunSpec& spec);
int cmd_expand(const RunSpec& spec);
int cmd_verify(const RunSpec& spec);
int cmd_compare(const RunSpec& spec);
int cmd_dump_attention(const RunSpec& spec);

// Dispatch on spec.command; unknown commands are usage errors.
int run_command(const RunSpec& spec);

}  // namespace growformer
