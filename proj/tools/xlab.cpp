// xlab — command-line driver for the multilingual-interference laboratory.
//
// One experiment = one JSON config + one output directory. Verbs map to
// pipeline stages; `run` executes the whole pipeline (or --stages subset).
//
//   xlab run --config configs/interference_pair.json
//   xlab gen-corpus -c cfg.json && xlab learn-bpe -c cfg.json && ...
//   xlab run -c cfg.json --stages pretrain,eval --resume
//
// Environment overrides (documented contract — nothing else is read):
//   XLING_OUT       output directory (config < XLING_OUT < --out)
//   XLING_THREADS   OpenMP thread cap

#include <omp.h>

#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xling/common.hpp"
#include "xling/config.hpp"
#include "xling/experiments.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  bool resume = false;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("-c,--config", args->config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", args->out_dir, "output directory (overrides config and XLING_OUT)");
  cmd->add_option("-s,--seed", args->seed, "master seed (overrides the config)")
      ->each([args](const std::string&) { args->seed_set = true; });
  cmd->add_flag("-r,--resume", args->resume, "continue an interrupted run, keeping finished work");
}

int execute(const CommonArgs& args, const std::string& stages_csv) {
  xling::ExperimentConfig cfg = xling::load_experiment_config(args.config_path);

  // Precedence for the output directory: --out, then XLING_OUT, then config.
  if (const char* env = std::getenv("XLING_OUT"); env != nullptr && *env != '\0') {
    cfg.out_dir = env;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed_set) cfg.seed = args.seed;

  if (const char* env = std::getenv("XLING_THREADS"); env != nullptr && *env != '\0') {
    const int n = std::atoi(env);
    if (n < 1) throw xling::ConfigError("XLING_THREADS must be a positive integer");
    omp_set_num_threads(n);
  }

  xling::RunOptions opts;
  opts.stages = xling::parse_stages(stages_csv);
  opts.resume = args.resume;

  const xling::ExperimentResult result = xling::run_experiment(cfg, opts);
  std::cout << "experiment " << cfg.name << " (digest " << result.digest << ")\n"
            << "  out: " << result.out_dir << "\n";
  for (const std::string& s : result.stages_run) std::cout << "  ran: " << s << "\n";
  for (const std::string& s : result.stages_skipped) std::cout << "  skipped: " << s << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for interference in multilingual masked-LM pretraining"};
  app.require_subcommand(1);

  // `run` drives the whole pipeline; every stage is also its own verb.
  CommonArgs run_args;
  std::string stages_csv;
  CLI::App* run_cmd = app.add_subcommand("run", "execute the pipeline (optionally --stages)");
  add_common(run_cmd, &run_args);
  run_cmd->add_option("--stages", stages_csv,
                      "comma-separated stage subset, e.g. gen-corpus,pretrain");

  struct Verb {
    const char* name;
    const char* help;
    CommonArgs args;
    CLI::App* cmd = nullptr;
  };
  std::vector<Verb> verbs = {
      {"gen-corpus", "generate the synthetic language corpora", {}, nullptr},
      {"learn-bpe", "learn the shared subword tokenizer", {}, nullptr},
      {"pretrain", "train every joint-trainer run", {}, nullptr},
      {"meta-pretrain", "train every meta-trainer run", {}, nullptr},
      {"probe", "gradient-similarity probes on trained checkpoints", {}, nullptr},
      {"prune", "learn per-language structured masks on a frozen checkpoint", {}, nullptr},
      {"eval", "finetune + within-language/zero-shot tagging evaluation", {}, nullptr},
      {"report", "render metrics into per-analysis CSV tables", {}, nullptr},
  };
  for (Verb& v : verbs) {
    v.cmd = app.add_subcommand(v.name, v.help);
    add_common(v.cmd, &v.args);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) return execute(run_args, stages_csv);
    for (const Verb& v : verbs) {
      if (v.cmd->parsed()) return execute(v.args, v.name);
    }
  } catch (const xling::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
