#include <iostream>

#include <CLI11.hpp>

#include "ufid/commands.hpp"
#include "ufid/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated continual-learning intrusion detection for UAV swarms"};
  app.require_subcommand(1);

  ufid::GenSynthOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Write a synthetic swarm dataset and its schema");
  gen_cmd->add_option("--out", gen.out, "Output CSV path")->required();
  gen_cmd->add_option("--preset", gen.preset, "uav_ids, ukm_ids, tlm_ids or cyber_physical");
  gen_cmd->add_option("--features", gen.features, "Feature count");
  gen_cmd->add_option("--classes", gen.classes, "Class count");
  gen_cmd->add_option("--samples", gen.samples, "Rows to generate")->capture_default_str();
  gen_cmd->add_option("--separation", gen.separation, "Class-center distance from the origin")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  ufid::TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Run a federated experiment");
  train_cmd->add_option("--config", train.config, "Experiment YAML (built-in defaults when omitted)");
  train_cmd->add_option("--out-dir", train.out_dir, "Run directory (default $UFID_OUT_DIR or ufid-run)");
  train_cmd->add_option("--rounds", train.rounds, "Override federation.rounds");
  train_cmd->add_option("--seed", train.seed, "Override federation.seed");
  train_cmd->add_option("--stop-at-accuracy", train.stop_at_accuracy,
                        "Stop early once every client reaches this test accuracy")
      ->check(CLI::Range(0.0, 1.0));

  ufid::EvaluateOptions eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a client checkpoint");
  eval_cmd->add_option("--checkpoint-dir", eval.checkpoint_dir, "Checkpoint directory of a run")->required();
  eval_cmd->add_option("--client", eval.client, "Client id")->required();
  eval_cmd->add_option("--dataset", eval.dataset, "Raw CSV (default: the client's test split)");
  eval_cmd->add_option("--schema", eval.schema, "Schema YAML for --dataset");
  eval_cmd->add_option("--out-dir", eval.out_dir, "Where to write scores and the confusion matrix");

  ufid::ProfileOptions prof;
  auto* prof_cmd = app.add_subcommand("profile", "Measure inference cost of a client checkpoint");
  prof_cmd->add_option("--checkpoint", prof.checkpoint, "Client checkpoint file")->required();
  prof_cmd->add_option("--dataset", prof.dataset, "CSV to run (default: 256 synthetic rows)");
  prof_cmd->add_option("--schema", prof.schema, "Schema YAML for --dataset");
  prof_cmd->add_option("--iters", prof.iters, "Timed passes")->capture_default_str();
  prof_cmd->add_option("--warmup", prof.warmup, "Untimed passes")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return ufid::kExitConfig;
  }

  try {
    if (*gen_cmd) ufid::cmd_gen_synth(gen, std::cout);
    if (*train_cmd) ufid::cmd_train(train, std::cout);
    if (*eval_cmd) ufid::cmd_evaluate(eval, std::cout);
    if (*prof_cmd) ufid::cmd_profile(prof, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ufid::exit_code_for(e);
  }
  return ufid::kExitOk;
}
