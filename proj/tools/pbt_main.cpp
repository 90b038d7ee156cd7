#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pbt/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Battery cycle-life prediction pipeline"};
  app.require_subcommand(1);

  std::string config_path, in_dir, out_arg, data_dir, base_arg, ckpt_dir, condition_file,
      cycles_text, report_path;
  uint64_t seed = 0;
  int port = 0;
  double timeout_s = 5.0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic raw-cell dataset");
  synth->add_option("--config", config_path, "Run configuration JSON");
  auto* synth_seed = synth->add_option("--seed", seed, "Seed override");
  synth->add_option("--out", out_arg, "Output directory for cell JSON files")
      ->envname("PBT_OUT_DIR")
      ->required();

  auto* preprocess = app.add_subcommand("preprocess", "Resample and label raw cell JSON files");
  preprocess->add_option("--in", in_dir, "Directory of unified cell JSON files")->required();
  preprocess->add_option("--out", out_arg, "Output directory for the resampled dataset")
      ->envname("PBT_OUT_DIR")
      ->required();

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain on a resampled dataset");
  pretrain->add_option("--config", config_path, "Run configuration JSON");
  auto* pretrain_seed = pretrain->add_option("--seed", seed, "Seed override");
  pretrain->add_option("--data", data_dir, "Resampled dataset directory")
      ->envname("PBT_DATA_DIR")
      ->required();
  pretrain->add_option("--out", out_arg, "Checkpoint output directory")
      ->envname("PBT_OUT_DIR")
      ->required();

  auto* transfer = app.add_subcommand("transfer", "Fine-tune or adapter-tune a checkpoint");
  transfer->add_option("--config", config_path, "Run configuration JSON");
  auto* transfer_seed = transfer->add_option("--seed", seed, "Seed override");
  transfer->add_option("--base", base_arg, "Base checkpoint directory")->required();
  transfer->add_option("--data", data_dir, "Target resampled dataset directory")
      ->envname("PBT_DATA_DIR")
      ->required();
  transfer->add_option("--out", out_arg, "Checkpoint output directory")
      ->envname("PBT_OUT_DIR")
      ->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a resampled dataset");
  eval->add_option("--config", config_path, "Run configuration JSON");
  eval->add_option("--ckpt", ckpt_dir, "Checkpoint directory (model or adapter)")->required();
  eval->add_option("--data", data_dir, "Resampled dataset directory")
      ->envname("PBT_DATA_DIR")
      ->required();
  eval->add_option("--cycles", cycles_text, "Comma-separated first-N sweep, e.g. 1,5,10,50,100");
  eval->add_option("--out", report_path, "Also write the report JSON here");
  eval->add_option("--base", base_arg, "Base checkpoint override for adapter checkpoints");

  auto* embed = app.add_subcommand("embed", "Embed an aging condition file");
  embed->add_option("--config", config_path, "Run configuration JSON");
  embed->add_option("--condition", condition_file, "Condition JSON file")->required();
  auto* embed_port = embed->add_option("--port", port, "Remote embedding service port");
  auto* embed_timeout = embed->add_option("--timeout-s", timeout_s, "Remote request timeout");
  embed->add_option("--out", report_path, "Also write the embedding JSON here");

  auto* stub = app.add_subcommand("embed-stub", "Serve the embedding wire protocol");
  stub->add_option("--config", config_path, "Run configuration JSON");
  auto* stub_port = stub->add_option("--port", port, "Port to bind (0 picks one)");

  CLI11_PARSE(app, argc, argv);

  try {
    pbt::RunConfig rc =
        config_path.empty() ? pbt::RunConfig{} : pbt::load_run_config(config_path);
    if (synth_seed->count() || pretrain_seed->count() || transfer_seed->count()) rc.seed = seed;
    if (embed_port->count()) {
      rc.embedder.kind = "remote";
      rc.embedder.port = port;
    }
    if (embed_timeout->count()) rc.embedder.timeout_s = timeout_s;

    if (*synth) return pbt::cmd_synth(rc, out_arg, std::cout, std::cerr);
    if (*preprocess) return pbt::cmd_preprocess(in_dir, out_arg, std::cout, std::cerr);
    if (*pretrain) return pbt::cmd_pretrain(rc, data_dir, out_arg, std::cout, std::cerr);
    if (*transfer)
      return pbt::cmd_transfer(rc, base_arg, data_dir, out_arg, std::cout, std::cerr);
    if (*eval) {
      std::vector<int> cycles;
      if (!cycles_text.empty()) cycles = pbt::parse_cycles_list(cycles_text);
      return pbt::cmd_eval(rc, ckpt_dir, data_dir, cycles, report_path, base_arg, std::cout,
                           std::cerr);
    }
    if (*embed) return pbt::cmd_embed(rc, condition_file, report_path, std::cout, std::cerr);
    if (*stub)
      return pbt::cmd_embed_stub(rc, stub_port->count() ? port : 0, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pbt::exit_code_for(e);
  }
  return 0;
}
