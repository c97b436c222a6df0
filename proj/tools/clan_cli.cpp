#include <iostream>

#include "CLI11.hpp"
#include "clan/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Cross-layer attention classifier on a synthetic fine-grained task"};
  app.require_subcommand(1);
  clan::CliOptions opt;
  std::size_t sample = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "run configuration (section.key = value)");
    return sub;
  };
  add_common(app.add_subcommand("train", "train a model, writing log, csv and checkpoint"))
      ->add_option("--out", opt.out, "output directory (default: run.output_dir)");
  auto* eval = add_common(app.add_subcommand("eval", "test accuracy per branch subset"));
  eval->add_option("--checkpoint", opt.checkpoint)->required();
  eval->add_option("--branches", opt.branches, "e.g. G,A2,G+A2,all (default: standard ablation rows)");
  auto* viz = add_common(app.add_subcommand("viz", "export spatial attention maps as PPM"));
  viz->add_option("--checkpoint", opt.checkpoint)->required();
  auto* sample_opt = viz->add_option("--sample", sample, "test sample index");
  viz->add_option("--out", opt.out, "output directory");
  add_common(app.add_subcommand("gradcheck", "finite-difference checks of every backward rule"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : clan::kExitConfig;
  }
  opt.command = app.get_subcommands().front()->get_name();
  if (sample_opt->count() > 0) opt.sample = sample;
  opt.precision_override = clan::precision_from_env();
  return clan::run_cli(opt, std::cout, std::cerr);
}
