#include <iostream>

#include "CLI11.hpp"
#include "stlb/experiment.hpp"

namespace {

stlb::ChannelSelection parse_selection(const std::string& s) {
  if (s == "all") return stlb::ChannelSelection::all();
  if (s.rfind("top", 0) == 0) return stlb::ChannelSelection::top(std::stol(s.substr(3)));
  if (s.rfind("ch", 0) == 0) return stlb::ChannelSelection::single(std::stol(s.substr(2)));
  throw stlb::UsageError("channel selection must be 'all', 'topN' or 'chK', got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staged transfer learning experiments on synthetic image domains"};
  app.require_subcommand(1);

  std::string spec_path;
  auto* generate = app.add_subcommand("generate", "Generate the image domains described by a spec");
  generate->add_option("--spec", spec_path, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);

  bool resume = false;
  std::size_t stop_after = 0;
  std::size_t jobs = 0;
  auto* run = app.add_subcommand("run", "Run the process x seed x r grid");
  run->add_option("--spec", spec_path, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);
  run->add_flag("--resume", resume, "Skip cells already recorded in the progress file");
  run->add_option("--jobs", jobs, "Seeds trained in parallel (overrides the experiment file)");
  run->add_option("--stop-after", stop_after)->group("");

  std::string ckpt, image, layer, out, channels = "top1";
  auto* saliency = app.add_subcommand("saliency", "Backproject a layer's feature map into input space");
  saliency->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  saliency->add_option("--image", image, "Input image (PGM)")->required()->check(CLI::ExistingFile);
  saliency->add_option("--layer", layer, "Layer name, e.g. fc6")->required();
  saliency->add_option("--out", out, "Output directory")->required();
  saliency->add_option("--channels", channels, "all, topN or chK")->capture_default_str();

  std::string results;
  auto* report = app.add_subcommand("report", "Summarise a results directory");
  report->add_option("--results", results, "Directory holding results.csv and slopes.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0; every other parse failure is a usage error.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*generate) {
      auto spec = stlb::load_spec(spec_path);
      const auto r = stlb::cmd_generate(spec);
      std::cout << (r.regenerated ? "wrote " : "up to date: ") << r.manifest.string() << "\n";
    } else if (*run) {
      auto spec = stlb::load_spec(spec_path);
      stlb::apply_env_overrides(spec);
      if (jobs > 0) spec.jobs = jobs;
      stlb::RunOptions options;
      options.resume = resume;
      if (stop_after > 0) options.stop_after = stop_after;
      const auto s = stlb::cmd_run(spec, options);
      std::cout << s.completed << "/" << s.cells << " cells completed, " << s.failed << " failed\n";
      if (s.interrupted) return 3;
      return s.failed == 0 ? 0 : 1;
    } else if (*saliency) {
      const auto files = stlb::cmd_saliency(ckpt, image, layer, out, parse_selection(channels));
      std::cout << files.magnitude_pgm.string() << "\n" << files.signed_csv.string() << "\n";
    } else if (*report) {
      stlb::cmd_report(results, std::cout);
    }
  } catch (const stlb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const stlb::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
