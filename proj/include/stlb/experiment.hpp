#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stlb/data.hpp"
#include "stlb/saliency.hpp"
#include "stlb/transfer.hpp"

namespace stlb {

/// Everything needed to regenerate the data and rerun the process grid.
/// Read from JSON:
///
///   {
///     "arch": "compact" | "mini",
///     "output_dir": "out",                  // relative to this file
///     "domains": {
///       "natural":  {"class_count": 10, "examples_per_class": 200,
///                    "eval_per_class": 50, "image_size": 32, "seed": 11},
///       "textural": {...},
///       "target":   {..., "imbalance": 1.0}
///     },
///     "processes": ["scratch", "single_texture", ...],
///     "seeds": [1, 2, 3],
///     "r_grid": [0.2, 0.4, 0.6, 0.8, 1.0],
///     "train": {"momentum": 0.9, "batch_size": 32, "plateau_window": 10,
///               "plateau_epsilon": 0.001, "max_epochs": 200,
///               "source_max_epochs": 40},
///     "transfer": {"first_learning_rate": 0.05,
///                  "transfer_learning_rate": 0.0005,
///                  "reuse_hidden_classifier": false,
///                  "retrain_first_fc": false},
///     "jobs": 1
///   }
///
/// Every key except "domains" has a default.
struct ExperimentSpec {
  std::string arch = "compact";
  std::map<DomainKind, DomainSpec> domains;
  std::vector<ProcessKind> processes;
  std::vector<std::uint64_t> seeds;
  std::vector<double> r_grid;
  TrainConfig train;
  std::optional<std::size_t> source_max_epochs;
  PlanOptions plan;
  bool retrain_first_fc = false;
  std::filesystem::path output_dir = "out";
  std::size_t jobs = 1;

  /// Throws ConfigError when a process needs a domain that is not declared,
  /// when domain image sizes differ, or when any value is out of range.
  void validate() const;

  /// Hash of every setting that affects results (not output_dir or jobs),
  /// as 16 hex digits.
  std::string config_hash() const;
  /// Hash of the domain settings only; identifies a generated data set.
  std::string data_hash() const;

  ArchitectureSpec architecture(DomainKind domain) const;
  ProcessOptions process_options() const;
};

/// Parses a spec. A relative output_dir is resolved against `base_dir`.
ExperimentSpec parse_spec(std::string_view json_text, const std::filesystem::path& base_dir = {});
ExperimentSpec load_spec(const std::filesystem::path& path);

/// Replaces the seed list with the single seed in STLB_SEED when set.
void apply_env_overrides(ExperimentSpec& spec);

std::filesystem::path data_dir(const ExperimentSpec& spec);
std::filesystem::path manifest_path(const ExperimentSpec& spec);
std::filesystem::path results_dir(const ExperimentSpec& spec);

struct ManifestEntry {
  DomainKind domain = DomainKind::Target;
  std::string path;  // relative to the data directory
  int label = 0;
  std::string split;  // "train" or "eval"
  std::string hash;   // of the file bytes
};

struct Manifest {
  std::string data_hash;
  std::vector<ManifestEntry> entries;
};

Manifest load_manifest(const std::filesystem::path& path);

struct GenerateResult {
  std::filesystem::path manifest;
  bool regenerated = false;
};

/// Writes every domain as PGM files under data/<domain>/<class>/<split>/ and
/// a manifest. Does nothing when an up-to-date manifest exists and every
/// listed file still has its recorded hash.
GenerateResult cmd_generate(const ExperimentSpec& spec);

/// Reads the generated images back. val is the eval split of each domain.
DomainSets load_domain_sets(const ExperimentSpec& spec);

struct RunOptions {
  bool resume = false;
  /// Stop after this many newly completed cells, as if interrupted.
  std::optional<std::size_t> stop_after;
};

struct RunSummary {
  std::size_t cells = 0;
  std::size_t completed = 0;  // including cells reused on resume
  std::size_t failed = 0;
  bool interrupted = false;
};

/// Runs every (process, seed, r) cell and writes results.csv, slopes.csv and
/// checkpoints under results/. Cell failures are recorded and the grid
/// continues.
RunSummary cmd_run(const ExperimentSpec& spec, const RunOptions& options = {});

struct SaliencyOutput {
  std::filesystem::path magnitude_pgm;
  std::filesystem::path signed_csv;
};

/// Backprojects the selected channels of layer `layer` for one image and
/// writes <stem>_<layer>.pgm (normalised magnitude) and <stem>_<layer>.csv
/// (signed values, one row per image row).
SaliencyOutput cmd_saliency(const std::filesystem::path& checkpoint, const std::filesystem::path& image,
                            const std::string& layer, const std::filesystem::path& out_dir,
                            const ChannelSelection& selection = {});

/// Prints the per-process summary and slope table for a results directory.
void cmd_report(const std::filesystem::path& results, std::ostream& out);

}  // namespace stlb
