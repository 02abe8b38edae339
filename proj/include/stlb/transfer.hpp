#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stlb/data.hpp"
#include "stlb/network.hpp"
#include "stlb/training.hpp"

namespace stlb {

/// The compared learning processes, numbered as in the usual results table:
/// (1) scratch, (2) single-stage from texture, (3) single-stage from natural
/// images, (4) two-stage, (a) fine-tuning from natural, (b) fine-tuning from
/// texture.
enum class ProcessKind { Scratch, SingleFromTexture, SingleFromNatural, TwoStage, FineTuneNatural, FineTuneTexture };

inline constexpr ProcessKind kAllProcesses[] = {ProcessKind::Scratch,         ProcessKind::SingleFromTexture,
                                                ProcessKind::SingleFromNatural, ProcessKind::TwoStage,
                                                ProcessKind::FineTuneNatural,   ProcessKind::FineTuneTexture};

const char* to_string(ProcessKind k);
/// "(1)" .. "(4)", "(a)", "(b)".
const char* table_label(ProcessKind k);
ProcessKind process_from_string(const std::string& s);
bool is_fine_tuning(ProcessKind k);

enum class StageMode { FullTrain, FrozenFeatures };

struct Stage {
  DomainKind domain = DomainKind::Target;
  StageMode mode = StageMode::FullTrain;
  double learning_rate = 0.05;
  bool reinit_classifier = false;

  friend bool operator==(const Stage&, const Stage&) = default;
};

struct StagePlan {
  ProcessKind kind = ProcessKind::Scratch;
  std::vector<Stage> stages;
};

struct PlanOptions {
  double first_learning_rate = 0.05;      // a network trained for the first time
  double transfer_learning_rate = 0.0005;  // every stage that starts from trained weights
  /// Later stages keep the hidden classifier layers and only replace the
  /// output layer instead of re-initialising the whole classifier.
  bool reuse_hidden_classifier = false;
};

StagePlan build_plan(ProcessKind kind, const PlanOptions& options = {});

/// Train and validation data of one domain.
struct DomainData {
  Dataset train;
  Dataset val;
};

using DomainSets = std::map<DomainKind, DomainData>;

struct StageRecord {
  Network initial;  // after classifier replacement, before training
  Network final;
  TrainLog log;
};

/// Trained source stages shared between processes and r values. Keyed by
/// the stage prefix and seed, which fully determine the result.
struct StageCache {
  std::map<std::string, StageRecord> entries;
};

struct ProcessOptions {
  PlanOptions plan;
  /// Base training configuration; learning rate, seed and frozen_below are
  /// set per stage.
  TrainConfig train;
  /// Overrides train.max_epochs for stages on source domains.
  std::optional<std::size_t> source_max_epochs;
  /// Fine-tuning freezes everything below the split index by default; with
  /// this set the first fully connected layer is retrained as well.
  bool retrain_first_fc = false;
  /// When set, every stage writes {process}_{stage}_{seed}.ckpt here.
  std::optional<std::filesystem::path> checkpoint_dir;
  StageCache* cache = nullptr;
};

struct ProcessResult {
  Network net;
  std::vector<StageRecord> stages;

  std::vector<TrainLog> logs() const;
};

/// A stage failed. Carries the logs of the stages that completed.
class ProcessError : public Error {
 public:
  ProcessError(const std::string& what, std::vector<TrainLog> logs) : Error(what), logs_(std::move(logs)) {}
  const std::vector<TrainLog>& logs() const { return logs_; }

 private:
  std::vector<TrainLog> logs_;
};

/// Layers below this index are frozen in a FrozenFeatures stage.
std::size_t frozen_boundary(const ArchitectureSpec& arch, bool retrain_first_fc);

/// Runs the stages of `kind` in order on `datasets`, subsampling the target
/// training set to fraction r. Between stages the output layer is resized
/// to the next domain's class count and the classifier is re-initialised as
/// the plan says; feature-extractor weights are carried over unchanged.
ProcessResult run_process(ProcessKind kind, const DomainSets& datasets, const ArchitectureSpec& arch,
                          std::uint64_t seed, double r, const ProcessOptions& options = {});

}  // namespace stlb
