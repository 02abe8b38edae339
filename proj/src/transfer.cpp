#include "stlb/transfer.hpp"

#include <fmt/format.h>

namespace stlb {

const char* to_string(ProcessKind k) {
  switch (k) {
    case ProcessKind::Scratch: return "scratch";
    case ProcessKind::SingleFromTexture: return "single_texture";
    case ProcessKind::SingleFromNatural: return "single_natural";
    case ProcessKind::TwoStage: return "two_stage";
    case ProcessKind::FineTuneNatural: return "finetune_natural";
    case ProcessKind::FineTuneTexture: return "finetune_texture";
  }
  return "?";
}

const char* table_label(ProcessKind k) {
  switch (k) {
    case ProcessKind::Scratch: return "(1)";
    case ProcessKind::SingleFromTexture: return "(2)";
    case ProcessKind::SingleFromNatural: return "(3)";
    case ProcessKind::TwoStage: return "(4)";
    case ProcessKind::FineTuneNatural: return "(a)";
    case ProcessKind::FineTuneTexture: return "(b)";
  }
  return "?";
}

ProcessKind process_from_string(const std::string& s) {
  for (ProcessKind k : kAllProcesses) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown learning process '" + s + "'");
}

bool is_fine_tuning(ProcessKind k) { return k == ProcessKind::FineTuneNatural || k == ProcessKind::FineTuneTexture; }

StagePlan build_plan(ProcessKind kind, const PlanOptions& o) {
  const bool reinit = !o.reuse_hidden_classifier;
  const Stage target_full{DomainKind::Target, StageMode::FullTrain, o.transfer_learning_rate, reinit};
  const Stage target_frozen{DomainKind::Target, StageMode::FrozenFeatures, o.transfer_learning_rate, reinit};
  StagePlan plan{kind, {}};
  switch (kind) {
    case ProcessKind::Scratch:
      plan.stages = {{DomainKind::Target, StageMode::FullTrain, o.first_learning_rate, false}};
      break;
    case ProcessKind::SingleFromTexture:
      plan.stages = {{DomainKind::Textural, StageMode::FullTrain, o.first_learning_rate, false}, target_full};
      break;
    case ProcessKind::SingleFromNatural:
      plan.stages = {{DomainKind::Natural, StageMode::FullTrain, o.first_learning_rate, false}, target_full};
      break;
    case ProcessKind::TwoStage:
      plan.stages = {{DomainKind::Natural, StageMode::FullTrain, o.first_learning_rate, false},
                     {DomainKind::Textural, StageMode::FullTrain, o.transfer_learning_rate, reinit},
                     target_full};
      break;
    case ProcessKind::FineTuneNatural:
      plan.stages = {{DomainKind::Natural, StageMode::FullTrain, o.first_learning_rate, false}, target_frozen};
      break;
    case ProcessKind::FineTuneTexture:
      plan.stages = {{DomainKind::Textural, StageMode::FullTrain, o.first_learning_rate, false}, target_frozen};
      break;
  }
  return plan;
}

std::vector<TrainLog> ProcessResult::logs() const {
  std::vector<TrainLog> out;
  for (const auto& s : stages) out.push_back(s.log);
  return out;
}

std::size_t frozen_boundary(const ArchitectureSpec& arch, bool retrain_first_fc) {
  if (!retrain_first_fc) return arch.split_index;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (arch.layers[i].kind == LayerKind::FullyConnected) return i;
  }
  return arch.split_index;
}

namespace {

std::string stage_key(const Stage& s) {
  return fmt::format("{}:{}:{:.17g}:{}", to_string(s.domain), s.mode == StageMode::FullTrain ? "full" : "frozen",
                     s.learning_rate, s.reinit_classifier ? 1 : 0);
}

Index class_count_of(const Dataset& d) { return static_cast<Index>(class_histogram(d).size()); }

}  // namespace

ProcessResult run_process(ProcessKind kind, const DomainSets& datasets, const ArchitectureSpec& arch,
                          std::uint64_t seed, double r, const ProcessOptions& options) {
  const StagePlan plan = build_plan(kind, options.plan);
  for (const Stage& s : plan.stages) {
    const auto it = datasets.find(s.domain);
    if (it == datasets.end() || it->second.train.empty() || it->second.val.empty()) {
      throw ConfigError(fmt::format("process {} needs the {} domain", to_string(kind), to_string(s.domain)));
    }
  }

  ProcessResult result;
  std::string prefix = fmt::format("seed={}", seed);
  for (std::size_t k = 0; k < plan.stages.size(); ++k) {
    const Stage& stage = plan.stages[k];
    const bool on_target = stage.domain == DomainKind::Target;
    prefix += "|" + stage_key(stage);
    const std::string cache_key = on_target ? std::string() : prefix;
    const std::uint64_t stage_seed = derive_seed(seed, hash_string(prefix));

    if (options.cache && !on_target) {
      if (auto hit = options.cache->entries.find(cache_key); hit != options.cache->entries.end()) {
        if (options.checkpoint_dir) {
          save_checkpoint(hit->second.final,
                          *options.checkpoint_dir / fmt::format("{}_{}_{}.ckpt", to_string(kind), k + 1, seed));
        }
        result.stages.push_back(hit->second);
        result.net = hit->second.final;
        continue;
      }
    }

    const DomainData& data = datasets.at(stage.domain);
    const Dataset* train_set = &data.train;
    DatasetSlice slice;
    if (on_target && r != 1.0) {
      slice = subsample(data.train, r, derive_seed(seed, hash_string("subsample")));
      train_set = &slice.examples;
    }
    const Index classes = class_count_of(data.train);

    StageRecord record;
    if (k == 0) {
      record.initial = init_random(arch.with_class_count(classes), stage_seed);
    } else {
      record.initial = resize_classifier(result.net, classes, stage_seed);
      if (stage.reinit_classifier) {
        record.initial = reinit_classifier(record.initial, stage_seed);
      } else if (options.plan.reuse_hidden_classifier) {
        record.initial = reinit_classifier(record.initial, stage_seed, true);
      }
    }

    TrainConfig config = options.train;
    config.learning_rate = stage.learning_rate;
    config.seed = stage_seed;
    config.frozen_below =
        stage.mode == StageMode::FrozenFeatures ? frozen_boundary(record.initial.arch, options.retrain_first_fc) : 0;
    if (!on_target && options.source_max_epochs) {
      config.max_epochs = *options.source_max_epochs;
      config.plateau_window = std::min(config.plateau_window, config.max_epochs);
    }

    try {
      TrainResult trained = train(record.initial, *train_set, data.val, config);
      record.final = std::move(trained.net);
      record.log = std::move(trained.log);
    } catch (const DivergenceError& e) {
      auto logs = result.logs();
      logs.push_back(e.log());
      throw ProcessError(fmt::format("{} stage {} ({}) failed: {}", to_string(kind), k + 1, to_string(stage.domain), e.what()),
                         std::move(logs));
    }

    if (options.checkpoint_dir) {
      save_checkpoint(record.final, *options.checkpoint_dir / fmt::format("{}_{}_{}.ckpt", to_string(kind), k + 1, seed));
    }
    if (options.cache && !on_target) options.cache->entries.emplace(cache_key, record);
    result.net = record.final;
    result.stages.push_back(std::move(record));
  }
  return result;
}

}  // namespace stlb
