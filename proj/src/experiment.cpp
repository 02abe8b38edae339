#include "stlb/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "stlb/metrics.hpp"

namespace stlb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

std::string file_hash(const fs::path& path) { return hex64(hash_string(read_text(path))); }

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

json domain_to_json(const DomainSpec& d) {
  return {{"class_count", d.class_count}, {"examples_per_class", d.examples_per_class},
          {"eval_per_class", d.eval_per_class}, {"image_size", d.image_size},
          {"seed", d.seed},                   {"imbalance", d.imbalance}};
}

json domains_to_json(const ExperimentSpec& s) {
  json out = json::object();
  for (const auto& [kind, d] : s.domains) out[to_string(kind)] = domain_to_json(d);
  return out;
}

json results_relevant_json(const ExperimentSpec& s) {
  json procs = json::array();
  for (ProcessKind k : s.processes) procs.push_back(to_string(k));
  json train = {{"momentum", s.train.momentum},
                {"batch_size", s.train.batch_size},
                {"plateau_window", s.train.plateau_window},
                {"plateau_epsilon", s.train.plateau_epsilon},
                {"max_epochs", s.train.max_epochs}};
  if (s.source_max_epochs) train["source_max_epochs"] = *s.source_max_epochs;
  return {{"arch", s.arch},
          {"domains", domains_to_json(s)},
          {"processes", procs},
          {"seeds", s.seeds},
          {"r_grid", s.r_grid},
          {"train", train},
          {"transfer",
           {{"first_learning_rate", s.plan.first_learning_rate},
            {"transfer_learning_rate", s.plan.transfer_learning_rate},
            {"reuse_hidden_classifier", s.plan.reuse_hidden_classifier},
            {"retrain_first_fc", s.retrain_first_fc}}}};
}

std::string r_label(double r) { return fmt::format("{:.2f}", r); }

}  // namespace

// ---------------------------------------------------------------------------
// Spec

void ExperimentSpec::validate() const {
  if (arch != "compact" && arch != "mini") throw ConfigError("arch must be 'compact' or 'mini', got '" + arch + "'");
  if (domains.empty()) throw ConfigError("spec declares no domains");
  std::optional<Index> size;
  for (const auto& [kind, d] : domains) {
    if (d.kind != kind) throw ConfigError("domain entry kind mismatch");
    d.validate();
    if (size && *size != d.image_size) throw ConfigError("all domains must share one image_size");
    size = d.image_size;
  }
  for (ProcessKind p : processes) {
    for (const Stage& st : build_plan(p, plan).stages) {
      if (!domains.contains(st.domain)) {
        throw ConfigError(fmt::format("process {} needs domain '{}', which the experiment does not declare", to_string(p),
                                      to_string(st.domain)));
      }
    }
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (r_grid.empty()) throw ConfigError("r grid is empty");
  for (double r : r_grid) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError(fmt::format("r = {} is outside (0, 1]", r));
  }
  if (jobs == 0) throw ConfigError("jobs must be at least 1");
  if (source_max_epochs && *source_max_epochs == 0) throw ConfigError("source_max_epochs must be positive");
  train.validate();
}

std::string ExperimentSpec::config_hash() const { return hex64(hash_string(results_relevant_json(*this).dump())); }

std::string ExperimentSpec::data_hash() const { return hex64(hash_string(domains_to_json(*this).dump())); }

ArchitectureSpec ExperimentSpec::architecture(DomainKind domain) const {
  const DomainSpec& d = domains.at(domain);
  return arch == "mini" ? mini_alex(d.class_count, d.image_size) : compact_alex(d.class_count, d.image_size);
}

ProcessOptions ExperimentSpec::process_options() const {
  ProcessOptions o;
  o.plan = plan;
  o.train = train;
  o.source_max_epochs = source_max_epochs;
  o.retrain_first_fc = retrain_first_fc;
  return o;
}

ExperimentSpec parse_spec(std::string_view json_text, const fs::path& base_dir) {
  ExperimentSpec s;
  try {
    const json j = json::parse(json_text);
    s.arch = get_or<std::string>(j, "arch", s.arch);
    s.output_dir = get_or<std::string>(j, "output_dir", "out");
    if (s.output_dir.is_relative() && !base_dir.empty()) s.output_dir = base_dir / s.output_dir;

    if (!j.contains("domains")) throw ConfigError("spec needs a 'domains' object");
    for (const auto& [name, dj] : j.at("domains").items()) {
      DomainSpec d;
      d.kind = domain_kind_from_string(name);
      d.class_count = get_or<Index>(dj, "class_count", max_classes(d.kind));
      d.examples_per_class = get_or<Index>(dj, "examples_per_class", d.examples_per_class);
      d.eval_per_class = get_or<Index>(dj, "eval_per_class", d.eval_per_class);
      d.image_size = get_or<Index>(dj, "image_size", d.image_size);
      d.seed = get_or<std::uint64_t>(dj, "seed", d.seed);
      d.imbalance = get_or<double>(dj, "imbalance", d.imbalance);
      s.domains[d.kind] = d;
    }

    if (j.contains("processes")) {
      for (const auto& p : j.at("processes")) s.processes.push_back(process_from_string(p.get<std::string>()));
    } else {
      s.processes.assign(std::begin(kAllProcesses), std::end(kAllProcesses));
    }
    s.seeds = get_or<std::vector<std::uint64_t>>(j, "seeds", {1});
    s.r_grid = get_or<std::vector<double>>(j, "r_grid", {1.0});

    if (j.contains("train")) {
      const json& t = j.at("train");
      s.train.momentum = get_or(t, "momentum", s.train.momentum);
      s.train.batch_size = get_or(t, "batch_size", s.train.batch_size);
      s.train.plateau_window = get_or(t, "plateau_window", s.train.plateau_window);
      s.train.plateau_epsilon = get_or(t, "plateau_epsilon", s.train.plateau_epsilon);
      s.train.max_epochs = get_or(t, "max_epochs", s.train.max_epochs);
      if (t.contains("source_max_epochs")) s.source_max_epochs = t.at("source_max_epochs").get<std::size_t>();
    }
    if (j.contains("transfer")) {
      const json& t = j.at("transfer");
      s.plan.first_learning_rate = get_or(t, "first_learning_rate", s.plan.first_learning_rate);
      s.plan.transfer_learning_rate = get_or(t, "transfer_learning_rate", s.plan.transfer_learning_rate);
      s.plan.reuse_hidden_classifier = get_or(t, "reuse_hidden_classifier", s.plan.reuse_hidden_classifier);
      s.retrain_first_fc = get_or(t, "retrain_first_fc", s.retrain_first_fc);
    }
    s.jobs = get_or<std::size_t>(j, "jobs", 1);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment spec: ") + e.what());
  }
  s.validate();
  return s;
}

ExperimentSpec load_spec(const fs::path& path) { return parse_spec(read_text(path), path.parent_path()); }

void apply_env_overrides(ExperimentSpec& spec) {
  if (const char* v = std::getenv("STLB_SEED"); v && *v) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(v, &end, 10);
    if (*end != '\0') throw ConfigError(fmt::format("STLB_SEED must be an unsigned integer, got '{}'", v));
    spec.seeds = {seed};
  }
}

fs::path data_dir(const ExperimentSpec& spec) { return spec.output_dir / "data"; }
fs::path manifest_path(const ExperimentSpec& spec) { return data_dir(spec) / "manifest.json"; }
fs::path results_dir(const ExperimentSpec& spec) { return spec.output_dir / "results"; }

// ---------------------------------------------------------------------------
// Data

Manifest load_manifest(const fs::path& path) {
  Manifest m;
  try {
    const json j = json::parse(read_text(path));
    m.data_hash = j.at("data_hash").get<std::string>();
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({domain_kind_from_string(e.at("domain").get<std::string>()), e.at("path").get<std::string>(),
                           e.at("label").get<int>(), e.at("split").get<std::string>(), e.at("hash").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed manifest {}: {}", path.string(), e.what()), 0);
  }
  return m;
}

namespace {

bool manifest_current(const ExperimentSpec& spec) {
  const fs::path mpath = manifest_path(spec);
  if (!fs::exists(mpath)) return false;
  try {
    const Manifest m = load_manifest(mpath);
    if (m.data_hash != spec.data_hash()) return false;
    const fs::path root = data_dir(spec);
    for (const ManifestEntry& e : m.entries) {
      const fs::path p = root / e.path;
      if (!fs::exists(p) || file_hash(p) != e.hash) return false;
    }
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

GenerateResult cmd_generate(const ExperimentSpec& spec) {
  spec.validate();
  GenerateResult result{manifest_path(spec), false};
  if (manifest_current(spec)) return result;

  const fs::path root = data_dir(spec);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw Error(fmt::format("cannot create {}: {}", root.string(), ec.message()));

  json entries = json::array();
  for (const auto& [kind, d] : spec.domains) {
    const PatchSet set = generate_domain(d);
    std::vector<Index> counter(static_cast<std::size_t>(d.class_count) * 2, 0);
    auto emit = [&](const Dataset& data, const char* split, int stream) {
      for (const Example& ex : data) {
        Index& n = counter[static_cast<std::size_t>(ex.label) * 2 + stream];
        const fs::path rel = fs::path(to_string(kind)) / fmt::format("{:02}", ex.label) / split / fmt::format("{:05}.pgm", n++);
        fs::create_directories((root / rel).parent_path(), ec);
        if (ec) throw Error(fmt::format("cannot create {}: {}", (root / rel).parent_path().string(), ec.message()));
        const auto bytes = encode_pgm(to_image(ex.image));
        write_text(root / rel, std::string(bytes.begin(), bytes.end()));
        entries.push_back({{"domain", to_string(kind)},
                           {"path", rel.generic_string()},
                           {"label", ex.label},
                           {"split", split},
                           {"hash", hex64(hash_string(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())))}});
      }
    };
    emit(set.train, "train", 0);
    emit(set.eval, "eval", 1);
  }
  const json manifest = {{"data_hash", spec.data_hash()}, {"domains", domains_to_json(spec)}, {"entries", entries}};
  write_text(result.manifest, manifest.dump(1) + "\n");
  result.regenerated = true;
  return result;
}

DomainSets load_domain_sets(const ExperimentSpec& spec) {
  const fs::path mpath = manifest_path(spec);
  if (!fs::exists(mpath)) throw ConfigError("no generated data at " + mpath.string() + "; run generate first");
  const Manifest m = load_manifest(mpath);
  if (m.data_hash != spec.data_hash()) {
    throw ConfigError("generated data at " + data_dir(spec).string() + " does not match the experiment file; run generate again");
  }
  DomainSets sets;
  const fs::path root = data_dir(spec);
  for (const ManifestEntry& e : m.entries) {
    DomainData& d = sets[e.domain];
    Dataset& target = e.split == "train" ? d.train : d.val;
    target.push_back({to_tensor(load_pgm(root / e.path)), e.label});
  }
  return sets;
}

// ---------------------------------------------------------------------------
// Grid

namespace {

struct Cell {
  ProcessKind process;
  std::uint64_t seed;
  double r;
};

struct CellRow {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, loss = 0;
};

std::string cell_key(ProcessKind p, std::uint64_t seed, double r) {
  return fmt::format("{}/{}/{}", to_string(p), seed, r_label(r));
}

json row_to_json(const CellRow& row) {
  return {{"accuracy", row.accuracy}, {"precision", row.precision}, {"recall", row.recall}, {"f1", row.f1}, {"loss", row.loss}};
}

CellRow row_from_json(const json& j) {
  return {j.at("accuracy").get<double>(), j.at("precision").get<double>(), j.at("recall").get<double>(),
          j.at("f1").get<double>(), j.at("loss").get<double>()};
}

std::map<std::string, CellRow> read_progress(const fs::path& path, const std::string& config_hash) {
  std::map<std::string, CellRow> done;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;  // torn final line of an interrupted run
    if (j.value("config_hash", "") != config_hash || j.value("status", "") != "ok") continue;
    done[j.at("cell").get<std::string>()] = row_from_json(j.at("row"));
  }
  return done;
}

CellRow run_cell(const ExperimentSpec& spec, const DomainSets& sets, const Cell& cell, StageCache& cache) {
  ProcessOptions options = spec.process_options();
  options.cache = &cache;
  const fs::path ckpt = results_dir(spec) / "ckpt" / ("r" + r_label(cell.r));
  fs::create_directories(ckpt);
  options.checkpoint_dir = ckpt;

  const ProcessResult result =
      run_process(cell.process, sets, spec.architecture(DomainKind::Target), cell.seed, cell.r, options);

  const fs::path logs = results_dir(spec) / "logs";
  fs::create_directories(logs);
  for (std::size_t k = 0; k < result.stages.size(); ++k) {
    write_train_log_csv(result.stages[k].log, logs / fmt::format("{}_{}_{}_r{}.csv", to_string(cell.process), k + 1,
                                                                  cell.seed, r_label(cell.r)));
  }

  const Dataset& eval = sets.at(DomainKind::Target).val;
  const DatasetScore s = score(result.net, eval);
  std::vector<int> labels;
  labels.reserve(eval.size());
  for (const Example& e : eval) labels.push_back(e.label);
  ConfusionMatrix cm(spec.domains.at(DomainKind::Target).class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], s.predictions[i]);
  const Summary sum = summarize(cm);
  return {sum.accuracy, sum.precision, sum.recall, sum.f1, s.loss};
}

void write_results(const ExperimentSpec& spec, const std::map<std::string, CellRow>& rows) {
  const std::string hash = spec.config_hash();
  std::string csv = "process,seed,r,config_hash,accuracy,precision,recall,f1,loss\n";
  std::string slopes = "process,A_acc,A_loss,b,residual\n";
  for (ProcessKind p : spec.processes) {
    std::vector<std::pair<double, double>> acc_pts, loss_pts;
    for (double r : spec.r_grid) {
      double acc = 0, loss = 0;
      std::size_t n = 0;
      for (std::uint64_t seed : spec.seeds) {
        const auto it = rows.find(cell_key(p, seed, r));
        if (it == rows.end()) continue;
        const CellRow& row = it->second;
        csv += fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", to_string(p), seed, r_label(r), hash,
                           row.accuracy, row.precision, row.recall, row.f1, row.loss);
        acc += row.accuracy;
        loss += row.loss;
        ++n;
      }
      if (n > 0) {
        acc_pts.emplace_back(r, acc / static_cast<double>(n));
        loss_pts.emplace_back(r, loss / static_cast<double>(n));
      }
    }
    try {
      const SlopeFit a = fit_slope(acc_pts);
      const SlopeFit l = fit_slope(loss_pts);
      slopes += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", to_string(p), a.slope, l.slope, a.intercept,
                            a.residual_rms);
    } catch (const UsageError&) {
      slopes += fmt::format("{},nan,nan,nan,nan\n", to_string(p));
    }
  }
  write_text(results_dir(spec) / "results.csv", csv);
  write_text(results_dir(spec) / "slopes.csv", slopes);
}

}  // namespace

RunSummary cmd_run(const ExperimentSpec& spec, const RunOptions& options) {
  spec.validate();
  const DomainSets sets = load_domain_sets(spec);
  const fs::path out = results_dir(spec);
  fs::create_directories(out);
  const fs::path progress_path = out / "progress.jsonl";
  const std::string hash = spec.config_hash();

  std::map<std::string, CellRow> rows;
  if (options.resume) {
    rows = read_progress(progress_path, hash);
  } else {
    write_text(progress_path, "");
  }

  // One work item per seed so trained source stages are shared across r and
  // processes through that seed's cache.
  std::vector<std::vector<Cell>> by_seed;
  RunSummary summary;
  for (std::uint64_t seed : spec.seeds) {
    std::vector<Cell> cells;
    for (double r : spec.r_grid) {
      for (ProcessKind p : spec.processes) {
        ++summary.cells;
        if (rows.contains(cell_key(p, seed, r))) {
          ++summary.completed;
        } else {
          cells.push_back({p, seed, r});
        }
      }
    }
    by_seed.push_back(std::move(cells));
  }

  std::mutex mu;
  std::ofstream progress(progress_path, std::ios::app);
  std::size_t fresh = 0;
  std::atomic<bool> stop{false};
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < by_seed.size(); i = next++) {
      StageCache cache;
      for (const Cell& cell : by_seed[i]) {
        if (stop) return;
        const std::string key = cell_key(cell.process, cell.seed, cell.r);
        json line = {{"config_hash", hash}, {"cell", key}};
        try {
          const CellRow row = run_cell(spec, sets, cell, cache);
          line["status"] = "ok";
          line["row"] = row_to_json(row);
          std::lock_guard lock(mu);
          rows[key] = row;
          ++summary.completed;
        } catch (const Error& e) {
          line["status"] = "failed";
          line["error"] = e.what();
          std::lock_guard lock(mu);
          ++summary.failed;
          std::cerr << "cell " << key << " failed: " << e.what() << "\n";
        }
        std::lock_guard lock(mu);
        progress << line.dump() << "\n" << std::flush;
        std::cerr << fmt::format("[{}/{}] {} {}\n", summary.completed + summary.failed, summary.cells, key,
                                 line["status"].get<std::string>());
        if (options.stop_after && ++fresh >= *options.stop_after) stop = true;
      }
    }
  };

  const std::size_t threads = std::min(spec.jobs, std::max<std::size_t>(by_seed.size(), 1));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  summary.interrupted = stop && summary.completed + summary.failed < summary.cells;
  write_results(spec, rows);
  return summary;
}

// ---------------------------------------------------------------------------
// Saliency and report

SaliencyOutput cmd_saliency(const fs::path& checkpoint, const fs::path& image, const std::string& layer,
                            const fs::path& out_dir, const ChannelSelection& selection) {
  const Network net = load_checkpoint(checkpoint);
  const auto index = net.arch.find(layer);
  if (!index) throw ConfigError(fmt::format("checkpoint has no layer named '{}'", layer));

  Tensor4d x = to_tensor(load_pgm(image));
  const Shape4& in = net.arch.input_shape;
  if (x.shape().h != in.h || x.shape().w != in.w) {
    throw ConfigError(fmt::format("image is {}x{} but the network expects {}x{}", x.shape().h, x.shape().w, in.h, in.w));
  }
  if (in.c != 1) x = replicate_channels(x, in.c);

  const ForwardTrace trace = forward(net, x);
  const SaliencyImage sal = backproject(net, trace, {*index, selection});

  fs::create_directories(out_dir);
  const std::string stem = image.stem().string() + "_" + layer;
  SaliencyOutput files{out_dir / (stem + ".pgm"), out_dir / (stem + ".csv")};
  save_pgm(to_image(sal.magnitude), files.magnitude_pgm);

  std::string csv;
  const Shape4& s = sal.raw.shape();
  for (Index c = 0; c < s.c; ++c) {
    for (Index y = 0; y < s.h; ++y) {
      for (Index xx = 0; xx < s.w; ++xx) {
        csv += fmt::format("{}{:.17g}", xx ? "," : "", sal.raw(0, c, y, xx));
      }
      csv += "\n";
    }
  }
  write_text(files.signed_csv, csv);
  return files;
}

void cmd_report(const fs::path& results, std::ostream& out) {
  struct Acc {
    std::map<std::string, std::vector<CellRow>> by_r;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> table;

  std::ifstream in(results / "results.csv");
  if (!in) throw Error("cannot open " + (results / "results.csv").string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (f.size() != 9) throw FormatError("malformed results row: " + line, 0);
    if (!table.contains(f[0])) order.push_back(f[0]);
    table[f[0]].by_r[f[2]].push_back({std::stod(f[4]), std::stod(f[5]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8])});
  }

  auto mean = [](const std::vector<CellRow>& v, double CellRow::*m) {
    double s = 0;
    for (const auto& x : v) s += x.*m;
    return s / static_cast<double>(v.size());
  };

  out << "Classification results at the largest r (mean over seeds)\n";
  out << fmt::format("{:<6}{:<18}{:>6}{:>10}{:>10}{:>10}{:>10}{:>10}\n", "", "process", "r", "accuracy", "precision",
                     "recall", "f1", "loss");
  for (const std::string& name : order) {
    const auto& [r, rows] = *table[name].by_r.rbegin();
    const char* label = "";
    for (ProcessKind k : kAllProcesses) {
      if (name == to_string(k)) label = table_label(k);
    }
    out << fmt::format("{:<6}{:<18}{:>6}{:>10.4f}{:>10.4f}{:>10.4f}{:>10.4f}{:>10.4f}\n", label, name, r,
                       mean(rows, &CellRow::accuracy), mean(rows, &CellRow::precision), mean(rows, &CellRow::recall),
                       mean(rows, &CellRow::f1), mean(rows, &CellRow::loss));
  }

  std::ifstream sin(results / "slopes.csv");
  if (!sin) return;
  std::getline(sin, line);
  std::vector<std::pair<std::string, std::array<double, 3>>> slopes;
  while (std::getline(sin, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (f.size() != 5) throw FormatError("malformed slopes row: " + line, 0);
    slopes.push_back({f[0], {std::stod(f[1]), std::stod(f[3]), std::stod(f[2])}});
  }
  std::vector<double> a;
  for (const auto& s : slopes) a.push_back(s.second[0]);
  out << "\nRobustness: accuracy = A r + b, most robust first\n";
  out << fmt::format("{:<18}{:>10}{:>10}{:>10}\n", "process", "A", "b", "A_loss");
  for (std::size_t i : rank_by_robustness(a)) {
    out << fmt::format("{:<18}{:>10.4f}{:>10.4f}{:>10.4f}\n", slopes[i].first, slopes[i].second[0], slopes[i].second[1],
                       slopes[i].second[2]);
  }
}

}  // namespace stlb
