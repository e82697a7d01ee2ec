#include "rebasin/cli.hpp"

#include "rebasin/barrier.hpp"
#include "rebasin/linalg.hpp"
#include "rebasin/matching.hpp"
#include "rebasin/merging.hpp"
#include "rebasin/model_graph.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

namespace rebasin {

namespace fs = std::filesystem;
using nlohmann::json;

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (!kv.emplace(key, trim(line.substr(eq + 1))).second)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return kv;
}

namespace {

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

Index parse_count(const std::string& key, const std::string& v) {
  const double x = parse_real(key, v);
  if (x < 0 || x != static_cast<double>(static_cast<Index>(x)))
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<Index>(x);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv) {
  std::map<std::string, std::string> model, task, train;
  for (const auto& [key, value] : kv) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (section == "model") model[name] = value;
    else if (section == "task") task[name] = value;
    else if (section == "train") train[name] = value;
    else throw ConfigError("unknown config key '" + key + "' (expected a model., task. or train. prefix)");
  }
  ExperimentConfig c;
  c.task = TaskSpec::from_kv(task);
  if (!model.count("vocab")) model["vocab"] = std::to_string(c.task.vocab);
  if (!model.count("max_seq"))
    model["max_seq"] = std::to_string(c.task.kind == TaskKind::modular_addition ? 3 : c.task.seq_len);
  c.model = TransformerConfig::from_kv(model);
  for (const auto& [k, v] : train) {
    if (k == "epochs") c.train.epochs = parse_count("train." + k, v);
    else if (k == "lr") c.train.adam.lr = parse_real("train." + k, v);
    else if (k == "beta1") c.train.adam.beta1 = parse_real("train." + k, v);
    else if (k == "beta2") c.train.adam.beta2 = parse_real("train." + k, v);
    else if (k == "weight_decay") c.train.adam.weight_decay = parse_real("train." + k, v);
    else if (k == "cosine_decay") c.train.cosine_decay = parse_count("train." + k, v) != 0;
    else if (k == "eval_every") c.train.eval_every = parse_count("train." + k, v);
    else if (k == "target_test_loss") c.train.target_test_loss = parse_real("train." + k, v);
    else if (k == "divergence_factor") c.train.divergence_factor = parse_real("train." + k, v);
    else throw ConfigError("unknown config key 'train." + k + "'");
  }
  if (c.train.adam.lr <= 0.0) throw ConfigError("train.lr must be > 0");
  return c;
}

namespace {

struct Options {
  int threads = 1;
  // train
  std::string task, config, out, metrics;
  std::uint64_t seed = 0;
  Index epochs = -1;
  // align / barrier
  std::string a, b, data, method = "weight", out_maps, out_aligned, split = "test", match_split = "train", csv;
  Index grid = 25, wm_iterations = 5, learn_iterations = 200;
  double lr = 1e-2, noise = 0.0;
  std::string sampler = "uniform-0.4-0.6", init = "weight-matching", head_space = "circuits";
  // merge
  std::string models;
  Index iters = 3, refine_iters = 200, samples = 32;
  bool refine = false;
  double alpha = 0.1;
  // expand
  std::string model;
  Index target_dim = 0;
  // analyze
  std::string o_wm, o_lm;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ContractViolation(what + ": no path given");
  if (!fs::is_regular_file(path)) throw ContractViolation(what + ": file '" + path + "' does not exist");
}

void require_writable(const std::string& path, const std::string& what) {
  if (path.empty()) throw ContractViolation(what + ": no output path given");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent))
    throw ContractViolation(what + ": directory '" + parent.string() + "' does not exist");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f << text;
  if (!f) throw FormatError("write failed for '" + path + "'");
}

Checkpoint load_absorbed(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  Absorbed ab = absorb_layernorm(c.params, c.config);
  return {std::move(ab.params), ab.config};
}

std::vector<Batch> load_data(const std::string& path, const std::string& split, const TransformerConfig& model) {
  require_file(path, "--data");
  const ExperimentConfig exp = ExperimentConfig::from_kv(read_kv_file(path));
  if (exp.task.vocab > model.vocab)
    throw ConfigError("data config uses " + std::to_string(exp.task.vocab) + " tokens but the model vocab is " +
                      std::to_string(model.vocab));
  const Dataset d = generate_dataset(exp.task);
  if (split != "test" && split != "train") throw ConfigError("--split must be test or train");
  const std::vector<Batch>& out = split == "test" ? d.test : d.train;
  if (!out.empty() && out.front().inputs.cols() > model.max_seq)
    throw ConfigError("data sequences are longer than the model max_seq " + std::to_string(model.max_seq));
  return out;
}

void require_same_config(const TransformerConfig& a, const TransformerConfig& b) {
  if (!(a == b)) throw ConfigError("models have different configs; they cannot be aligned or interpolated");
}

std::string sibling(const std::string& path, const std::string& ext) {
  return fs::path(path).replace_extension(ext).string();
}

json cmd_train(const Options& o) {
  std::map<std::string, std::string> kv;
  if (!o.config.empty()) {
    require_file(o.config, "--config");
    kv = read_kv_file(o.config);
  }
  if (!o.task.empty()) kv["task.task"] = o.task;
  ExperimentConfig exp = ExperimentConfig::from_kv(kv);
  require_writable(o.out, "--out");
  if (!o.metrics.empty()) require_writable(o.metrics, "--metrics");
  exp.train.seed = o.seed;
  if (o.epochs >= 0) exp.train.epochs = o.epochs;
  const Dataset data = generate_dataset(exp.task);
  std::unique_ptr<std::ofstream> metrics;
  if (!o.metrics.empty()) metrics = std::make_unique<std::ofstream>(o.metrics);
  const TrainResult r = train(exp.model, data, exp.train, [&](const EpochMetrics& m) {
    if (metrics) *metrics << to_json_line(m) << '\n';
  });
  save_checkpoint(r.params, exp.model, o.out);
  json j{{"command", "train"}, {"out", o.out}, {"epochs", r.epochs_run}, {"seed", o.seed}};
  if (!r.metrics.empty()) {
    j["test_loss"] = r.metrics.back().test_loss;
    j["test_accuracy"] = r.metrics.back().test_accuracy;
    j["train_loss"] = r.metrics.back().train_loss;
  }
  return j;
}

json cmd_align(const Options& o) {
  require_file(o.a, "--a");
  require_file(o.b, "--b");
  require_writable(o.out_maps, "--out-maps");
  require_writable(o.out_aligned, "--out-aligned");
  MatchConfig mc;
  mc.method = parse_method(o.method);
  mc.wm_iterations = o.wm_iterations;
  mc.learn_iterations = o.learn_iterations;
  mc.lr = o.lr;
  mc.sampler = parse_sampler(o.sampler);
  mc.init = parse_init(o.init);
  mc.noise = o.noise;
  mc.seed = o.seed;
  mc.head_space = parse_head_space(o.head_space);
  mc.validate();
  const bool needs_data =
      mc.method == MatchMethod::activation || mc.method == MatchMethod::learned || mc.method == MatchMethod::soft;
  if (needs_data && o.data.empty())
    throw ContractViolation(std::string("--method ") + to_string(mc.method) + " needs --data");

  const Checkpoint a = load_absorbed(o.a), b = load_absorbed(o.b);
  require_same_config(a.config, b.config);
  const std::vector<Batch> data = o.data.empty() ? std::vector<Batch>{} : load_data(o.data, o.match_split, a.config);

  json j{{"command", "align"}, {"method", to_string(mc.method)}};
  AlignmentMaps maps;
  if (mc.method == MatchMethod::soft) {
    const SoftMatchResult r = soft_learned_match(a.params, b.params, a.config, data, mc);
    maps = r.hard;
    j["endpoint_deviation"] = r.endpoint_deviation;
    j["warnings"] = r.warnings;
  } else {
    const MatchResult r = match_models(a.params, b.params, a.config, data, mc);
    maps = r.maps;
    j["objective"] = r.objective;
    j["sweeps"] = r.sweeps;
    j["warnings"] = r.warnings;
  }
  save_maps(maps, o.out_maps);
  save_checkpoint(apply_alignment(b.params, b.config, maps), b.config, o.out_aligned);
  j["out_maps"] = o.out_maps;
  j["out_aligned"] = o.out_aligned;
  return j;
}

json cmd_barrier(const Options& o) {
  require_file(o.a, "--a");
  require_file(o.b, "--b");
  require_writable(o.out, "--out");
  const Checkpoint a = load_absorbed(o.a), b = load_absorbed(o.b);
  require_same_config(a.config, b.config);
  const std::vector<Batch> data = load_data(o.data, o.split, a.config);
  const BarrierReport r = barrier(a.params, b.params, a.config, data, o.grid, parse_head_space(o.head_space), o.threads);
  const std::string csv = o.csv.empty() ? sibling(o.out, ".csv") : o.csv;
  write_text(o.out, to_json(r));
  write_text(csv, to_csv(r));
  return {{"command", "barrier"}, {"barrier", r.barrier}, {"loss_a", r.loss_a}, {"loss_b", r.loss_b},
          {"out", o.out}, {"csv", csv}};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json cmd_merge(const Options& o) {
  const std::vector<std::string> paths = split_list(o.models);
  if (paths.size() < 2) throw ContractViolation("--models needs at least two comma-separated checkpoints");
  for (const auto& p : paths) require_file(p, "--models");
  if (o.out.empty()) throw ContractViolation("--out: no output directory given");
  fs::create_directories(o.out);
  std::vector<TransformerParams> models;
  TransformerConfig config;
  for (std::size_t m = 0; m < paths.size(); ++m) {
    Checkpoint c = load_absorbed(paths[m]);
    if (m == 0) config = c.config;
    else require_same_config(config, c.config);
    models.push_back(std::move(c.params));
  }
  const std::vector<Batch> data = load_data(o.data, o.split, config);
  const MatchMethod method = parse_method(o.method);
  const HeadSpace space = parse_head_space(o.head_space);

  UniverseConfig uc;
  uc.iterations = o.iters;
  uc.method = method;
  uc.wm_iterations = o.wm_iterations;
  uc.seed = o.seed;
  uc.head_space = space;
  Universe u = universe_match(models, config, data, uc);
  json j{{"command", "merge"}, {"iterations", u.iteration}, {"universe_multi_barrier", u.multi_barrier}};

  const SimplexReport vanilla =
      multi_barrier(models, config, data, o.samples, SimplexMode::uniform_simplex, o.seed, space, o.threads);
  write_text((fs::path(o.out) / "simplex_vanilla.csv").string(), to_csv(vanilla));
  j["vanilla"] = {{"barrier", vanilla.barrier}, {"centroid_deviation", vanilla.centroid_deviation}};

  auto report = [&](const Universe& uni, const std::string& name) {
    const SimplexReport s = multi_barrier(aligned_models(models, config, uni), config, data, o.samples,
                                          SimplexMode::uniform_simplex, o.seed, space, o.threads);
    write_text((fs::path(o.out) / ("simplex_" + name + ".csv")).string(), to_csv(s));
    j[name] = {{"barrier", s.barrier}, {"centroid_deviation", s.centroid_deviation}};
  };
  report(u, "universe");
  if (o.refine) {
    RefineConfig rc;
    rc.iterations = o.refine_iters;
    rc.alpha = o.alpha;
    rc.lr = o.lr;
    rc.seed = o.seed;
    rc.head_space = space;
    u = learned_refine(u, models, config, data, rc);
    report(u, "refined");
  }
  for (std::size_t m = 0; m < u.maps.size(); ++m)
    save_maps(u.maps[m], (fs::path(o.out) / ("maps_" + std::to_string(m) + ".bin")).string());
  const Merged merged = merge_models(aligned_models(models, config, u),
                                     std::vector<double>(models.size(), 1.0 / static_cast<double>(models.size())),
                                     config, space);
  save_checkpoint(merged.params, merged.config, (fs::path(o.out) / "merged.ckpt").string());
  write_text((fs::path(o.out) / "report.json").string(), j.dump(2));
  return j;
}

json cmd_expand(const Options& o) {
  require_file(o.model, "--model");
  require_writable(o.out, "--out");
  const Checkpoint c = load_absorbed(o.model);
  if (o.target_dim < c.config.d_model)
    throw ConfigError("--target-dim " + std::to_string(o.target_dim) + " is smaller than d_model " +
                      std::to_string(c.config.d_model));
  Rng rng(o.seed);
  const Matrix q = random_orthogonal(o.target_dim, rng);
  const Matrix map = q.leftCols(c.config.d_model);
  const auto [wide, wide_config] = expand_width(c.params, c.config, map);

  // Equivalence on seeded random token sequences.
  TokenMatrix tokens(16, c.config.max_seq);
  for (Index i = 0; i < tokens.size(); ++i)
    tokens(i) = static_cast<std::int32_t>(rng.index(static_cast<std::size_t>(c.config.vocab)));
  const double deviation =
      (forward(wide, wide_config, tokens) - forward(c.params, c.config, tokens)).cwiseAbs().maxCoeff();
  save_checkpoint(wide, wide_config, o.out);
  json j{{"command", "expand"}, {"out", o.out},
         {"from_dim", c.config.d_model}, {"to_dim", wide_config.d_model},
         {"max_logit_deviation", deviation}, {"equivalent", deviation <= 1e-6}};
  write_text(sibling(o.out, ".json"), j.dump(2));
  return j;
}

json cmd_analyze(const Options& o) {
  require_file(o.o_wm, "--o-wm");
  require_file(o.o_lm, "--o-lm");
  require_writable(o.out, "--out");
  const AlignmentMaps wm = load_maps(o.o_wm), lm = load_maps(o.o_lm);
  const AngleReport r = orthogonal_diff_analysis(wm.o, lm.o);
  std::ostringstream csv;
  csv.precision(17);
  csv << "index,angle_wm,angle_diff\n";
  for (std::size_t i = 0; i < r.angles_wm.size(); ++i) csv << i << ',' << r.angles_wm[i] << ',' << r.angles_diff[i] << '\n';
  write_text(o.out, csv.str());
  return {{"command", "analyze"}, {"out", o.out},
          {"resultant_wm", r.resultant_wm}, {"resultant_diff", r.resultant_diff},
          {"mean_cos_wm", r.mean_cos_wm}, {"mean_cos_diff", r.mean_cos_diff}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"rebasin: symmetry-aware alignment and loss barriers for toy transformers"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "worker cap; 1 is bitwise reproducible")->check(CLI::Range(1, 256));

  auto* train_cmd = app.add_subcommand("train", "train a toy model and write a checkpoint");
  train_cmd->add_option("--task", o.task, "modular-addition, char-copy or char-lm");
  train_cmd->add_option("--config", o.config, "key=value experiment file (model.*, task.*, train.*)");
  train_cmd->add_option("--seed", o.seed, "model initialization seed");
  train_cmd->add_option("--epochs", o.epochs, "override train.epochs");
  train_cmd->add_option("--metrics", o.metrics, "JSON-lines metrics output");
  train_cmd->add_option("--out", o.out, "checkpoint path")->required();

  auto* align_cmd = app.add_subcommand("align", "align model B to model A");
  align_cmd->add_option("--a", o.a)->required();
  align_cmd->add_option("--b", o.b)->required();
  align_cmd->add_option("--method", o.method, "vanilla, weight, activation, learned or soft");
  align_cmd->add_option("--data", o.data, "experiment file describing the matching data");
  align_cmd->add_option("--split", o.match_split, "data split used for matching (default train)");
  align_cmd->add_option("--out-maps", o.out_maps)->required();
  align_cmd->add_option("--out-aligned", o.out_aligned)->required();
  align_cmd->add_option("--seed", o.seed);
  align_cmd->add_option("--head-space", o.head_space, "circuits or weights");
  align_cmd->add_option("--wm-iterations", o.wm_iterations);
  align_cmd->add_option("--learn-iterations", o.learn_iterations);
  align_cmd->add_option("--lr", o.lr);
  align_cmd->add_option("--sampler", o.sampler, "fixed-0.5, uniform-0.4-0.6, uniform-0-1 or gaussian-0.5-0.1");
  align_cmd->add_option("--init", o.init, "weight-matching, identity or random");
  align_cmd->add_option("--noise", o.noise, "soft matching: initialization noise");

  auto* barrier_cmd = app.add_subcommand("barrier", "loss barrier along the linear path");
  barrier_cmd->add_option("--a", o.a)->required();
  barrier_cmd->add_option("--b", o.b)->required();
  barrier_cmd->add_option("--data", o.data)->required();
  barrier_cmd->add_option("--split", o.split, "test or train");
  barrier_cmd->add_option("--grid", o.grid);
  barrier_cmd->add_option("--head-space", o.head_space, "circuits or weights");
  barrier_cmd->add_option("--out", o.out, "JSON report")->required();
  barrier_cmd->add_option("--csv", o.csv, "CSV path (default: report path with .csv)");

  auto* merge_cmd = app.add_subcommand("merge", "universe matching over several models");
  merge_cmd->add_option("--models", o.models, "comma-separated checkpoints")->required();
  merge_cmd->add_option("--data", o.data)->required();
  merge_cmd->add_option("--split", o.split);
  merge_cmd->add_option("--iters", o.iters);
  merge_cmd->add_option("--method", o.method, "weight or activation");
  merge_cmd->add_option("--wm-iterations", o.wm_iterations);
  merge_cmd->add_flag("--refine", o.refine, "learned refinement after universe matching");
  merge_cmd->add_option("--refine-iters", o.refine_iters);
  merge_cmd->add_option("--alpha", o.alpha);
  merge_cmd->add_option("--lr", o.lr);
  merge_cmd->add_option("--samples", o.samples, "Dirichlet draws per simplex report");
  merge_cmd->add_option("--seed", o.seed);
  merge_cmd->add_option("--head-space", o.head_space, "circuits or weights");
  merge_cmd->add_option("--out", o.out, "output directory")->required();

  auto* expand_cmd = app.add_subcommand("expand", "widen the residual stream");
  expand_cmd->add_option("--model", o.model)->required();
  expand_cmd->add_option("--target-dim", o.target_dim)->required();
  expand_cmd->add_option("--seed", o.seed);
  expand_cmd->add_option("--out", o.out)->required();

  auto* analyze_cmd = app.add_subcommand("analyze", "eigen-angle spectra of residual maps");
  analyze_cmd->add_option("--o-wm", o.o_wm, "maps file from weight matching")->required();
  analyze_cmd->add_option("--o-lm", o.o_lm, "maps file from learned matching")->required();
  analyze_cmd->add_option("--out", o.out, "CSV path")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << json{{"error", "usage_error"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }

  try {
    json result;
    if (*train_cmd) result = cmd_train(o);
    else if (*align_cmd) result = cmd_align(o);
    else if (*barrier_cmd) result = cmd_barrier(o);
    else if (*merge_cmd) result = cmd_merge(o);
    else if (*expand_cmd) result = cmd_expand(o);
    else result = cmd_analyze(o);
    out << result.dump() << '\n';
    return 0;
  } catch (const Error& e) {
    err << json{{"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
  } catch (const std::exception& e) {
    err << json{{"error", "internal_error"}, {"message", e.what()}}.dump() << '\n';
  }
  return 1;
}

}  // namespace rebasin
