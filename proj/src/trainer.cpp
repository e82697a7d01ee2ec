#include "rebasin/trainer.hpp"

#include "rebasin/model_graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace rebasin {

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::modular_addition: return "modular-addition";
    case TaskKind::char_copy: return "char-copy";
    case TaskKind::char_lm: return "char-lm";
  }
  return "?";
}

TaskKind parse_task(const std::string& s) {
  if (s == "modular-addition") return TaskKind::modular_addition;
  if (s == "char-copy") return TaskKind::char_copy;
  if (s == "char-lm") return TaskKind::char_lm;
  throw ConfigError("unknown task '" + s + "' (expected modular-addition, char-copy or char-lm)");
}

std::map<std::string, std::string> TaskSpec::to_kv() const {
  return {{"task", to_string(kind)},
          {"vocab", std::to_string(vocab)},
          {"modulus", std::to_string(modulus)},
          {"seq_len", std::to_string(seq_len)},
          {"train_size", std::to_string(train_size)},
          {"test_size", std::to_string(test_size)},
          {"batch_size", std::to_string(batch_size)},
          {"seed", std::to_string(seed)}};
}

TaskSpec TaskSpec::from_kv(const std::map<std::string, std::string>& kv) {
  TaskSpec s;
  auto integer = [](const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size() || x < 0) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("task key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
  };
  for (const auto& [k, v] : kv) {
    if (k == "task") s.kind = parse_task(v);
    else if (k == "vocab") s.vocab = integer(k, v);
    else if (k == "modulus") s.modulus = integer(k, v);
    else if (k == "seq_len") s.seq_len = integer(k, v);
    else if (k == "train_size") s.train_size = integer(k, v);
    else if (k == "test_size") s.test_size = integer(k, v);
    else if (k == "batch_size") s.batch_size = integer(k, v);
    else if (k == "seed") s.seed = static_cast<std::uint64_t>(integer(k, v));
    else throw ConfigError("unknown task config key '" + k + "'");
  }
  s.validate();
  return s;
}

void TaskSpec::validate() const {
  if (train_size < 1 || test_size < 1) throw ConfigError("train_size and test_size must be >= 1");
  switch (kind) {
    case TaskKind::modular_addition:
      if (modulus < 2) throw ConfigError("modulus must be >= 2");
      if (vocab < modulus + 1)
        throw ConfigError("vocab " + std::to_string(vocab) + " too small for modulus " + std::to_string(modulus) +
                          " (needs modulus + 1 tokens)");
      if (train_size + test_size > modulus * modulus)
        throw ConfigError("train_size + test_size exceeds the " + std::to_string(modulus * modulus) +
                          " distinct modular-addition problems");
      break;
    case TaskKind::char_copy:
      if (vocab < 3) throw ConfigError("char-copy needs vocab >= 3");
      if (seq_len < 2 || seq_len % 2 != 0) throw ConfigError("char-copy needs an even seq_len >= 2");
      break;
    case TaskKind::char_lm:
      if (vocab < 2) throw ConfigError("char-lm needs vocab >= 2");
      if (seq_len < 1) throw ConfigError("char-lm needs seq_len >= 1");
      break;
  }
}

namespace {

using Sequence = std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>>;

std::vector<Batch> to_batches(const std::vector<Sequence>& seqs, Index batch_size) {
  std::vector<Batch> out;
  const Index n = static_cast<Index>(seqs.size());
  const Index bs = batch_size > 0 ? batch_size : n;
  for (Index start = 0; start < n; start += bs) {
    const Index rows = std::min(bs, n - start);
    const Index len = static_cast<Index>(seqs[static_cast<std::size_t>(start)].first.size());
    Batch b{TokenMatrix(rows, len), TokenMatrix(rows, len)};
    for (Index r = 0; r < rows; ++r) {
      const Sequence& s = seqs[static_cast<std::size_t>(start + r)];
      for (Index t = 0; t < len; ++t) {
        b.inputs(r, t) = s.first[static_cast<std::size_t>(t)];
        b.targets(r, t) = s.second[static_cast<std::size_t>(t)];
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Sequence> modular_addition(const TaskSpec& spec, Rng& rng) {
  const auto p = static_cast<std::int32_t>(spec.modulus);
  std::vector<Sequence> all;
  for (std::int32_t a = 0; a < p; ++a)
    for (std::int32_t b = 0; b < p; ++b) all.push_back({{a, b, p}, {-1, -1, (a + b) % p}});
  rng.shuffle(all);
  return all;
}

std::vector<Sequence> char_copy(const TaskSpec& spec, Rng& rng) {
  const Index half = spec.seq_len / 2;
  const auto sep = static_cast<std::int32_t>(spec.vocab - 1);
  const Index symbols = spec.vocab - 1;
  std::set<std::vector<std::int32_t>> seen;
  std::vector<Sequence> out;
  const Index wanted = spec.train_size + spec.test_size;
  double space = 1.0;
  for (Index i = 0; i < half && space < 1e18; ++i) space *= static_cast<double>(symbols);
  if (space < static_cast<double>(wanted))
    throw ConfigError("char-copy: only " + std::to_string(static_cast<long long>(space)) +
                      " distinct sequences for the requested split sizes");
  while (static_cast<Index>(out.size()) < wanted) {
    std::vector<std::int32_t> x(static_cast<std::size_t>(half));
    for (auto& t : x) t = static_cast<std::int32_t>(rng.index(static_cast<std::size_t>(symbols)));
    if (!seen.insert(x).second) continue;
    Sequence s;
    s.first = x;
    s.first.push_back(sep);
    s.first.insert(s.first.end(), x.begin(), x.end() - 1);
    s.second.assign(static_cast<std::size_t>(half), -1);
    s.second.insert(s.second.end(), x.begin(), x.end());
    out.push_back(std::move(s));
  }
  return out;
}

// Order-2 Markov corpus with a sparse, seeded transition table.
std::vector<Sequence> char_lm(const TaskSpec& spec, Rng& rng) {
  const Index v = spec.vocab, len = spec.seq_len;
  const Index branching = std::min<Index>(3, v);
  std::vector<std::vector<std::int32_t>> next(static_cast<std::size_t>(v * v));
  for (auto& choices : next)
    for (Index k = 0; k < branching; ++k)
      choices.push_back(static_cast<std::int32_t>(rng.index(static_cast<std::size_t>(v))));
  const Index wanted = spec.train_size + spec.test_size;
  std::set<std::vector<std::int32_t>> seen;
  std::vector<Sequence> out;
  std::int32_t a = 0, b = 1 % static_cast<std::int32_t>(v);
  Index attempts = 0;
  while (static_cast<Index>(out.size()) < wanted) {
    if (++attempts > 100 * wanted) throw ConfigError("char-lm: corpus too repetitive for the requested split sizes");
    std::vector<std::int32_t> window;
    for (Index t = 0; t <= len; ++t) {
      const auto& choices = next[static_cast<std::size_t>(a * v + b)];
      const std::int32_t c = choices[rng.index(choices.size())];
      window.push_back(c);
      a = b;
      b = c;
    }
    if (!seen.insert(window).second) continue;
    Sequence s;
    s.first.assign(window.begin(), window.end() - 1);
    s.second.assign(window.begin() + 1, window.end());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

Dataset generate_dataset(const TaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Sequence> all;
  switch (spec.kind) {
    case TaskKind::modular_addition: all = modular_addition(spec, rng); break;
    case TaskKind::char_copy: all = char_copy(spec, rng); break;
    case TaskKind::char_lm: all = char_lm(spec, rng); break;
  }
  const auto split = all.begin() + spec.train_size;
  const std::vector<Sequence> train(all.begin(), split);
  const std::vector<Sequence> test(split, split + spec.test_size);
  return {to_batches(train, spec.batch_size), to_batches(test, spec.batch_size)};
}

Index target_count(const std::vector<Batch>& batches) {
  Index n = 0;
  for (const Batch& b : batches) n += (b.targets.array() >= 0).count();
  return n;
}

TrainResult train(const TransformerConfig& config, const Dataset& data, const TrainConfig& tc,
                  const MetricsSink& sink) {
  config.validate();
  require(!data.train.empty(), "train: empty training split");
  TrainResult result;
  result.params = init_params(config, tc.seed);
  ad::AdamState state;
  state.seed = tc.seed;
  std::vector<Matrix> tensors = flatten(result.params);
  ad::AdamConfig adam = tc.adam;

  auto record = [&](Index epoch, double train_loss) {
    EpochMetrics m{epoch, train_loss, 0.0, 0.0};
    if (!data.test.empty()) {
      const EvalResult e = evaluate(result.params, config, data.test);
      m.test_loss = e.loss;
      m.test_accuracy = e.accuracy;
    }
    result.metrics.push_back(m);
    if (sink) sink(m);
    return m;
  };

  double initial = 0.0;
  for (Index epoch = 1; epoch <= tc.epochs; ++epoch) {
    if (tc.cosine_decay) {
      const double progress = static_cast<double>(epoch - 1) / static_cast<double>(tc.epochs);
      adam.lr = tc.adam.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    double total = 0.0;
    Index tokens = 0;
    for (const Batch& batch : data.train) {
      ad::Tape tape;
      const ParamVars vars = to_vars(tape, result.params, true);
      const ad::Var l = loss(vars, config, batch);
      const ad::Gradients grads = tape.backward(l);
      const Index n = (batch.targets.array() >= 0).count();
      total += l.value()(0, 0) * static_cast<double>(n);
      tokens += n;
      const std::vector<Matrix> g = flatten(gradients_of(vars, grads));
      ad::adam_step(tensors, g, state, adam);
      unflatten(result.params, tensors);
    }
    const double train_loss = total / static_cast<double>(std::max<Index>(tokens, 1));
    if (!std::isfinite(train_loss))
      throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + " (seed " +
                         std::to_string(tc.seed) + ")");
    if (epoch == 1) initial = train_loss;
    if (train_loss > tc.divergence_factor * initial)
      throw NumericError("training diverged: loss " + std::to_string(train_loss) + " exceeds " +
                         std::to_string(tc.divergence_factor) + "x the initial " + std::to_string(initial) +
                         " at epoch " + std::to_string(epoch) + " (seed " + std::to_string(tc.seed) + ")");
    result.epochs_run = epoch;
    const bool last = epoch == tc.epochs;
    if (last || (tc.eval_every > 0 && epoch % tc.eval_every == 0)) {
      const EpochMetrics m = record(epoch, train_loss);
      if (tc.target_test_loss > 0.0 && !data.test.empty() && m.test_loss <= tc.target_test_loss) break;
    }
  }
  return result;
}

std::string to_json_line(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["test_loss"] = m.test_loss;
  j["test_accuracy"] = m.test_accuracy;
  return j.dump();
}

}  // namespace rebasin
