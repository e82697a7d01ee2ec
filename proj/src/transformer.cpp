#include "rebasin/transformer.hpp"

#include "rebasin/model_graph.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace rebasin {

const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }
const char* to_string(NormKind n) { return n == NormKind::layernorm ? "layernorm" : "rmsnorm"; }

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "' (expected gelu or relu)");
}

NormKind parse_norm(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  throw ConfigError("unknown norm '" + s + "' (expected layernorm or rmsnorm)");
}

void TransformerConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(layers, "layers");
  positive(heads, "heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_ff, "d_ff");
  positive(vocab, "vocab");
  positive(max_seq, "max_seq");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be > 0");
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

Index parse_index(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

}  // namespace

std::map<std::string, std::string> TransformerConfig::to_kv() const {
  return {{"layers", std::to_string(layers)},
          {"heads", std::to_string(heads)},
          {"d_model", std::to_string(d_model)},
          {"d_head", std::to_string(d_head)},
          {"d_ff", std::to_string(d_ff)},
          {"vocab", std::to_string(vocab)},
          {"max_seq", std::to_string(max_seq)},
          {"activation", to_string(activation)},
          {"norm", to_string(norm)},
          {"norm_eps", format_double(norm_eps)},
          {"causal", causal ? "1" : "0"}};
}

TransformerConfig TransformerConfig::from_kv(const std::map<std::string, std::string>& kv) {
  TransformerConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "layers") c.layers = parse_index(key, value);
    else if (key == "heads") c.heads = parse_index(key, value);
    else if (key == "d_model") c.d_model = parse_index(key, value);
    else if (key == "d_head") c.d_head = parse_index(key, value);
    else if (key == "d_ff") c.d_ff = parse_index(key, value);
    else if (key == "vocab") c.vocab = parse_index(key, value);
    else if (key == "max_seq") c.max_seq = parse_index(key, value);
    else if (key == "activation") c.activation = parse_activation(value);
    else if (key == "norm") c.norm = parse_norm(value);
    else if (key == "norm_eps") c.norm_eps = parse_double(key, value);
    else if (key == "causal") c.causal = parse_index(key, value) != 0;
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

std::vector<Matrix> flatten(const TransformerParams& p) {
  std::vector<Matrix> out;
  for_each_tensor(p, [&](const std::string&, const auto& t) { out.emplace_back(t); });
  return out;
}

void unflatten(TransformerParams& p, const std::vector<Matrix>& tensors) {
  std::size_t i = 0;
  for_each_tensor(p, [&](const std::string& name, auto& t) {
    require(i < tensors.size(), "unflatten: too few tensors");
    const Matrix& src = tensors[i++];
    require(src.rows() == t.rows() && src.cols() == t.cols(), "unflatten: shape mismatch at " + name);
    t = src;
  });
  require(i == tensors.size(), "unflatten: too many tensors");
}

namespace {

struct ShapeCheck {
  const std::string& name;
  template <typename T>
  void operator()(const T& t, Index rows, Index cols) const {
    if (t.rows() != rows || t.cols() != cols)
      throw ContractViolation("tensor " + name + " has shape " + shape_str(t) + ", expected " +
                              shape_str(rows, cols));
  }
};

}  // namespace

void check_shapes(const TransformerParams& p, const TransformerConfig& c) {
  if (static_cast<Index>(p.layers.size()) != c.layers)
    throw ContractViolation("parameter set has " + std::to_string(p.layers.size()) +
                            " layers, config says " + std::to_string(c.layers));
  const bool ln = c.norm == NormKind::layernorm;
  const Index d = c.d_model, a = c.attn_width();
  auto check_norm = [&](const std::string& name, const NormParams& n) {
    ShapeCheck{name + ".scale"}(n.scale, d, 1);
    ShapeCheck{name + ".offset"}(n.offset, ln ? d : 0, 1);
  };
  ShapeCheck{"token_embedding"}(p.token_embedding, c.vocab, d);
  ShapeCheck{"position_embedding"}(p.position_embedding, c.max_seq, d);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& x = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    check_norm(pre + "norm1", x.norm1);
    ShapeCheck{pre + "wq"}(x.wq, a, d);
    ShapeCheck{pre + "wk"}(x.wk, a, d);
    ShapeCheck{pre + "wv"}(x.wv, a, d);
    ShapeCheck{pre + "bq"}(x.bq, a, 1);
    ShapeCheck{pre + "bk"}(x.bk, a, 1);
    ShapeCheck{pre + "bv"}(x.bv, a, 1);
    ShapeCheck{pre + "wo"}(x.wo, d, a);
    ShapeCheck{pre + "bo"}(x.bo, d, 1);
    check_norm(pre + "norm2", x.norm2);
    ShapeCheck{pre + "w1"}(x.w1, c.d_ff, d);
    ShapeCheck{pre + "b1"}(x.b1, c.d_ff, 1);
    ShapeCheck{pre + "w2"}(x.w2, d, c.d_ff);
    ShapeCheck{pre + "b2"}(x.b2, d, 1);
  }
  check_norm("final_norm", p.final_norm);
  ShapeCheck{"unembedding"}(p.unembedding, c.vocab, d);
  ShapeCheck{"unembedding_bias"}(p.unembedding_bias, c.vocab, 1);
}

TransformerParams zeros_like(const TransformerConfig& c) {
  c.validate();
  const Index d = c.d_model, a = c.attn_width();
  const bool ln = c.norm == NormKind::layernorm;
  auto norm = [&] { return NormParams{Vector::Ones(d), ln ? Vector::Zero(d) : Vector()}; };
  TransformerParams p;
  p.token_embedding = Matrix::Zero(c.vocab, d);
  p.position_embedding = Matrix::Zero(c.max_seq, d);
  for (Index l = 0; l < c.layers; ++l) {
    LayerParams x;
    x.norm1 = norm();
    x.wq = Matrix::Zero(a, d);
    x.wk = Matrix::Zero(a, d);
    x.wv = Matrix::Zero(a, d);
    x.bq = Vector::Zero(a);
    x.bk = Vector::Zero(a);
    x.bv = Vector::Zero(a);
    x.wo = Matrix::Zero(d, a);
    x.bo = Vector::Zero(d);
    x.norm2 = norm();
    x.w1 = Matrix::Zero(c.d_ff, d);
    x.b1 = Vector::Zero(c.d_ff);
    x.w2 = Matrix::Zero(d, c.d_ff);
    x.b2 = Vector::Zero(d);
    p.layers.push_back(std::move(x));
  }
  p.final_norm = norm();
  p.unembedding = Matrix::Zero(c.vocab, d);
  p.unembedding_bias = Vector::Zero(c.vocab);
  return p;
}

TransformerParams init_params(const TransformerConfig& c, std::uint64_t seed) {
  TransformerParams p = zeros_like(c);
  Rng rng(seed);
  const double in_d = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  const double in_a = 1.0 / std::sqrt(static_cast<double>(c.attn_width()));
  const double in_ff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(c.layers));
  p.token_embedding = rng.normal_matrix(c.vocab, c.d_model, 1.0);
  p.position_embedding = rng.normal_matrix(c.max_seq, c.d_model, 0.5);
  for (LayerParams& x : p.layers) {
    x.wq = rng.normal_matrix(c.attn_width(), c.d_model, in_d);
    x.wk = rng.normal_matrix(c.attn_width(), c.d_model, in_d);
    x.wv = rng.normal_matrix(c.attn_width(), c.d_model, in_d);
    x.wo = rng.normal_matrix(c.d_model, c.attn_width(), in_a * depth);
    x.w1 = rng.normal_matrix(c.d_ff, c.d_model, in_d);
    x.w2 = rng.normal_matrix(c.d_model, c.d_ff, in_ff * depth);
  }
  p.unembedding = rng.normal_matrix(c.vocab, c.d_model, in_d);
  return p;
}

bool bitwise_equal(const TransformerParams& a, const TransformerParams& b) {
  const auto ta = flatten(a), tb = flatten(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].rows() != tb[i].rows() || ta[i].cols() != tb[i].cols()) return false;
    if (std::memcmp(ta[i].data(), tb[i].data(), sizeof(double) * static_cast<std::size_t>(ta[i].size())) != 0)
      return false;
  }
  return true;
}

double max_abs_diff(const TransformerParams& a, const TransformerParams& b) {
  const auto ta = flatten(a), tb = flatten(b);
  require(ta.size() == tb.size(), "max_abs_diff: tensor count mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    require(ta[i].rows() == tb[i].rows() && ta[i].cols() == tb[i].cols(), "max_abs_diff: shape mismatch");
    if (ta[i].size() > 0) m = std::max(m, (ta[i] - tb[i]).cwiseAbs().maxCoeff());
  }
  return m;
}

double squared_norm(const TransformerParams& p) {
  double s = 0.0;
  for_each_tensor(p, [&](const std::string&, const auto& t) { s += t.squaredNorm(); });
  return s;
}

Matrix forward(const TransformerParams& params, const TransformerConfig& config,
               const TokenMatrix& inputs) {
  check_shapes(params, config);
  ad::Tape tape;
  const ParamVars vars = to_vars(tape, params, false);
  return forward(vars, config, inputs).value();
}

double cross_entropy(const Matrix& logits, const TokenMatrix& targets) {
  require(logits.rows() == targets.size(), "cross_entropy: logits/targets row mismatch");
  ad::Tape tape;
  const ad::Var l = tape.constant(logits);
  return ad::cross_entropy(l, std::span<const std::int32_t>(targets.data(),
                                                            static_cast<std::size_t>(targets.size())))
      .value()(0, 0);
}

EvalResult evaluate(const TransformerParams& params, const TransformerConfig& config,
                    const std::vector<Batch>& data) {
  require(!data.empty(), "evaluate: empty dataset");
  double total = 0.0;
  Index correct = 0, count = 0;
  for (const Batch& b : data) {
    const Matrix logits = forward(params, config, b.inputs);
    for (Index i = 0; i < logits.rows(); ++i) {
      const auto y = b.targets.data()[i];
      if (y < 0) continue;
      const double m = logits.row(i).maxCoeff();
      const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
      total += lse - logits(i, y);
      Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      if (arg == y) ++correct;
      ++count;
    }
  }
  require(count > 0, "evaluate: dataset has no targets");
  return {total / static_cast<double>(count), static_cast<double>(correct) / static_cast<double>(count),
          count};
}

}  // namespace rebasin
