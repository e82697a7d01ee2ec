#include "rebasin/model_graph.hpp"

#include <cmath>

namespace rebasin {

using ad::Var;

namespace {

Var row_leaf(ad::Tape& tape, const Vector& v, bool requires_grad) {
  return tape.leaf(v.transpose(), requires_grad);
}

NormVars norm_vars(ad::Tape& tape, const NormParams& n, bool requires_grad) {
  NormVars out;
  out.scale = row_leaf(tape, n.scale, requires_grad);
  if (n.offset.size() > 0) out.offset = row_leaf(tape, n.offset, requires_grad);
  return out;
}

// Applies `f(const Var&) -> Matrix-or-Var` pairwise to every variable.
template <typename F>
ParamVars map_vars(const std::vector<const ParamVars*>& in, F&& f) {
  const ParamVars& first = *in.front();
  auto pick = [&](auto member) {
    std::vector<Var> vs;
    for (const ParamVars* p : in) vs.push_back(member(*p));
    return f(vs);
  };
  ParamVars out;
  out.token_embedding = pick([](const ParamVars& p) { return p.token_embedding; });
  out.position_embedding = pick([](const ParamVars& p) { return p.position_embedding; });
  auto norm = [&](auto get) {
    NormVars n;
    n.scale = pick([&](const ParamVars& p) { return get(p).scale; });
    if (get(first).offset.valid()) n.offset = pick([&](const ParamVars& p) { return get(p).offset; });
    return n;
  };
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    LayerVars lv;
    auto L = [l](const ParamVars& p) -> const LayerVars& { return p.layers[l]; };
    lv.norm1 = norm([&](const ParamVars& p) -> const NormVars& { return L(p).norm1; });
    lv.wq = pick([&](const ParamVars& p) { return L(p).wq; });
    lv.wk = pick([&](const ParamVars& p) { return L(p).wk; });
    lv.wv = pick([&](const ParamVars& p) { return L(p).wv; });
    lv.bq = pick([&](const ParamVars& p) { return L(p).bq; });
    lv.bk = pick([&](const ParamVars& p) { return L(p).bk; });
    lv.bv = pick([&](const ParamVars& p) { return L(p).bv; });
    lv.wo = pick([&](const ParamVars& p) { return L(p).wo; });
    lv.bo = pick([&](const ParamVars& p) { return L(p).bo; });
    lv.norm2 = norm([&](const ParamVars& p) -> const NormVars& { return L(p).norm2; });
    lv.w1 = pick([&](const ParamVars& p) { return L(p).w1; });
    lv.b1 = pick([&](const ParamVars& p) { return L(p).b1; });
    lv.w2 = pick([&](const ParamVars& p) { return L(p).w2; });
    lv.b2 = pick([&](const ParamVars& p) { return L(p).b2; });
    out.layers.push_back(lv);
  }
  out.final_norm = norm([](const ParamVars& p) -> const NormVars& { return p.final_norm; });
  out.unembedding = pick([](const ParamVars& p) { return p.unembedding; });
  out.unembedding_bias = pick([](const ParamVars& p) { return p.unembedding_bias; });
  return out;
}

// Visits (var, tensor) pairs in the same order as for_each_tensor.
template <typename Params, typename F>
void zip_tensors(const ParamVars& vars, Params& params, F&& f) {
  auto norm = [&](const NormVars& nv, auto& np) {
    f(nv.scale, np.scale);
    if (nv.offset.valid()) f(nv.offset, np.offset);
  };
  f(vars.token_embedding, params.token_embedding);
  f(vars.position_embedding, params.position_embedding);
  for (std::size_t l = 0; l < vars.layers.size(); ++l) {
    const LayerVars& v = vars.layers[l];
    auto& p = params.layers[l];
    norm(v.norm1, p.norm1);
    f(v.wq, p.wq);
    f(v.wk, p.wk);
    f(v.wv, p.wv);
    f(v.bq, p.bq);
    f(v.bk, p.bk);
    f(v.bv, p.bv);
    f(v.wo, p.wo);
    f(v.bo, p.bo);
    norm(v.norm2, p.norm2);
    f(v.w1, p.w1);
    f(v.b1, p.b1);
    f(v.w2, p.w2);
    f(v.b2, p.b2);
  }
  norm(vars.final_norm, params.final_norm);
  f(vars.unembedding, params.unembedding);
  f(vars.unembedding_bias, params.unembedding_bias);
}

TransformerParams skeleton(const ParamVars& vars) {
  TransformerParams p;
  p.layers.resize(vars.layers.size());
  return p;
}

void assign(Matrix& dst, const Matrix& src) { dst = src; }
void assign(Vector& dst, const Matrix& src) { dst = src.transpose(); }

Var norm_forward(const Var& x, const NormVars& n, const TransformerConfig& config) {
  if (config.norm == NormKind::layernorm) {
    if (!n.offset.valid()) throw ContractViolation("layernorm model is missing a norm offset");
    return ad::layernorm(x, n.scale, n.offset, config.norm_eps);
  }
  return ad::rmsnorm(x, n.scale, config.norm_eps);
}

}  // namespace

ParamVars to_vars(ad::Tape& tape, const TransformerParams& p, bool requires_grad) {
  ParamVars v;
  v.token_embedding = tape.leaf(p.token_embedding, requires_grad);
  v.position_embedding = tape.leaf(p.position_embedding, requires_grad);
  for (const LayerParams& lp : p.layers) {
    LayerVars lv;
    lv.norm1 = norm_vars(tape, lp.norm1, requires_grad);
    lv.wq = tape.leaf(lp.wq, requires_grad);
    lv.wk = tape.leaf(lp.wk, requires_grad);
    lv.wv = tape.leaf(lp.wv, requires_grad);
    lv.bq = row_leaf(tape, lp.bq, requires_grad);
    lv.bk = row_leaf(tape, lp.bk, requires_grad);
    lv.bv = row_leaf(tape, lp.bv, requires_grad);
    lv.wo = tape.leaf(lp.wo, requires_grad);
    lv.bo = row_leaf(tape, lp.bo, requires_grad);
    lv.norm2 = norm_vars(tape, lp.norm2, requires_grad);
    lv.w1 = tape.leaf(lp.w1, requires_grad);
    lv.b1 = row_leaf(tape, lp.b1, requires_grad);
    lv.w2 = tape.leaf(lp.w2, requires_grad);
    lv.b2 = row_leaf(tape, lp.b2, requires_grad);
    v.layers.push_back(lv);
  }
  v.final_norm = norm_vars(tape, p.final_norm, requires_grad);
  v.unembedding = tape.leaf(p.unembedding, requires_grad);
  v.unembedding_bias = row_leaf(tape, p.unembedding_bias, requires_grad);
  return v;
}

TransformerParams gradients_of(const ParamVars& vars, const ad::Gradients& grads) {
  TransformerParams g = skeleton(vars);
  zip_tensors(vars, g, [&](const Var& v, auto& dst) { assign(dst, grads[v]); });
  return g;
}

TransformerParams values_of(const ParamVars& vars) {
  TransformerParams p = skeleton(vars);
  zip_tensors(vars, p, [&](const Var& v, auto& dst) { assign(dst, v.value()); });
  return p;
}

ParamVars interpolate(const ParamVars& a, const ParamVars& b, double lambda) {
  return map_vars({&a, &b}, [lambda](const std::vector<Var>& v) {
    return ad::add(ad::scale(v[0], lambda), ad::scale(v[1], 1.0 - lambda));
  });
}

ParamVars mix(const std::vector<ParamVars>& models, const std::vector<double>& weights) {
  require(!models.empty() && models.size() == weights.size(), "mix: model/weight count mismatch");
  std::vector<const ParamVars*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return map_vars(ptrs, [&weights](const std::vector<Var>& v) {
    Var acc = ad::scale(v[0], weights[0]);
    for (std::size_t i = 1; i < v.size(); ++i) acc = ad::add(acc, ad::scale(v[i], weights[i]));
    return acc;
  });
}

const char* to_string(HeadSpace s) { return s == HeadSpace::circuits ? "circuits" : "weights"; }

HeadSpace parse_head_space(const std::string& s) {
  if (s == "circuits") return HeadSpace::circuits;
  if (s == "weights") return HeadSpace::weights;
  throw ConfigError("unknown head space '" + s + "' (expected circuits or weights)");
}

TransformerConfig circuit_config(const TransformerConfig& config, std::size_t count) {
  TransformerConfig c = config;
  c.d_head = config.d_head * static_cast<Index>(count);
  return c;
}

ParamVars mix_circuits(const std::vector<ParamVars>& models, const std::vector<double>& weights,
                       const TransformerConfig& config) {
  ParamVars out = mix(models, weights);
  const Index dk = config.d_head, d = config.d_model;
  // The wider head divides scores by sqrt(M·dk), hence the sqrt(M) on the query side.
  const double widen = std::sqrt(static_cast<double>(models.size()));
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    std::vector<Var> wq, wk, wv, bq, bk, bv, wo;
    for (Index h = 0; h < config.heads; ++h) {
      for (std::size_t m = 0; m < models.size(); ++m) {
        const LayerVars& in = models[m].layers[l];
        const double w = weights[m];
        wq.push_back(ad::scale(ad::slice(in.wq, h * dk, dk, 0, d), w * widen));
        bq.push_back(ad::scale(ad::slice(in.bq, 0, 1, h * dk, dk), w * widen));
        wk.push_back(ad::slice(in.wk, h * dk, dk, 0, d));
        bk.push_back(ad::slice(in.bk, 0, 1, h * dk, dk));
        wv.push_back(ad::slice(in.wv, h * dk, dk, 0, d));
        bv.push_back(ad::slice(in.bv, 0, 1, h * dk, dk));
        wo.push_back(ad::scale(ad::slice(in.wo, 0, d, h * dk, dk), w));
      }
    }
    LayerVars& lv = out.layers[l];
    lv.wq = ad::concat_rows(wq);
    lv.wk = ad::concat_rows(wk);
    lv.wv = ad::concat_rows(wv);
    lv.bq = ad::concat_cols(bq);
    lv.bk = ad::concat_cols(bk);
    lv.bv = ad::concat_cols(bv);
    lv.wo = ad::concat_cols(wo);
  }
  return out;
}

ParamVars align(const ParamVars& p, const Var& o, const std::vector<Var>& ffn,
                const std::vector<Var>& heads, const TransformerConfig& config) {
  require(config.norm == NormKind::rmsnorm, "align: norms must be absorbed into rmsnorm first");
  require(ffn.size() == p.layers.size() && heads.size() == p.layers.size(),
          "align: one FFN map and one head map per layer required");
  require(o.rows() == config.d_model && o.cols() == config.d_model,
          "align: residual map must be d_model x d_model");
  const Var ot = ad::transpose(o);
  ParamVars out = p;
  out.token_embedding = ad::matmul(p.token_embedding, o);
  out.position_embedding = ad::matmul(p.position_embedding, o);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerVars& in = p.layers[l];
    LayerVars& lv = out.layers[l];
    const Var kh = ad::kron_identity(heads[l], config.d_head);
    const Var kht = ad::transpose(kh);
    lv.wq = ad::matmul(ad::matmul(kh, in.wq), o);
    lv.wk = ad::matmul(ad::matmul(kh, in.wk), o);
    lv.wv = ad::matmul(ad::matmul(kh, in.wv), o);
    lv.bq = ad::matmul(in.bq, kht);
    lv.bk = ad::matmul(in.bk, kht);
    lv.bv = ad::matmul(in.bv, kht);
    lv.wo = ad::matmul(ad::matmul(ot, in.wo), kht);
    lv.bo = ad::matmul(in.bo, o);
    const Var pt = ad::transpose(ffn[l]);
    lv.w1 = ad::matmul(ad::matmul(ffn[l], in.w1), o);
    lv.b1 = ad::matmul(in.b1, pt);
    lv.w2 = ad::matmul(ad::matmul(ot, in.w2), pt);
    lv.b2 = ad::matmul(in.b2, o);
  }
  out.unembedding = ad::matmul(p.unembedding, o);
  return out;
}

Var forward(const ParamVars& p, const TransformerConfig& config, const TokenMatrix& inputs,
            ForwardTrace* trace) {
  const Index batch = inputs.rows(), seq = inputs.cols();
  require(seq >= 1 && seq <= config.max_seq,
          "forward: sequence length " + std::to_string(seq) + " exceeds max_seq");
  std::vector<Index> ids(static_cast<std::size_t>(batch * seq)), pos(ids.size());
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < seq; ++t) {
      const auto id = inputs(b, t);
      if (id < 0 || id >= config.vocab)
        throw ContractViolation("forward: token id " + std::to_string(id) + " outside vocab");
      ids[static_cast<std::size_t>(b * seq + t)] = id;
      pos[static_cast<std::size_t>(b * seq + t)] = t;
    }
  Var x = ad::add(ad::gather_rows(p.token_embedding, ids), ad::gather_rows(p.position_embedding, pos));
  for (const LayerVars& l : p.layers) {
    if (trace) trace->residual.push_back(x.value());
    const Var h = norm_forward(x, l.norm1, config);
    const Var q = ad::add_row(ad::matmul(h, ad::transpose(l.wq)), l.bq);
    const Var k = ad::add_row(ad::matmul(h, ad::transpose(l.wk)), l.bk);
    if (trace) {
      trace->queries.push_back(q.value());
      trace->keys.push_back(k.value());
    }
    const Var v = ad::add_row(ad::matmul(h, ad::transpose(l.wv)), l.bv);
    const Var a = ad::attention(q, k, v, seq, config.heads, config.d_head, config.causal);
    x = ad::add(x, ad::add_row(ad::matmul(a, ad::transpose(l.wo)), l.bo));
    const Var h2 = norm_forward(x, l.norm2, config);
    Var f = ad::add_row(ad::matmul(h2, ad::transpose(l.w1)), l.b1);
    f = config.activation == Activation::relu ? ad::relu(f) : ad::gelu(f);
    if (trace) trace->ffn_hidden.push_back(f.value());
    x = ad::add(x, ad::add_row(ad::matmul(f, ad::transpose(l.w2)), l.b2));
  }
  if (trace) trace->residual.push_back(x.value());
  const Var h = norm_forward(x, p.final_norm, config);
  return ad::add_row(ad::matmul(h, ad::transpose(p.unembedding)), p.unembedding_bias);
}

Var loss(const ParamVars& params, const TransformerConfig& config, const Batch& batch) {
  const Var logits = forward(params, config, batch.inputs);
  return ad::cross_entropy(logits, std::span<const std::int32_t>(batch.targets.data(),
                                                                 static_cast<std::size_t>(batch.targets.size())));
}

Var mixture_loss(const std::vector<ParamVars>& models, const std::vector<double>& weights,
                 const TransformerConfig& config, const Batch& batch, HeadSpace space) {
  if (space == HeadSpace::weights) return loss(mix(models, weights), config, batch);
  return loss(mix_circuits(models, weights, config), circuit_config(config, models.size()), batch);
}

}  // namespace rebasin
