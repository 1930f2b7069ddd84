// SPDX-License-Identifier: Apache-2.0
#include "lkt/models.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lkt/errors.hpp"

namespace lkt {

std::string to_string(HeadType head) { return head == HeadType::kMlm ? "mlm" : "response"; }

std::string to_string(InitScheme scheme) {
  return scheme == InitScheme::kLocal ? "local" : "normal";
}

InitScheme parse_init_scheme(const std::string& text) {
  if (text == "normal") return InitScheme::kNormal;
  if (text == "local") return InitScheme::kLocal;
  throw ValidationError("unknown init scheme '" + text + "' (expected normal or local)");
}

HeadType parse_head_type(const std::string& text) {
  if (text == "response") return HeadType::kResponse;
  if (text == "mlm") return HeadType::kMlm;
  throw ValidationError("unknown head type '" + text + "' (expected response or mlm)");
}

void LktConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("LktConfig: " + msg); };
  if (vocab_size < special::kCount) fail("vocab_size must include the reserved tokens");
  if (d_model == 0 || num_heads == 0 || num_layers == 0 || d_ff == 0) {
    fail("d_model, num_heads, num_layers and d_ff must be positive");
  }
  if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (max_len < 8) fail("max_len must be at least 8");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must be in [0, 1)");
}

namespace {

constexpr std::size_t kTokenEmbedding = 0;
constexpr std::size_t kPositionEmbedding = 1;
constexpr std::size_t kLayerBase = 2;
constexpr std::size_t kPerLayer = 16;

enum LayerSlot : std::size_t {
  kLn1Gain, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2
};

std::size_t layer_param(std::size_t layer, LayerSlot slot) {
  return kLayerBase + layer * kPerLayer + slot;
}

std::size_t final_base(std::size_t num_layers) { return kLayerBase + num_layers * kPerLayer; }

template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : t.data()) {
    double x;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
  return t;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::size_t parse_size(const Checkpoint& c, const std::string& key) {
  const auto& s = c.get(key);
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ValidationError("checkpoint config '" + key + "' is not an integer: " + s);
  }
  return v;
}

double parse_double(const Checkpoint& c, const std::string& key) {
  const auto& s = c.get(key);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ValidationError("checkpoint config '" + key + "' is not a number: " + s);
  }
  return v;
}

}  // namespace

// ---- LktModel ---------------------------------------------------------------

template <typename T>
LktModel<T>::LktModel(const LktConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model, V = config_.vocab_size, ff = config_.d_ff;
  constexpr double kStd = 0.02;
  params_.add("token_embedding", truncated_normal<T>({V, d}, kStd, rng));
  params_.add("position_embedding", truncated_normal<T>({config_.max_len, d}, kStd, rng));
  if (config_.init == InitScheme::kLocal) {
    auto& pe = params_[kPositionEmbedding].value;
    for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
      for (std::size_t i = 0; i < d; i += 2) {
        const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
        pe.at(pos, i) = static_cast<T>(0.1 * std::sin(angle));
        if (i + 1 < d) pe.at(pos, i + 1) = static_cast<T>(0.1 * std::cos(angle));
      }
    }
  }
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    params_.add(p + "ln1.gain", Tensor<T>({d}, T{1}));
    params_.add(p + "ln1.bias", Tensor<T>({d}));
    for (const char* name : {"q", "k", "v", "o"}) {
      params_.add(p + "attn.w" + name, truncated_normal<T>({d, d}, kStd, rng));
      params_.add(p + "attn.b" + name, Tensor<T>({d}));
    }
    if (config_.init == InitScheme::kLocal) {
      for (LayerSlot slot : {kWq, kWk}) {
        auto& w = params_[layer_param(l, slot)].value;
        for (std::size_t i = 0; i < d; ++i) w.at(i, i) += T{1};
      }
    }
    params_.add(p + "ln2.gain", Tensor<T>({d}, T{1}));
    params_.add(p + "ln2.bias", Tensor<T>({d}));
    params_.add(p + "ffn.w1", truncated_normal<T>({d, ff}, kStd, rng));
    params_.add(p + "ffn.b1", Tensor<T>({ff}));
    params_.add(p + "ffn.w2", truncated_normal<T>({ff, d}, kStd, rng));
    params_.add(p + "ffn.b2", Tensor<T>({d}));
  }
  params_.add("final_ln.gain", Tensor<T>({d}, T{1}));
  params_.add("final_ln.bias", Tensor<T>({d}));
  params_.add("response_head.weight", truncated_normal<T>({d, 1}, kStd, rng));
  params_.add("response_head.bias", Tensor<T>({1}));
  params_.add("mlm_head.weight", truncated_normal<T>({d, V}, kStd, rng));
  params_.add("mlm_head.bias", Tensor<T>({V}));
}

template <typename T>
Checkpoint LktModel<T>::to_checkpoint() const {
  Checkpoint c;
  c.kind = "lkt";
  c.config = {{"vocab_size", std::to_string(config_.vocab_size)},
              {"d_model", std::to_string(config_.d_model)},
              {"num_layers", std::to_string(config_.num_layers)},
              {"num_heads", std::to_string(config_.num_heads)},
              {"d_ff", std::to_string(config_.d_ff)},
              {"max_len", std::to_string(config_.max_len)},
              {"dropout_p", format_double(config_.dropout_p)},
              {"head_type", to_string(config_.head_type)},
              {"init", to_string(config_.init)}};
  c.tensors = export_tensors(params_);
  return c;
}

template <typename T>
LktModel<T> LktModel<T>::from_checkpoint(const Checkpoint& c) {
  if (c.kind != "lkt") throw ValidationError("checkpoint holds a '" + c.kind + "' model, not lkt");
  LktConfig cfg;
  cfg.vocab_size = parse_size(c, "vocab_size");
  cfg.d_model = parse_size(c, "d_model");
  cfg.num_layers = parse_size(c, "num_layers");
  cfg.num_heads = parse_size(c, "num_heads");
  cfg.d_ff = parse_size(c, "d_ff");
  cfg.max_len = parse_size(c, "max_len");
  cfg.dropout_p = parse_double(c, "dropout_p");
  cfg.head_type = parse_head_type(c.get("head_type"));
  cfg.init = parse_init_scheme(c.get("init"));
  LktModel<T> model(cfg, 0);
  import_tensors(model.params_, c.tensors);
  return model;
}

// ---- LktGraph ---------------------------------------------------------------

template <typename T>
LktGraph<T>::LktGraph(const LktModel<T>& model, Tape<T>& tape, bool requires_grad)
    : model_(model), bound_(model.parameters().bind(tape, requires_grad)) {}

template <typename T>
EncoderOutput<T> LktGraph<T>::encode(const LktInput& input, bool training, Rng* rng,
                                     bool keep_attention) const {
  const auto& cfg = model_.config();
  const std::size_t L = input.token_ids.size();
  if (L == 0 || input.length == 0 || input.length > L) {
    throw std::invalid_argument("lkt_forward: sequence length must be in [1, padded length]");
  }
  if (L > cfg.max_len) {
    throw ValidationError("lkt_forward: sequence of " + std::to_string(L) +
                          " tokens exceeds max_len " + std::to_string(cfg.max_len));
  }
  if (training && cfg.dropout_p > 0.0 && rng == nullptr) {
    throw std::invalid_argument("lkt_forward: training with dropout needs an rng");
  }
  std::vector<std::int32_t> ids(input.token_ids.begin(), input.token_ids.end());
  for (std::size_t i = input.length; i < L; ++i) ids[i] = special::kPad;
  std::vector<std::int32_t> positions(L);
  std::iota(positions.begin(), positions.end(), 0);

  const T p = static_cast<T>(cfg.dropout_p);
  Rng dummy;
  Rng& r = rng ? *rng : dummy;
  auto drop = [&](const Var<T>& v) { return dropout(v, p, r, training); };

  Var<T> x = add(embedding_lookup(bound_[kTokenEmbedding], std::span<const std::int32_t>(ids)),
                 embedding_lookup(bound_[kPositionEmbedding],
                                  std::span<const std::int32_t>(positions)));
  x = drop(x);

  EncoderOutput<T> out;
  const std::size_t d = cfg.d_model, heads = cfg.num_heads, dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    auto P = [&](LayerSlot s) -> const Var<T>& { return bound_[layer_param(l, s)]; };
    Var<T> h = layer_norm(x, P(kLn1Gain), P(kLn1Bias));
    Var<T> q = linear(h, P(kWq), P(kBq));
    Var<T> k = linear(h, P(kWk), P(kBk));
    Var<T> v = linear(h, P(kWv), P(kBv));
    std::vector<Var<T>> head_out;
    std::vector<Tensor<T>> weights;
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Var<T> scores = scale(matmul_bt(slice_cols(q, hh * dh, dh), slice_cols(k, hh * dh, dh)),
                            inv_sqrt);
      Var<T> attn = masked_softmax_rows(scores, input.length);
      if (keep_attention) weights.push_back(attn.value());
      head_out.push_back(matmul(attn, slice_cols(v, hh * dh, dh)));
    }
    if (keep_attention) out.attention.push_back(std::move(weights));
    Var<T> merged = heads == 1 ? head_out[0] : concat_cols(head_out);
    x = add(x, drop(linear(merged, P(kWo), P(kBo))));
    Var<T> h2 = layer_norm(x, P(kLn2Gain), P(kLn2Bias));
    Var<T> ff = linear(gelu(linear(h2, P(kW1), P(kB1))), P(kW2), P(kB2));
    x = add(x, drop(ff));
  }
  const std::size_t fb = final_base(cfg.num_layers);
  out.hidden = layer_norm(x, bound_[fb], bound_[fb + 1]);
  return out;
}

template <typename T>
Var<T> LktGraph<T>::response_logits(const Var<T>& hidden,
                                    std::span<const std::size_t> positions) const {
  const std::size_t fb = final_base(model_.config().num_layers);
  return linear(gather_rows(hidden, positions), bound_[fb + 2], bound_[fb + 3]);
}

template <typename T>
Var<T> LktGraph<T>::mlm_logits(const Var<T>& hidden, std::span<const std::size_t> positions) const {
  const std::size_t fb = final_base(model_.config().num_layers);
  return linear(gather_rows(hidden, positions), bound_[fb + 4], bound_[fb + 5]);
}

template <typename T>
void LktGraph<T>::accumulate_gradients(LktModel<T>& model) const {
  model.parameters().accumulate(bound_);
}

// ---- inference helpers ---------------------------------------------------------

template <typename T>
ForwardOutput<T> lkt_forward(const LktModel<T>& model, std::span<const LktInput> batch,
                             bool training, Rng& rng, bool keep_attention) {
  ForwardOutput<T> out;
  for (const auto& input : batch) {
    Tape<T> tape(false);
    LktGraph<T> graph(model, tape, false);
    auto enc = graph.encode(input, training, &rng, keep_attention);
    std::vector<std::size_t> all(input.token_ids.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    SequenceOutput<T> seq;
    seq.token_ids.assign(input.token_ids.begin(), input.token_ids.end());
    seq.length = input.length;
    seq.logits = model.config().head_type == HeadType::kMlm
                     ? graph.mlm_logits(enc.hidden, all).value()
                     : graph.response_logits(enc.hidden, all).value();
    seq.hidden = enc.hidden.value();
    seq.attention = std::move(enc.attention);
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

template <typename T>
std::vector<double> predict_masked_correctness(const SequenceOutput<T>& output,
                                               std::span<const std::size_t> mask_positions,
                                               HeadType head) {
  if (head != HeadType::kResponse || output.logits.cols() != 1) {
    throw std::invalid_argument("predict_masked_correctness needs the response head");
  }
  std::vector<double> probs;
  probs.reserve(mask_positions.size());
  for (auto pos : mask_positions) {
    if (pos >= output.length || output.token_ids[pos] != special::kMask) {
      throw std::invalid_argument("predict_masked_correctness: position " + std::to_string(pos) +
                                  " does not hold [MASK]");
    }
    probs.push_back(stable_sigmoid(static_cast<double>(output.logits[pos])));
  }
  return probs;
}

template <typename T>
std::vector<double> predict_example(const LktModel<T>& model, const LktExample& example) {
  for (auto pos : example.mask_positions) {
    if (pos >= example.token_ids.size() || example.token_ids[pos] != special::kMask) {
      throw std::invalid_argument("predict_example: position " + std::to_string(pos) +
                                  " does not hold [MASK]");
    }
  }
  Tape<T> tape(false);
  LktGraph<T> graph(model, tape, false);
  auto enc = graph.encode({example.token_ids, example.token_ids.size()}, false, nullptr);
  auto logits = graph.response_logits(enc.hidden, example.mask_positions);
  std::vector<double> probs;
  for (auto v : logits.value().data()) probs.push_back(stable_sigmoid(static_cast<double>(v)));
  return probs;
}

template <typename T>
double mlm_forward_loss(LktModel<T>& model, std::span<const MlmExample> batch, bool training,
                        Rng& rng, bool backward) {
  if (model.config().head_type != HeadType::kMlm) {
    throw std::invalid_argument("mlm_forward_loss needs head_type = mlm");
  }
  std::size_t total = 0;
  for (const auto& ex : batch) total += ex.positions.size();
  if (total == 0) throw std::invalid_argument("mlm_forward_loss: no masked positions");
  Tape<T> tape(backward);
  LktGraph<T> graph(model, tape, backward);
  Var<T> loss;
  for (const auto& ex : batch) {
    if (ex.positions.empty()) continue;
    auto enc = graph.encode({ex.token_ids, ex.token_ids.size()}, training, &rng);
    auto part = cross_entropy_rows(graph.mlm_logits(enc.hidden, ex.positions),
                                   std::span<const std::int32_t>(ex.targets),
                                   static_cast<double>(total));
    loss = loss.valid() ? add(loss, part) : part;
  }
  if (backward) {
    tape.backward(loss);
    graph.accumulate_gradients(model);
  }
  return static_cast<double>(loss.value()[0]);
}

// ---- DKT ------------------------------------------------------------------------

namespace {
constexpr std::size_t kInputWeight = 0, kRecurrentWeight = 1, kGateBias = 2, kOutputWeight = 3,
                      kOutputBias = 4;
}

template <typename T>
DktModel<T>::DktModel(const DktConfig& config, std::uint64_t seed) : config_(config) {
  if (config_.num_questions == 0 || config_.hidden == 0) {
    throw ValidationError("DktConfig: num_questions and hidden must be positive");
  }
  Rng rng(seed);
  const std::size_t Q = config_.num_questions, h = config_.hidden;
  constexpr double kStd = 0.02;
  params_.add("input_weight", truncated_normal<T>({2 * Q, 4 * h}, kStd, rng));
  params_.add("recurrent_weight", truncated_normal<T>({h, 4 * h}, kStd, rng));
  params_.add("gate_bias", Tensor<T>({4 * h}));
  params_.add("output_weight", truncated_normal<T>({h, Q}, kStd, rng));
  params_.add("output_bias", Tensor<T>({Q}));
}

template <typename T>
double DktModel<T>::prior() const {
  const auto& b = params_[kOutputBias].value;
  double mean = 0.0;
  for (auto v : b.data()) mean += static_cast<double>(v);
  return stable_sigmoid(mean / static_cast<double>(b.size()));
}

template <typename T>
Checkpoint DktModel<T>::to_checkpoint(const QuestionIndex& questions) const {
  if (questions.size() != config_.num_questions) {
    throw std::invalid_argument("DKT checkpoint: question index size does not match the model");
  }
  Checkpoint c;
  c.kind = "dkt";
  c.config = {{"num_questions", std::to_string(config_.num_questions)},
              {"hidden", std::to_string(config_.hidden)}};
  for (std::size_t i = 0; i < questions.size(); ++i) {
    c.config.emplace_back("question." + std::to_string(i), questions.ids()[i]);
  }
  c.tensors = export_tensors(params_);
  return c;
}

template <typename T>
DktModel<T> DktModel<T>::from_checkpoint(const Checkpoint& c) {
  if (c.kind != "dkt") throw ValidationError("checkpoint holds a '" + c.kind + "' model, not dkt");
  DktConfig cfg;
  cfg.num_questions = parse_size(c, "num_questions");
  cfg.hidden = parse_size(c, "hidden");
  DktModel<T> model(cfg, 0);
  import_tensors(model.params_, c.tensors);
  return model;
}

QuestionIndex dkt_checkpoint_questions(const Checkpoint& c) {
  if (c.kind != "dkt") throw ValidationError("checkpoint holds a '" + c.kind + "' model, not dkt");
  const std::size_t n = parse_size(c, "num_questions");
  std::vector<std::string> ids;
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(c.get("question." + std::to_string(i)));
  return QuestionIndex::from_ids(std::move(ids));
}

template <typename T>
DktGraph<T>::DktGraph(const DktModel<T>& model, Tape<T>& tape, bool requires_grad)
    : model_(model), bound_(model.parameters().bind(tape, requires_grad)) {}

template <typename T>
Var<T> DktGraph<T>::logits(std::span<const std::int32_t> input_indices) const {
  const std::size_t steps = input_indices.size();
  if (steps == 0) throw std::invalid_argument("dkt_forward: empty sequence");
  const std::size_t h = model_.config().hidden;
  const auto two_q = static_cast<std::int32_t>(2 * model_.config().num_questions);
  for (auto idx : input_indices) {
    if (idx >= two_q || idx < kUnknownQuestion) {
      throw OutOfVocabularyError("dkt_forward: input index " + std::to_string(idx) +
                                 " outside [0, 2Q)");
    }
  }
  Tape<T>& tape = *bound_[0].node()->tape;
  Var<T> state = tape.constant(Tensor<T>({1, h}));
  Var<T> cell = tape.constant(Tensor<T>({1, h}));
  std::vector<Var<T>> rows{state};
  if (steps > 1) {
    // Only inputs 0..T-2 influence predictions.
    Var<T> xs = embedding_lookup_or_zero(bound_[kInputWeight], input_indices.first(steps - 1));
    for (std::size_t t = 0; t + 1 < steps; ++t) {
      const std::size_t row = t;
      Var<T> gates = add(gather_rows(xs, std::span<const std::size_t>(&row, 1)),
                         linear(state, bound_[kRecurrentWeight], bound_[kGateBias]));
      Var<T> in_gate = sigmoid(slice_cols(gates, 0, h));
      Var<T> forget_gate = sigmoid(slice_cols(gates, h, h));
      Var<T> candidate = tanh(slice_cols(gates, 2 * h, h));
      Var<T> out_gate = sigmoid(slice_cols(gates, 3 * h, h));
      cell = add(mul(forget_gate, cell), mul(in_gate, candidate));
      state = mul(out_gate, tanh(cell));
      rows.push_back(state);
    }
  }
  return linear(concat_rows(rows), bound_[kOutputWeight], bound_[kOutputBias]);
}

template <typename T>
void DktGraph<T>::accumulate_gradients(DktModel<T>& model) const {
  model.parameters().accumulate(bound_);
}

template <typename T>
Tensor<T> dkt_forward(const DktModel<T>& model, const DktExample& example) {
  Tape<T> tape(false);
  DktGraph<T> graph(model, tape, false);
  const auto inputs = example.input_indices();
  Tensor<T> out = graph.logits(inputs).value();
  for (auto& v : out.data()) v = static_cast<T>(stable_sigmoid(static_cast<double>(v)));
  return out;
}

template <typename T>
std::vector<double> dkt_predict_targets(const DktModel<T>& model, const DktExample& example) {
  Tape<T> tape(false);
  DktGraph<T> graph(model, tape, false);
  const auto inputs = example.input_indices();
  const auto logits = graph.logits(inputs).value();
  std::vector<double> out;
  const double prior = model.prior();
  for (std::size_t t = 0; t < example.question_indices.size(); ++t) {
    const auto q = example.question_indices[t];
    out.push_back(q == kUnknownQuestion
                      ? prior
                      : stable_sigmoid(static_cast<double>(logits.at(t, static_cast<std::size_t>(q)))));
  }
  return out;
}

#define LKT_INSTANTIATE(T)                                                                    \
  template class LktModel<T>;                                                                 \
  template class LktGraph<T>;                                                                 \
  template class DktModel<T>;                                                                 \
  template class DktGraph<T>;                                                                 \
  template ForwardOutput<T> lkt_forward(const LktModel<T>&, std::span<const LktInput>, bool,  \
                                        Rng&, bool);                                          \
  template std::vector<double> predict_masked_correctness(                                    \
      const SequenceOutput<T>&, std::span<const std::size_t>, HeadType);                      \
  template std::vector<double> predict_example(const LktModel<T>&, const LktExample&);        \
  template double mlm_forward_loss(LktModel<T>&, std::span<const MlmExample>, bool, Rng&,     \
                                   bool);                                                     \
  template Tensor<T> dkt_forward(const DktModel<T>&, const DktExample&);                      \
  template std::vector<double> dkt_predict_targets(const DktModel<T>&, const DktExample&);

LKT_INSTANTIATE(float)
LKT_INSTANTIATE(double)

#undef LKT_INSTANTIATE

}  // namespace lkt
