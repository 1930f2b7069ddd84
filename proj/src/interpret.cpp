// SPDX-License-Identifier: Apache-2.0
#include "lkt/interpret.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "lkt/errors.hpp"
#include "lkt/random.hpp"

namespace lkt {

namespace {

std::size_t unpadded_length(std::span<const TokenId> ids) {
  std::size_t n = ids.size();
  while (n > 0 && ids[n - 1] == special::kPad) --n;
  return n;
}

std::string token_string(const Vocabulary* vocab, TokenId id) {
  return vocab ? vocab->token(id) : std::to_string(id);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

// ---- mean attention ---------------------------------------------------------

template <typename T>
AttentionSummary mean_attention(const LktModel<T>& model, const LktExample& example,
                                std::size_t layer, std::size_t head, const Vocabulary* vocab) {
  const auto& cfg = model.config();
  if (layer >= cfg.num_layers) {
    throw ValidationError("mean_attention: layer " + std::to_string(layer) + " out of range (" +
                          std::to_string(cfg.num_layers) + " layers)");
  }
  if (head >= cfg.num_heads) {
    throw ValidationError("mean_attention: head " + std::to_string(head) + " out of range (" +
                          std::to_string(cfg.num_heads) + " heads)");
  }
  const std::size_t L = example.token_ids.size();
  const std::size_t length = unpadded_length(example.token_ids);
  if (length == 0) throw ValidationError("mean_attention: example has no unpadded tokens");

  Tape<T> tape(false);
  LktGraph<T> graph(model, tape, false);
  auto enc = graph.encode({example.token_ids, length}, false, nullptr, true);
  const auto& att = enc.attention[layer][head];

  AttentionSummary out;
  out.layer = layer;
  out.head = head;
  out.scores.assign(L, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < L; ++j) out.scores[j] += static_cast<double>(att.at(i, j));
  }
  for (auto& s : out.scores) s /= static_cast<double>(length);
  for (auto id : example.token_ids) out.tokens.push_back(token_string(vocab, id));
  return out;
}

// ---- LIME -------------------------------------------------------------------

Explanation lime_explain(const Scorer& scorer, std::span<const TokenId> token_ids,
                         std::span<const std::size_t> perturbable, const LimeOptions& options,
                         const Vocabulary* vocab) {
  if (options.num_samples < 50) throw ValidationError("lime_explain: num_samples must be >= 50");
  if (!(options.ridge >= 0.0)) throw ValidationError("lime_explain: ridge must be >= 0");
  for (auto p : perturbable) {
    if (p >= token_ids.size()) {
      throw ValidationError("lime_explain: position " + std::to_string(p) + " out of range");
    }
  }
  const std::size_t d = perturbable.size();
  const std::size_t n = options.num_samples;
  const double width =
      options.kernel_width > 0.0 ? options.kernel_width : 0.75 * std::sqrt(static_cast<double>(d));

  Rng rng(options.seed);
  Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(n),
                                            static_cast<Eigen::Index>(d));
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  Eigen::VectorXd w(static_cast<Eigen::Index>(n));
  std::vector<TokenId> ids(token_ids.begin(), token_ids.end());
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t s = 0; s < n; ++s) {
    const auto r = static_cast<Eigen::Index>(s);
    std::size_t removed = 0;
    if (s > 0 && d > 0) {
      removed = std::uniform_int_distribution<std::size_t>(1, d)(rng);
      for (std::size_t k = 0; k < removed; ++k) {
        std::swap(order[k], order[std::uniform_int_distribution<std::size_t>(k, d - 1)(rng)]);
        Z(r, static_cast<Eigen::Index>(order[k])) = 0.0;
      }
    }
    for (std::size_t k = 0; k < d; ++k) {
      ids[perturbable[k]] = Z(r, static_cast<Eigen::Index>(k)) > 0.5 ? token_ids[perturbable[k]]
                                                                      : special::kUnk;
    }
    y(r) = scorer(ids);
    const double dist = static_cast<double>(removed);
    w(r) = std::exp(-dist * dist / (width * width));
  }

  // Only columns that vary enter the fit.
  std::vector<std::size_t> used;
  for (std::size_t k = 0; k < d; ++k) {
    if (Z.col(static_cast<Eigen::Index>(k)).minCoeff() < 0.5) used.push_back(k);
  }
  if (used.empty()) throw ValidationError("lime_explain: degenerate design, no token was perturbed");

  const auto m = static_cast<Eigen::Index>(used.size());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), m);
  for (Eigen::Index c = 0; c < m; ++c) X.col(c) = Z.col(static_cast<Eigen::Index>(used[c]));
  const double wsum = w.sum();
  const Eigen::RowVectorXd x_mean = (w.transpose() * X) / wsum;
  const double y_mean = w.dot(y) / wsum;
  const Eigen::MatrixXd Xc = X.rowwise() - x_mean;
  const Eigen::VectorXd yc = y.array() - y_mean;
  Eigen::MatrixXd A = Xc.transpose() * w.asDiagonal() * Xc;
  A.diagonal().array() += options.ridge;
  const Eigen::VectorXd beta = A.ldlt().solve(Xc.transpose() * w.asDiagonal() * yc);
  if (!beta.allFinite()) throw ValidationError("lime_explain: degenerate design");

  Explanation out;
  out.intercept = y_mean - x_mean.dot(beta);
  const Eigen::VectorXd resid = yc - Xc * beta;
  const double ss_res = w.dot(resid.cwiseProduct(resid));
  const double ss_tot = w.dot(yc.cwiseProduct(yc));
  out.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0;
  out.num_samples = n;
  out.kernel_width = width;
  for (Eigen::Index c = 0; c < m; ++c) {
    const std::size_t pos = perturbable[used[static_cast<std::size_t>(c)]];
    out.positions.push_back(pos);
    out.tokens.push_back(token_string(vocab, token_ids[pos]));
    out.weights.push_back(beta(c));
  }
  return out;
}

template <typename T>
Explanation lime_explain(const LktModel<T>& model, const LktExample& example,
                         std::size_t target_mask_position, const LimeOptions& options,
                         const Vocabulary* vocab) {
  if (target_mask_position >= example.token_ids.size() ||
      example.token_ids[target_mask_position] != special::kMask) {
    throw ValidationError("lime_explain: position " + std::to_string(target_mask_position) +
                          " does not hold [MASK]");
  }
  std::vector<std::size_t> perturbable;
  for (std::size_t i = 0; i < example.token_ids.size(); ++i) {
    if (i != target_mask_position && !special::is_special(example.token_ids[i])) {
      perturbable.push_back(i);
    }
  }
  LktExample probe;
  probe.mask_positions = {target_mask_position};
  auto scorer = [&](std::span<const TokenId> ids) {
    probe.token_ids.assign(ids.begin(), ids.end());
    return predict_example(model, probe).front();
  };
  return lime_explain(scorer, example.token_ids, perturbable, options, vocab);
}

std::string to_json(const AttentionSummary& summary) {
  nlohmann::json scores = nlohmann::json::array();
  for (std::size_t i = 0; i < summary.scores.size(); ++i) {
    nlohmann::json row{{"position", i}, {"score", summary.scores[i]}};
    if (i < summary.tokens.size()) row["token"] = summary.tokens[i];
    scores.push_back(std::move(row));
  }
  return nlohmann::json{{"layer", summary.layer}, {"head", summary.head}, {"scores", scores}}
      .dump();
}

std::string to_json(const Explanation& e) {
  nlohmann::json weights = nlohmann::json::array();
  for (std::size_t i = 0; i < e.weights.size(); ++i) {
    weights.push_back({{"position", e.positions[i]}, {"token", e.tokens[i]}, {"weight", e.weights[i]}});
  }
  return nlohmann::json{{"weights", weights},
                        {"intercept", e.intercept},
                        {"r2", e.r2},
                        {"num_samples", e.num_samples},
                        {"kernel_width", e.kernel_width}}
      .dump();
}

// ---- embeddings -------------------------------------------------------------

std::string to_string(PositionRule rule) {
  return rule == PositionRule::kCls ? "cls" : "mask_position";
}

PositionRule parse_position_rule(const std::string& text) {
  if (text == "mask_position") return PositionRule::kMaskPosition;
  if (text == "cls") return PositionRule::kCls;
  throw ValidationError("unknown position rule '" + text + "' (expected mask_position or cls)");
}

template <typename T>
std::vector<EmbeddingRow> export_embeddings(const LktModel<T>& model,
                                            std::span<const LktExample> examples,
                                            PositionRule rule) {
  std::vector<EmbeddingRow> rows;
  rows.reserve(examples.size());
  for (const auto& ex : examples) {
    if (ex.mask_positions.empty()) {
      throw ValidationError("export_embeddings: example for '" + ex.student_id +
                            "' has no mask position");
    }
    const std::size_t target = ex.mask_positions.front();
    Tape<T> tape(false);
    LktGraph<T> graph(model, tape, false);
    auto enc = graph.encode({ex.token_ids, ex.token_ids.size()}, false, nullptr);
    const std::size_t pos = rule == PositionRule::kCls ? 0 : target;
    EmbeddingRow row;
    row.student_id = ex.student_id;
    for (auto v : enc.hidden.value().row(pos)) row.vector.push_back(static_cast<double>(v));
    const std::size_t at[] = {target};
    row.prediction = sigmoid(static_cast<double>(graph.response_logits(enc.hidden, at).value()[0]));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string embeddings_csv(std::span<const EmbeddingRow> rows) {
  const std::size_t d = rows.empty() ? 0 : rows.front().vector.size();
  std::string out = "student_id";
  for (std::size_t i = 0; i < d; ++i) out += ",e" + std::to_string(i);
  out += ",prediction\n";
  for (const auto& r : rows) {
    out += csv_escape(r.student_id);
    for (auto v : r.vector) out += ',' + format_number(v);
    out += ',' + format_number(r.prediction) + '\n';
  }
  return out;
}

void save_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << embeddings_csv(rows);
}

#define LKT_INSTANTIATE(T)                                                                     \
  template AttentionSummary mean_attention(const LktModel<T>&, const LktExample&, std::size_t, \
                                           std::size_t, const Vocabulary*);                    \
  template Explanation lime_explain(const LktModel<T>&, const LktExample&, std::size_t,        \
                                    const LimeOptions&, const Vocabulary*);                    \
  template std::vector<EmbeddingRow> export_embeddings(const LktModel<T>&,                     \
                                                       std::span<const LktExample>, PositionRule);

LKT_INSTANTIATE(float)
LKT_INSTANTIATE(double)

#undef LKT_INSTANTIATE

}  // namespace lkt
