// SPDX-License-Identifier: Apache-2.0
#include "lkt/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lkt/errors.hpp"
#include "lkt/evaluation.hpp"
#include "lkt/interpret.hpp"

namespace lkt {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- shared settings --------------------------------------------------------

struct Common {
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::string report = "reports.jsonl";
};

struct ModelFlags {
  std::optional<std::size_t> d_model, layers, heads, d_ff, max_len, dkt_hidden;
  std::optional<double> dropout;
  std::optional<std::string> init;
};

struct TrainFlags {
  std::optional<std::size_t> epochs, patience, batch_size, micro_batch_size, warmup;
  std::optional<double> lr, mask_rate;
};

struct SplitFlags {
  double test_fraction = 0.2;
  double val_fraction = 0.1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--precision", c.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  cmd->add_option("--report", c.report, "JSON-lines file that receives run records")
      ->capture_default_str();
}

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--d-model", m.d_model, "LKT hidden size");
  cmd->add_option("--layers", m.layers, "LKT encoder layers");
  cmd->add_option("--heads", m.heads, "LKT attention heads");
  cmd->add_option("--d-ff", m.d_ff, "LKT feed-forward size");
  cmd->add_option("--max-len", m.max_len, "LKT window length in tokens");
  cmd->add_option("--dropout", m.dropout, "LKT dropout probability");
  cmd->add_option("--init-scheme", m.init, "LKT initialisation: local or normal")
      ->check(CLI::IsMember({"local", "normal"}));
  cmd->add_option("--dkt-hidden", m.dkt_hidden, "DKT LSTM size");
}

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
  cmd->add_option("--epochs", t.epochs, "Maximum epochs");
  cmd->add_option("--patience", t.patience, "Early-stopping patience");
  cmd->add_option("--batch-size", t.batch_size, "Examples per optimizer step");
  cmd->add_option("--micro-batch-size", t.micro_batch_size, "Examples per forward pass");
  cmd->add_option("--lr", t.lr, "Peak learning rate");
  cmd->add_option("--warmup", t.warmup, "Warmup steps");
  cmd->add_option("--mask-rate", t.mask_rate, "Training mask rate");
}

void add_split_flags(CLI::App* cmd, SplitFlags& s) {
  cmd->add_option("--test-fraction", s.test_fraction, "Held-out test share of students")
      ->capture_default_str();
  cmd->add_option("--val-fraction", s.val_fraction, "Validation share of students")
      ->capture_default_str();
}

void apply(TrainConfig& c, const TrainFlags& t, const Common& common) {
  if (t.epochs) c.max_epochs = *t.epochs;
  if (t.patience) c.patience = *t.patience;
  if (t.batch_size) {
    c.batch_size = *t.batch_size;
    if (!t.micro_batch_size) c.micro_batch_size = *t.batch_size;
  }
  if (t.micro_batch_size) c.micro_batch_size = *t.micro_batch_size;
  if (t.lr) c.peak_lr = *t.lr;
  if (t.warmup) c.warmup_steps = *t.warmup;
  if (t.mask_rate) c.mask_rate = *t.mask_rate;
  c.seed = common.seed;
  c.precision = parse_precision(common.precision);
}

ExperimentConfig experiment(const ModelFlags& m, const TrainFlags& t, const Common& common,
                            double val_fraction) {
  ExperimentConfig c;
  if (m.d_model) c.lkt.d_model = *m.d_model;
  if (m.layers) c.lkt.num_layers = *m.layers;
  if (m.heads) c.lkt.num_heads = *m.heads;
  if (m.d_ff) c.lkt.d_ff = *m.d_ff;
  if (m.max_len) c.lkt.max_len = *m.max_len;
  if (m.dropout) c.lkt.dropout_p = *m.dropout;
  if (m.init) c.lkt.init = parse_init_scheme(*m.init);
  if (m.dkt_hidden) c.dkt_hidden = *m.dkt_hidden;
  apply(c.train, t, common);
  apply(c.dkt_train, t, common);
  c.val_fraction = val_fraction;
  return c;
}

// ---- paths ------------------------------------------------------------------

/// Relative data paths that do not exist are looked up under LKT_DATA_DIR.
fs::path data_path(const std::string& text) {
  fs::path p(text);
  if (p.is_relative() && !fs::exists(p)) {
    if (const char* root = std::getenv("LKT_DATA_DIR"); root && *root) return fs::path(root) / p;
  }
  return p;
}

fs::path require_input(const std::string& text, const std::string& what, bool data = false) {
  const fs::path p = data ? data_path(text) : fs::path(text);
  if (!fs::is_regular_file(p)) throw ValidationError(what + " not found: " + p.string());
  return p;
}

fs::path require_output(const std::string& text, const std::string& what) {
  const fs::path p(text);
  const fs::path dir = p.parent_path();
  if (!dir.empty() && !fs::is_directory(dir)) {
    throw ValidationError("directory for " + what + " does not exist: " + dir.string());
  }
  return p;
}

// ---- output helpers -----------------------------------------------------------

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string line(const EvalReport& r) {
  return r.model + " " + r.protocol + ": auc " + fixed(r.auc) + " acc " + fixed(r.acc) + " n " +
         std::to_string(r.n_predictions);
}

void append_record(const Common& common, const json& record) {
  append_json_line(common.report, record.dump());
}

template <typename F>
void with_precision(const Common& common, F&& f) {
  if (parse_precision(common.precision) == Precision::kF64) {
    f.template operator()<double>();
  } else {
    f.template operator()<float>();
  }
}

EpochCallback history_writer(const Common& common, const std::string& command) {
  return [&common, command](const EpochRecord& r) {
    auto j = json::parse(to_json_line(r));
    j["command"] = command;
    append_record(common, j);
  };
}

/// Loads `vocab_path`, or builds a vocabulary from `data` and saves it when
/// `save_to` is non-empty.
Vocabulary vocab_for(const std::optional<std::string>& vocab_path, const Dataset& data,
                     const fs::path& save_to, std::ostream& out) {
  if (vocab_path) return Vocabulary::load(require_input(*vocab_path, "vocabulary file"));
  auto vocab = build_vocab(text_corpus(data), 1, 30000);
  if (!save_to.empty()) {
    vocab.save(save_to);
    out << "built vocabulary of " << vocab.size() << " tokens -> " << save_to.string() << '\n';
  }
  return vocab;
}

/// The masked window holding interaction `index` of a student's history.
LktExample example_for(const StudentHistory& history, const Vocabulary& vocab,
                       std::size_t max_len, std::size_t index) {
  const auto full = format_lkt_sequence(history.records, vocab);
  for (const auto& w : window_sequence(full, max_len)) {
    if (index >= w.first_interaction && index < w.first_interaction + w.interaction_count()) {
      const std::size_t targets[] = {index - w.first_interaction};
      auto ex = mask_interactions(w, targets);
      ex.student_id = history.student_id;
      return ex;
    }
  }
  throw ValidationError("interaction " + std::to_string(index) + " not found for student " +
                        history.student_id);
}

const StudentHistory& find_student(const Dataset& data, const std::string& id) {
  for (const auto& h : data) {
    if (h.student_id == id) return h;
  }
  throw ValidationError("student '" + id + "' not in the data file");
}

// ---- commands -----------------------------------------------------------------

struct GenData {
  std::string out_dir;
  SyntheticParams params;
};

void gen_data(const GenData& g, const Common& common, std::ostream& out) {
  const fs::path dir(g.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create output directory " + dir.string());
  auto params = g.params;
  params.seed = common.seed;
  const auto syn = generate_synthetic(params);
  save_interactions(dir / "interactions.csv", syn.data);
  save_true_p(dir / "true_p.csv", syn);
  const double ceiling = bayes_ceiling_auc(syn.data, syn.true_p);
  json manifest{{"interactions", "interactions.csv"},
                {"true_p", "true_p.csv"},
                {"num_students", params.num_students},
                {"num_questions", params.num_questions},
                {"num_concepts", params.num_concepts},
                {"num_interactions", count_interactions(syn.data)},
                {"seed", params.seed},
                {"bayes_auc", ceiling}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  append_record(common, {{"command", "gen-data"}, {"out", dir.string()}, {"seed", common.seed},
                         {"bayes_auc", ceiling}});
  out << "gen-data: " << params.num_students << " students, " << count_interactions(syn.data)
      << " interactions, bayes auc " << fixed(ceiling) << " -> " << dir.string() << '\n';
}

struct BuildVocab {
  std::string data, out = "vocab.txt";
  std::size_t min_freq = 1, max_size = 30000;
};

void build_vocab_cmd(const BuildVocab& b, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(b.data, "data file", true));
  const auto path = require_output(b.out, "vocabulary");
  const auto vocab = build_vocab(text_corpus(data), b.min_freq, b.max_size);
  vocab.save(path);
  append_record(common, {{"command", "build-vocab"}, {"out", path.string()}, {"size", vocab.size()}});
  out << "build-vocab: " << vocab.size() << " tokens -> " << path.string() << '\n';
}

struct Pretrain {
  std::string data, out = "pretrained.ckpt";
  std::optional<std::string> vocab;
  double val_fraction = 0.1;
  ModelFlags model;
  TrainFlags train;
};

void pretrain(const Pretrain& p, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(p.data, "data file", true));
  const auto ckpt = require_output(p.out, "checkpoint");
  const auto vocab = vocab_for(p.vocab, data, fs::path(p.out + ".vocab"), out);
  auto cfg = experiment(p.model, p.train, common, p.val_fraction);
  cfg.lkt.vocab_size = vocab.size();
  cfg.lkt.head_type = HeadType::kMlm;
  auto [train_ids, val_ids] = holdout_split(student_ids(data), p.val_fraction,
                                            derive_seed(common.seed, {0x12u}));
  auto sequences = [&](const std::vector<std::string>& ids) {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& w : lkt_windows(select_students(data, ids), vocab, cfg.lkt.max_len)) {
      seqs.push_back(w.token_ids);
    }
    return seqs;
  };
  with_precision(common, [&]<typename T>() {
    LktModel<T> model(cfg.lkt, derive_seed(common.seed, {0x1u}));
    MlmTrainingTask<T> task(model, sequences(train_ids), sequences(val_ids), cfg.train.mask_rate);
    const auto result = train(task, cfg.train, history_writer(common, "pretrain"));
    save_checkpoint(ckpt, model.to_checkpoint());
    out << "pretrain: best epoch " << result.best_epoch << " val mlm loss "
        << fixed(result.best_val_loss) << " -> " << ckpt.string() << '\n';
  });
}

struct Train {
  std::string model = "lkt", data, out;
  std::optional<std::string> vocab, init;
  SplitFlags split;
  ModelFlags flags;
  TrainFlags train;
};

void train_cmd(const Train& t, const Common& common, std::ostream& out) {
  const auto kind = parse_model_kind(t.model);
  const auto data = load_interactions(require_input(t.data, "data file", true));
  const auto ckpt = require_output(t.out.empty() ? t.model + ".ckpt" : t.out, "checkpoint");
  std::optional<Checkpoint> init;
  if (t.init) {
    if (kind != ModelKind::kLkt) throw ValidationError("--init applies to LKT models only");
    init = load_checkpoint(require_input(*t.init, "checkpoint"));
  }
  auto cfg = experiment(t.flags, t.train, common, t.split.val_fraction);
  const auto split = coldstart_split(data, t.split.test_fraction, t.split.val_fraction,
                                     derive_seed(common.seed, {0x11u}));
  const auto train_data = select_students(data, split.pool);
  const auto val_data = select_students(data, split.val);
  const auto test_data = select_students(data, split.test);
  const auto history = history_writer(common, "train");

  with_precision(common, [&]<typename T>() {
    EvalReport val, test;
    TrainResult result;
    if (kind == ModelKind::kLkt) {
      const auto vocab = vocab_for(t.vocab, data, fs::path(ckpt.string() + ".vocab"), out);
      std::optional<LktModel<T>> start;
      if (init) {
        start.emplace(LktModel<T>::from_checkpoint(*init));
        cfg.train.evaluate_initial = true;
      }
      auto fit = fit_lkt<T>(train_data, val_data, vocab, cfg, start ? &*start : nullptr, history);
      const auto max_len = fit.model.config().max_len;
      const auto vw = lkt_windows(val_data, vocab, max_len);
      const auto tw = lkt_windows(test_data, vocab, max_len);
      val = make_report(predict_lkt(fit.model, std::span<const LktSequence>(vw)), "val", "lkt",
                        common.seed);
      test = make_report(predict_lkt(fit.model, std::span<const LktSequence>(tw)), "test", "lkt",
                         common.seed);
      save_checkpoint(ckpt, fit.model.to_checkpoint());
      result = fit.result;
    } else {
      auto fit = fit_dkt<T>(train_data, val_data, cfg, history);
      const auto ve = dkt_examples(val_data, fit.questions, UnseenQuestion::kSentinel);
      const auto te = dkt_examples(test_data, fit.questions, UnseenQuestion::kSentinel);
      val = make_report(predict_dkt(fit.model, std::span<const DktExample>(ve)), "val", "dkt",
                        common.seed);
      test = make_report(predict_dkt(fit.model, std::span<const DktExample>(te)), "test", "dkt",
                         common.seed);
      save_checkpoint(ckpt, fit.model.to_checkpoint(fit.questions));
      result = fit.result;
    }
    append_json_line(common.report, to_json_line(val));
    append_json_line(common.report, to_json_line(test));
    out << "train " << t.model << ": best epoch " << result.best_epoch << " of "
        << result.history.size() << ", val auc " << std::setprecision(17) << val.auc
        << ", test auc " << fixed(test.auc) << " -> " << ckpt.string() << '\n';
  });
}

struct Eval {
  std::string checkpoint, data, split = "test";
  std::optional<std::string> vocab;
  SplitFlags splits;
  double mask_rate = 0.15;
};

void eval_cmd(const Eval& e, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(e.data, "data file", true));
  const auto ckpt = load_checkpoint(require_input(e.checkpoint, "checkpoint"));
  Dataset subset = data;
  if (e.split != "all") {
    const auto split = coldstart_split(data, e.splits.test_fraction, e.splits.val_fraction,
                                       derive_seed(common.seed, {0x11u}));
    const auto& ids = e.split == "test" ? split.test : e.split == "val" ? split.val : split.pool;
    subset = select_students(data, ids);
  }
  with_precision(common, [&]<typename T>() {
    EvalReport r;
    if (ckpt.kind == "lkt") {
      if (!e.vocab) throw ValidationError("--vocab is required for LKT checkpoints");
      const auto vocab = Vocabulary::load(require_input(*e.vocab, "vocabulary file"));
      const auto model = LktModel<T>::from_checkpoint(ckpt);
      const auto w = lkt_windows(subset, vocab, model.config().max_len);
      r = make_report(predict_lkt(model, std::span<const LktSequence>(w), e.mask_rate), e.split,
                      "lkt", common.seed);
    } else {
      const auto model = DktModel<T>::from_checkpoint(ckpt);
      const auto ex = dkt_examples(subset, dkt_checkpoint_questions(ckpt), UnseenQuestion::kSentinel);
      r = make_report(predict_dkt(model, std::span<const DktExample>(ex)), e.split, "dkt",
                      common.seed);
    }
    append_json_line(common.report, to_json_line(r));
    out << "eval " << r.model << " " << r.protocol << ": auc " << std::setprecision(17) << r.auc
        << " acc " << fixed(r.acc) << " n " << r.n_predictions << '\n';
  });
}

struct Cv {
  std::string model = "lkt", data;
  std::optional<std::string> vocab;
  std::size_t folds = 5;
  double val_fraction = 0.1;
  ModelFlags flags;
  TrainFlags train;
};

void cv_cmd(const Cv& c, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(c.data, "data file", true));
  auto cfg = experiment(c.flags, c.train, common, c.val_fraction);
  cfg.model = parse_model_kind(c.model);
  const auto vocab = cfg.model == ModelKind::kLkt
                         ? vocab_for(c.vocab, data, {}, out)
                         : Vocabulary();
  with_precision(common, [&]<typename T>() {
    const auto s = run_cv<T>(data, vocab, cfg, c.folds, common.seed);
    for (const auto& r : s.folds) {
      append_json_line(common.report, to_json_line(r));
      out << line(r) << '\n';
    }
    append_record(common, {{"command", "cv"},
                           {"model", c.model},
                           {"folds", c.folds},
                           {"seed", common.seed},
                           {"auc_mean", s.auc.mean},
                           {"auc_std", s.auc.std},
                           {"acc_mean", s.acc.mean},
                           {"acc_std", s.acc.std}});
    out << "cv " << c.model << ": auc " << fixed(s.auc.mean) << " +- " << fixed(s.auc.std)
        << ", acc " << fixed(s.acc.mean) << " +- " << fixed(s.acc.std) << '\n';
  });
}

struct ColdStart {
  std::string checkpoint, vocab, data;
  std::vector<double> fractions = {0.01, 0.05, 0.2, 1.0};
  bool no_dkt = false;
  SplitFlags split;
  ModelFlags flags;
  TrainFlags train;
};

void coldstart_cmd(const ColdStart& c, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(c.data, "data file", true));
  const auto ckpt = load_checkpoint(require_input(c.checkpoint, "checkpoint"));
  const auto vocab = Vocabulary::load(require_input(c.vocab, "vocabulary file"));
  auto cfg = experiment(c.flags, c.train, common, c.split.val_fraction);
  ColdStartOptions options{c.split.test_fraction, c.split.val_fraction, !c.no_dkt};
  with_precision(common, [&]<typename T>() {
    const auto pretrained = LktModel<T>::from_checkpoint(ckpt);
    const auto reports = coldstart_fraction_sweep(pretrained, data, vocab,
                                                  std::span<const double>(c.fractions), cfg,
                                                  options, common.seed);
    for (const auto& r : reports) {
      append_json_line(common.report, to_json_line(r));
      out << line(r) << '\n';
    }
  });
}

struct SeqLen {
  std::string checkpoint, data;
  std::optional<std::string> vocab;
  std::vector<std::size_t> buckets = {5, 10, 20, 50, 100};
};

void seqlen_cmd(const SeqLen& s, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(s.data, "data file", true));
  const auto ckpt = load_checkpoint(require_input(s.checkpoint, "checkpoint"));
  with_precision(common, [&]<typename T>() {
    std::vector<EvalReport> reports;
    if (std::adjacent_find(s.buckets.begin(), s.buckets.end(), std::greater_equal<>()) !=
        s.buckets.end()) {
      throw ValidationError("--buckets must be strictly ascending");
    }
    std::size_t longest = 0;
    for (const auto& st : data) longest = std::max(longest, st.records.size());
    std::vector<std::size_t> kept;
    for (auto len : s.buckets) {
      if (len <= longest) {
        kept.push_back(len);
      } else {
        out << "skipping bucket " << len << ": longest history is " << longest << '\n';
      }
    }
    const std::span<const std::size_t> buckets(kept);
    if (ckpt.kind == "lkt") {
      if (!s.vocab) throw ValidationError("--vocab is required for LKT checkpoints");
      const auto vocab = Vocabulary::load(require_input(*s.vocab, "vocabulary file"));
      reports = seq_length_buckets(LktModel<T>::from_checkpoint(ckpt), data, vocab, buckets,
                                   common.seed);
    } else {
      reports = seq_length_buckets(DktModel<T>::from_checkpoint(ckpt),
                                   dkt_checkpoint_questions(ckpt), data, buckets, common.seed);
    }
    for (const auto& r : reports) {
      append_json_line(common.report, to_json_line(r));
      out << line(r) << '\n';
    }
  });
}

struct ZeroShot {
  std::string lkt_checkpoint, dkt_checkpoint, vocab, data;
  double mask_rate = 0.15;
};

void zeroshot_cmd(const ZeroShot& z, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(z.data, "data file", true));
  const auto lkt_ckpt = load_checkpoint(require_input(z.lkt_checkpoint, "LKT checkpoint"));
  const auto dkt_ckpt = load_checkpoint(require_input(z.dkt_checkpoint, "DKT checkpoint"));
  const auto vocab = Vocabulary::load(require_input(z.vocab, "vocabulary file"));
  with_precision(common, [&]<typename T>() {
    const auto [lkt, dkt] = zero_shot_eval(
        LktModel<T>::from_checkpoint(lkt_ckpt), vocab, DktModel<T>::from_checkpoint(dkt_ckpt),
        dkt_checkpoint_questions(dkt_ckpt), data, z.mask_rate, common.seed);
    for (const auto& r : {lkt, dkt}) {
      append_json_line(common.report, to_json_line(r));
      out << line(r) << '\n';
    }
  });
}

struct Explain {
  std::string checkpoint, vocab, data, student, out;
  std::optional<std::size_t> interaction;
  std::size_t layer = 0, head = 0, samples = 1000;
};

void explain_cmd(const Explain& x, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(x.data, "data file", true));
  const auto ckpt = load_checkpoint(require_input(x.checkpoint, "checkpoint"));
  const auto vocab = Vocabulary::load(require_input(x.vocab, "vocabulary file"));
  if (!x.out.empty()) require_output(x.out, "explanation");
  const auto& history = find_student(data, x.student);
  const std::size_t index = x.interaction.value_or(history.records.size() - 1);
  if (index >= history.records.size()) {
    throw ValidationError("student " + x.student + " has " +
                          std::to_string(history.records.size()) + " interactions");
  }
  with_precision(common, [&]<typename T>() {
    const auto model = LktModel<T>::from_checkpoint(ckpt);
    const auto ex = example_for(history, vocab, model.config().max_len, index);
    const double prediction = predict_example(model, ex).front();
    LimeOptions options;
    options.num_samples = x.samples;
    options.seed = common.seed;
    const auto attention = mean_attention(model, ex, x.layer, x.head, &vocab);
    const auto lime = lime_explain(model, ex, ex.mask_positions.front(), options, &vocab);
    json result{{"student_id", x.student},
                {"interaction", index},
                {"question_id", history.records[index].question_id},
                {"response", history.records[index].response},
                {"prediction", prediction},
                {"attention", json::parse(to_json(attention))},
                {"lime", json::parse(to_json(lime))}};
    if (x.out.empty()) {
      out << result.dump() << '\n';
    } else {
      std::ofstream(x.out) << result.dump(2) << '\n';
    }
    append_record(common, {{"command", "explain"},
                           {"student_id", x.student},
                           {"interaction", index},
                           {"prediction", prediction},
                           {"seed", common.seed}});
    std::size_t top = 0;
    for (std::size_t i = 1; i < lime.weights.size(); ++i) {
      if (std::abs(lime.weights[i]) > std::abs(lime.weights[top])) top = i;
    }
    out << "explain " << x.student << " #" << index << ": prediction " << fixed(prediction);
    if (!lime.weights.empty()) {
      out << ", strongest token '" << lime.tokens[top] << "' (" << fixed(lime.weights[top]) << ")";
    }
    out << '\n';
  });
}

struct Export {
  std::string checkpoint, vocab, data, position = "mask_position", out = "embeddings.csv";
};

void export_cmd(const Export& e, const Common& common, std::ostream& out) {
  const auto data = load_interactions(require_input(e.data, "data file", true));
  const auto ckpt = load_checkpoint(require_input(e.checkpoint, "checkpoint"));
  const auto vocab = Vocabulary::load(require_input(e.vocab, "vocabulary file"));
  const auto path = require_output(e.out, "embeddings");
  const auto rule = parse_position_rule(e.position);
  with_precision(common, [&]<typename T>() {
    const auto model = LktModel<T>::from_checkpoint(ckpt);
    std::vector<LktExample> examples;
    for (const auto& h : data) {
      if (!h.records.empty()) {
        examples.push_back(example_for(h, vocab, model.config().max_len, h.records.size() - 1));
      }
    }
    const auto rows = export_embeddings(model, std::span<const LktExample>(examples), rule);
    save_embeddings(path, rows);
    append_record(common, {{"command", "export-embeddings"},
                           {"out", path.string()},
                           {"rows", rows.size()},
                           {"position", e.position}});
    out << "export-embeddings: " << rows.size() << " rows -> " << path.string() << '\n';
  });
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language-model knowledge tracing experiments", "lkt"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI file; [command] sections hold flag defaults");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Common common;
  std::function<void()> action;

  GenData g;
  auto* cmd = app.add_subcommand("gen-data", "Generate a synthetic interaction data set");
  add_common(cmd, common);
  cmd->add_option("--out", g.out_dir, "Output directory")->required();
  cmd->add_option("--students", g.params.num_students)->capture_default_str();
  cmd->add_option("--questions", g.params.num_questions)->capture_default_str();
  cmd->add_option("--concepts", g.params.num_concepts)->capture_default_str();
  cmd->add_option("--min-interactions", g.params.min_interactions)->capture_default_str();
  cmd->add_option("--max-interactions", g.params.max_interactions)->capture_default_str();
  cmd->add_option("--question-prefix", g.params.question_prefix)->capture_default_str();
  cmd->add_option("--student-prefix", g.params.student_prefix)->capture_default_str();
  cmd->callback([&] { action = [&] { gen_data(g, common, out); }; });

  BuildVocab b;
  cmd = app.add_subcommand("build-vocab", "Build a word vocabulary from question texts");
  add_common(cmd, common);
  cmd->add_option("--data", b.data, "Interactions CSV")->required();
  cmd->add_option("--out", b.out)->capture_default_str();
  cmd->add_option("--min-freq", b.min_freq)->capture_default_str();
  cmd->add_option("--max-size", b.max_size)->capture_default_str();
  cmd->callback([&] { action = [&] { build_vocab_cmd(b, common, out); }; });

  Pretrain p;
  cmd = app.add_subcommand("pretrain", "Masked-language-model pretraining of the encoder");
  add_common(cmd, common);
  cmd->add_option("--data", p.data, "Interactions CSV")->required();
  cmd->add_option("--vocab", p.vocab, "Vocabulary file (built from --data when absent)");
  cmd->add_option("--out", p.out)->capture_default_str();
  cmd->add_option("--val-fraction", p.val_fraction)->capture_default_str();
  add_model_flags(cmd, p.model);
  add_train_flags(cmd, p.train);
  cmd->callback([&] { action = [&] { pretrain(p, common, out); }; });

  Train t;
  cmd = app.add_subcommand("train", "Train an LKT or DKT model");
  add_common(cmd, common);
  cmd->add_option("--model", t.model)->check(CLI::IsMember({"lkt", "dkt"}))->capture_default_str();
  cmd->add_option("--data", t.data, "Interactions CSV")->required();
  cmd->add_option("--vocab", t.vocab, "Vocabulary file (built from --data when absent)");
  cmd->add_option("--init", t.init, "LKT checkpoint to fine-tune");
  cmd->add_option("--out", t.out, "Checkpoint path (default <model>.ckpt)");
  add_split_flags(cmd, t.split);
  add_model_flags(cmd, t.flags);
  add_train_flags(cmd, t.train);
  cmd->callback([&] { action = [&] { train_cmd(t, common, out); }; });

  Eval e;
  cmd = app.add_subcommand("eval", "Score a checkpoint on one split of a data set");
  add_common(cmd, common);
  cmd->add_option("--checkpoint", e.checkpoint)->required();
  cmd->add_option("--data", e.data, "Interactions CSV")->required();
  cmd->add_option("--vocab", e.vocab, "Vocabulary file (LKT)");
  cmd->add_option("--split", e.split)
      ->check(CLI::IsMember({"test", "val", "train", "all"}))
      ->capture_default_str();
  cmd->add_option("--mask-rate", e.mask_rate)->capture_default_str();
  add_split_flags(cmd, e.splits);
  cmd->callback([&] { action = [&] { eval_cmd(e, common, out); }; });

  Cv c;
  cmd = app.add_subcommand("cv", "Student-level k-fold cross-validation");
  add_common(cmd, common);
  cmd->add_option("--model", c.model)->check(CLI::IsMember({"lkt", "dkt"}))->capture_default_str();
  cmd->add_option("--data", c.data, "Interactions CSV")->required();
  cmd->add_option("--vocab", c.vocab, "Vocabulary file (built from --data when absent)");
  cmd->add_option("--folds", c.folds)->capture_default_str();
  cmd->add_option("--val-fraction", c.val_fraction)->capture_default_str();
  add_model_flags(cmd, c.flags);
  add_train_flags(cmd, c.train);
  cmd->callback([&] { action = [&] { cv_cmd(c, common, out); }; });

  ColdStart cs;
  cmd = app.add_subcommand("coldstart", "Fine-tune on growing fractions of a target domain");
  add_common(cmd, common);
  cmd->add_option("--checkpoint", cs.checkpoint, "Source-domain LKT checkpoint")->required();
  cmd->add_option("--vocab", cs.vocab)->required();
  cmd->add_option("--data", cs.data, "Target-domain interactions CSV")->required();
  cmd->add_option("--fractions", cs.fractions)->delimiter(',')->capture_default_str();
  cmd->add_flag("--no-dkt", cs.no_dkt, "Skip the from-scratch DKT comparator");
  add_split_flags(cmd, cs.split);
  add_model_flags(cmd, cs.flags);
  add_train_flags(cmd, cs.train);
  cmd->callback([&] { action = [&] { coldstart_cmd(cs, common, out); }; });

  SeqLen s;
  cmd = app.add_subcommand("seqlen", "Accuracy by history length");
  add_common(cmd, common);
  cmd->add_option("--checkpoint", s.checkpoint)->required();
  cmd->add_option("--data", s.data, "Interactions CSV")->required();
  cmd->add_option("--vocab", s.vocab, "Vocabulary file (LKT)");
  cmd->add_option("--buckets", s.buckets)->delimiter(',')->capture_default_str();
  cmd->callback([&] { action = [&] { seqlen_cmd(s, common, out); }; });

  ZeroShot z;
  cmd = app.add_subcommand("zeroshot", "Score source-domain models on an unseen domain");
  add_common(cmd, common);
  cmd->add_option("--lkt-checkpoint", z.lkt_checkpoint)->required();
  cmd->add_option("--dkt-checkpoint", z.dkt_checkpoint)->required();
  cmd->add_option("--vocab", z.vocab)->required();
  cmd->add_option("--data", z.data, "Target-domain interactions CSV")->required();
  cmd->add_option("--mask-rate", z.mask_rate)->capture_default_str();
  cmd->callback([&] { action = [&] { zeroshot_cmd(z, common, out); }; });

  Explain x;
  cmd = app.add_subcommand("explain", "Attention map and LIME weights for one prediction");
  add_common(cmd, common);
  cmd->add_option("--checkpoint", x.checkpoint)->required();
  cmd->add_option("--vocab", x.vocab)->required();
  cmd->add_option("--data", x.data, "Interactions CSV")->required();
  cmd->add_option("--student", x.student)->required();
  cmd->add_option("--interaction", x.interaction, "Interaction index (default: last)");
  cmd->add_option("--layer", x.layer)->capture_default_str();
  cmd->add_option("--head", x.head)->capture_default_str();
  cmd->add_option("--samples", x.samples)->capture_default_str();
  cmd->add_option("--out", x.out, "JSON output file (default: stdout)");
  cmd->callback([&] { action = [&] { explain_cmd(x, common, out); }; });

  Export ex;
  cmd = app.add_subcommand("export-embeddings", "Hidden states for each student's last answer");
  add_common(cmd, common);
  cmd->add_option("--checkpoint", ex.checkpoint)->required();
  cmd->add_option("--vocab", ex.vocab)->required();
  cmd->add_option("--data", ex.data, "Interactions CSV")->required();
  cmd->add_option("--position", ex.position)
      ->check(CLI::IsMember({"mask_position", "cls"}))
      ->capture_default_str();
  cmd->add_option("--out", ex.out)->capture_default_str();
  cmd->callback([&] { action = [&] { export_cmd(ex, common, out); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }
  try {
    action();
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace lkt
