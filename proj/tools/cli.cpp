#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "dpq/analysis.hpp"
#include "dpq/codebook_io.hpp"
#include "dpq/trainer.hpp"

namespace dpq::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kTargetSalt = 0x7A3C5B1E9D2F4068ull;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw UsageError("--" + key + ": '" + v + "' is not a number");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v, std::int64_t lo) {
  std::int64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw UsageError("--" + key + ": '" + v + "' is not an integer");
  if (out < lo) throw UsageError("--" + key + " must be >= " + std::to_string(lo));
  return out;
}

std::uint64_t parse_seed(const std::string& what, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw UsageError(what + ": '" + v + "' is not a seed");
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// String-valued options with defaults, so that a key=value file and the
// command line feed the same table.
struct Registry {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::set<std::string> from_file;

  void add(CLI::App* app, const std::string& key, const std::string& def, const std::string& help) {
    values[key] = def;
    options[key] = app->add_option("--" + key, values[key], help)->default_str(def);
  }
  void flag(CLI::App* app, const std::string& key, const std::string& help) {
    values[key] = "false";
    options[key] = app->add_flag("--" + key + "{true}", values[key], help);
  }
  bool given(const std::string& key) const { return options.at(key)->count() > 0 || from_file.count(key) > 0; }
  const std::string& operator[](const std::string& key) const { return values.at(key); }

  // Keys from the file fill whatever the command line left unset.
  void merge_file(const fs::path& path) {
    for (const auto& [k, v] : read_key_values(path)) {
      const auto it = options.find(k);
      if (it == options.end()) throw UsageError("unknown key '" + k + "' in " + path.string());
      if (it->second->count() == 0) {
        values[k] = v;
        from_file.insert(k);
      }
    }
  }
};

class RunLock {
public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw std::runtime_error("run directory is locked (" + path_.string() + " exists) or not writable");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Matrix read_matrix_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open target table " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) row.push_back(parse_real("target", tok));
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size()) throw UsageError("target table rows have different lengths");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw UsageError("target table is empty");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

// ---- train -----------------------------------------------------------------------

const std::vector<std::string> kRunKeys = {"task",   "embedding", "lr",      "query-lr",   "momentum", "epochs",
                                           "batch",  "shards",    "hidden",  "seed",       "dataset",  "min-count",
                                           "target", "docs",      "topic-prob", "checkpoint-every"};

struct TrainCommand {
  Registry reg;
  std::string config_path;
  std::string out_dir = "run";

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value file with defaults for any flag below (e.g. a resolved_config.txt)");
    app->add_option("--out", out_dir, "run directory")->default_str(out_dir);
    reg.add(app, "task", "recon", "recon (reconstruct a table) or classify (text classifier)");
    reg.add(app, "embedding", "dpq", "classify only: dpq (quantized per --mode) or full (dense baseline)");
    reg.add(app, "n", "auto", "vocabulary size (recon default 256; classify: from the dataset)");
    reg.add(app, "d", "auto", "embedding width (recon default 32, classify default 64)");
    reg.add(app, "k", "16", "codes per group (K)");
    reg.add(app, "d-groups", "8", "number of groups (D)");
    reg.add(app, "mode", "sx", "sx or vq");
    reg.add(app, "distance", "euclidean", "dot, euclidean or cosine (vq: euclidean only)");
    reg.flag(app, "subspace-sharing", "one key/value block shared by all groups");
    reg.add(app, "tau-forward", "0", "forward temperature; 0 emits hard codes");
    reg.add(app, "tau-backward", "1", "temperature of the relaxation used for gradients");
    reg.add(app, "reg-coefficient", "1", "weight of the centroid regularizer (vq)");
    reg.add(app, "ema-decay", "none", "vq: moving-average centroid updates with this decay");
    reg.flag(app, "batch-norm", "normalize distances over the batch before selection");
    reg.flag(app, "bn-affine", "learn a scale and shift after normalization");
    reg.add(app, "bn-momentum", "0.9", "running-statistics momentum");
    reg.add(app, "bn-eps", "1e-05", "normalization epsilon");
    reg.add(app, "lr", "0.1", "SGD step");
    reg.add(app, "query-lr", "none", "separate step for query rows (default: --lr)");
    reg.add(app, "momentum", "0", "SGD momentum");
    reg.add(app, "epochs", "10", "training epochs");
    reg.add(app, "batch", "32", "batch size");
    reg.add(app, "shards", "1", "concurrent batch shards (1 = deterministic single thread)");
    reg.add(app, "hidden", "32", "classifier hidden width");
    reg.add(app, "seed", "0", "seed (falls back to $DPQ_SEED)");
    reg.add(app, "dataset", "", "classify: label<TAB>text file (default: synthetic 4-class corpus)");
    reg.add(app, "min-count", "1", "classify: drop tokens seen fewer times");
    reg.add(app, "target", "", "recon: whitespace-separated table, one row per line (default: seeded normal)");
    reg.add(app, "docs", "10000", "synthetic corpus size");
    reg.add(app, "topic-prob", "0.4", "synthetic corpus topic-word probability");
    reg.add(app, "checkpoint-every", "0", "write a checkpoint every N epochs (0 = none)");
  }

  int execute(std::ostream& out, const Hooks&);
};

DpqConfig dpq_config_from(const Registry& reg, Index n, Index d) {
  KeyValues kv;
  for (const auto& key : kConfigKeys)
    if (key != "n" && key != "d") kv[key] = reg[key];
  DpqConfig cfg;
  try {
    apply_config_key_values(cfg, kv);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  cfg.vocab_size = n;
  cfg.dim = d;
  return cfg;
}

int TrainCommand::execute(std::ostream& out, const Hooks&) {
  if (!config_path.empty()) reg.merge_file(config_path);

  const std::string task = reg["task"];
  if (task != "recon" && task != "classify") throw UsageError("--task must be recon or classify");
  const std::string embedding = reg["embedding"];
  if (embedding != "dpq" && embedding != "full") throw UsageError("--embedding must be dpq or full");

  std::uint64_t seed = parse_seed("--seed", reg["seed"]);
  if (!reg.given("seed"))
    if (const char* env = std::getenv("DPQ_SEED")) seed = parse_seed("DPQ_SEED", env);

  TrainOptions opt;
  opt.seed = seed;
  opt.sgd.lr = parse_real("lr", reg["lr"]);
  if (reg["query-lr"] != "none") opt.sgd.query_lr = parse_real("query-lr", reg["query-lr"]);
  opt.sgd.momentum = parse_real("momentum", reg["momentum"]);
  opt.epochs = parse_int("epochs", reg["epochs"], 0);
  opt.batch = parse_int("batch", reg["batch"], 1);
  opt.shards = parse_int("shards", reg["shards"], 1);
  opt.hidden = parse_int("hidden", reg["hidden"], 1);
  const Index every = parse_int("checkpoint-every", reg["checkpoint-every"], 0);
  if (!(opt.sgd.lr >= 0.0) || !(opt.sgd.momentum >= 0.0 && opt.sgd.momentum < 1.0))
    throw UsageError("--lr must be >= 0 and --momentum in [0, 1)");

  // Resolve the data first: it fixes n and d.
  const bool recon = task == "recon";
  Matrix target;
  DatasetSplit split;
  Index n = 0, d = 0;
  if (recon) {
    if (!reg["target"].empty()) {
      target = read_matrix_text(reg["target"]);
      n = target.rows();
      d = target.cols();
      if (reg["n"] != "auto" && parse_int("n", reg["n"], 1) != n) throw UsageError("--n does not match the target table");
      if (reg["d"] != "auto" && parse_int("d", reg["d"], 1) != d) throw UsageError("--d does not match the target table");
    } else {
      n = reg["n"] == "auto" ? 256 : parse_int("n", reg["n"], 1);
      d = reg["d"] == "auto" ? 32 : parse_int("d", reg["d"], 1);
      Rng trng(seed ^ kTargetSalt);
      target = trng.normal_matrix(n, d);
    }
  } else {
    d = reg["d"] == "auto" ? 64 : parse_int("d", reg["d"], 1);
    TextDataset data;
    if (!reg["dataset"].empty()) {
      data = load_text_dataset(reg["dataset"], static_cast<std::uint64_t>(parse_int("min-count", reg["min-count"], 1)));
      if (reg["n"] != "auto" && parse_int("n", reg["n"], 1) != data.vocab.size())
        throw UsageError("--n does not match the dataset vocabulary (" + std::to_string(data.vocab.size()) + ")");
    } else {
      SyntheticCorpus sc;
      if (reg["n"] != "auto") sc.vocab_size = parse_int("n", reg["n"], 1);
      sc.documents = parse_int("docs", reg["docs"], 10);
      sc.topic_prob = parse_real("topic-prob", reg["topic-prob"]);
      try {
        data = synthetic_corpus(sc, seed);
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
    }
    n = data.vocab.size();
    split = split_dataset(data, 0.8, seed);
  }

  DpqConfig cfg = dpq_config_from(reg, n, d);
  const bool quantized = recon || embedding == "dpq";
  if (quantized) {
    try {
      cfg.validate();
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  } else if (d % cfg.num_groups != 0) {
    throw UsageError("--d-groups must divide --d");
  }

  // Everything needed to reproduce the run, minus the output location.
  KeyValues resolved = config_to_key_values(cfg);
  for (const auto& key : kRunKeys) resolved[key] = reg[key];
  resolved["seed"] = std::to_string(seed);

  const fs::path dir = out_dir;
  fs::create_directories(dir);
  RunLock lock(dir / ".lock");
  write_key_values(resolved, dir / "resolved_config.txt");
  const fs::path ckpt = dir / "checkpoints";
  if (every > 0) fs::create_directories(ckpt);
  opt.on_epoch = [&](const EpochRecord& rec, const EmbeddingLayer& layer) {
    if (every <= 0 || rec.epoch % every != 0 || !layer.quantizer()) return;
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%06lld", static_cast<long long>(rec.epoch));
    save_artifact(make_artifact(*layer.quantizer(), *layer.config()), ckpt / (std::string(name) + ".dpq"));
    save_training_state(*layer.quantizer(), ckpt / (std::string(name) + ".state"));
  };

  TrainReport report;
  if (recon) {
    ReconstructionResult r = train_reconstruction(target, cfg, opt);
    save_artifact(make_artifact(r.state, cfg), dir / "model.dpq");
    save_training_state(r.state, dir / "model.state");
    report = std::move(r.report);
  } else {
    const EmbeddingKind kind = embedding == "full" ? EmbeddingKind::full
                               : cfg.mode == Mode::sx ? EmbeddingKind::sx
                                                      : EmbeddingKind::vq;
    ClassifierResult r = train_classifier(split, kind, cfg, opt);
    split.train.vocab.save(dir / "vocab.tsv");
    if (const QuantizerState* q = r.model->embedding().quantizer()) {
      save_artifact(make_artifact(*q, *r.model->embedding().config()), dir / "model.dpq");
      save_training_state(*q, dir / "model.state");
    }
    report = std::move(r.report);
  }
  write_text(dir / "report.tsv", report.tsv());

  const EpochRecord& last = report.last();
  out << "task\t" << task << '\n';
  out << (recon ? "mse\t" : "train_accuracy\t") << fmt(last.metric) << '\n';
  if (last.heldout_accuracy) out << "heldout_accuracy\t" << fmt(*last.heldout_accuracy) << '\n';
  if (report.compression) out << "compression_ratio\t" << fixed(report.compression->ratio, 2) << '\n';
  out << "wall_seconds\t" << fixed(report.wall_seconds, 3) << '\n';
  out << "out\t" << dir.string() << '\n';
  return kExitOk;
}

// ---- inspect ---------------------------------------------------------------------

struct InspectCommand {
  std::string artifact, vocab, ids, tokens, dir, token;
  Index id = -1, top = 10;
  std::string which;
  double rank_tol = 1e-9;

  std::optional<Vocabulary> load_vocab() const {
    fs::path p = vocab;
    if (p.empty() && !artifact.empty()) p = fs::path(artifact).parent_path() / "vocab.tsv";
    if (p.empty() || !fs::exists(p)) {
      if (!vocab.empty()) throw UsageError("vocabulary file not found: " + vocab);
      return std::nullopt;
    }
    return Vocabulary::load(p);
  }

  Index resolve_token(const std::optional<Vocabulary>& v, const std::string& t) const {
    if (!v) throw UsageError("token lookup needs a vocabulary (--vocab)");
    const auto found = v->find(t);
    if (!found) throw UsageError("unknown token '" + t + "'");
    return *found;
  }

  int execute(std::ostream& out, std::ostream& err);
};

std::uint64_t step_of(const fs::path& p) {
  const std::string stem = p.stem().string();
  std::string digits;
  for (char c : stem)
    if (c >= '0' && c <= '9') digits += c;
  return digits.empty() ? 0 : std::stoull(digits);
}

int InspectCommand::execute(std::ostream& out, std::ostream& err) {
  if (which == "delta") {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".dpq") files.push_back(e.path());
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
      return step_of(a) != step_of(b) ? step_of(a) < step_of(b) : a < b;
    });
    if (files.size() < 2) throw UsageError("delta needs at least two checkpoints in " + dir);
    std::vector<CheckpointDelta> deltas;
    CompressedArtifact prev = load_artifact(files[0]);
    for (std::size_t i = 1; i < files.size(); ++i) {
      CompressedArtifact cur = load_artifact(files[i]);
      deltas.push_back(code_change_rate(prev.codes, cur.codes, step_of(files[i - 1]), step_of(files[i])));
      prev = std::move(cur);
    }
    out << delta_tsv(deltas);
    return kExitOk;
  }

  const CompressedArtifact a = load_artifact(artifact);
  if (which == "stats") {
    const CompressionStats cs = compression_stats(a.vocab_size(), a.dim(), a.num_codes(), a.num_groups(), a.shared());
    const PayloadSize ps = payload_size(a.vocab_size(), a.dim(), a.num_codes(), a.num_groups(), a.shared());
    const RankCertificate rc = rank_certificate(a.codes, a.values, rank_tol);
    out << "n\t" << a.vocab_size() << "\nd\t" << a.dim() << "\nk\t" << a.num_codes() << "\nd_groups\t" << a.num_groups()
        << "\nsubspace_sharing\t" << (a.shared() ? "true" : "false") << "\ntied\t" << (a.tied ? "true" : "false")
        << "\ncode_bits\t" << code_bits(a.num_codes()) << "\nfull_bits\t" << cs.full_bits << "\ncompressed_bits\t"
        << cs.compressed_bits << "\npayload_bits\t" << ps.payload_bits() << "\ncompression_ratio\t" << fmt(cs.ratio)
        << "\nrank_one_hot\t" << rc.rank_one_hot << "\nrank_table\t" << rc.rank_table << "\nexpected_rank\t"
        << rc.expected_rank << "\nconditions_hold\t" << (rc.conditions_hold() ? "true" : "false")
        << "\nfull_rank\t" << (rc.proposition_holds ? "true" : "false") << '\n';
    return kExitOk;
  }
  if (which == "hist") {
    out << histogram_tsv(code_distribution(a.codes));
    return kExitOk;
  }
  const auto v = load_vocab();
  if (which == "codes") {
    std::vector<Index> list;
    for (const auto& s : split_list(ids)) list.push_back(parse_int("ids", s, 0));
    for (const auto& t : split_list(tokens)) list.push_back(resolve_token(v, t));
    if (ids.empty() && tokens.empty())
      for (Index i = 0; i < a.vocab_size(); ++i) list.push_back(i);
    try {
      out << export_code_table(a.codes, v ? &*v : nullptr, list);
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    return kExitOk;
  }
  if (which == "nn") {
    const Index query = token.empty() ? id : resolve_token(v, token);
    if (query < 0) throw UsageError("nn needs --token or --id");
    NeighborList nl;
    try {
      nl = nearest_neighbors(build_table(a.codes, a.values), query, std::min(top, a.vocab_size()));
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    if (nl.zero_norm_skipped > 0) err << "warning: " << nl.zero_norm_skipped << " zero-norm rows left out\n";
    out << neighbors_tsv(nl, v ? &*v : nullptr);
    return kExitOk;
  }
  throw UsageError("unknown inspect command");
}

// ---- gradcheck -------------------------------------------------------------------

struct GradCheckCommand {
  std::string mode = "both", distance = "all";
  bool batch_norm = false, bn_affine = false;
  double tau_backward = 1.0, reg = 1.0;
  std::uint64_t seed = 0;
  Index seeds = 5;
  GradCheckSizes sizes;

  int execute(std::ostream& out, const Hooks& hooks) const {
    if (mode != "both" && mode != "sx" && mode != "vq") throw UsageError("--mode must be sx, vq or both");
    std::vector<Distance> metrics;
    if (distance == "all") metrics = {Distance::dot, Distance::euclidean, Distance::cosine};
    else {
      try {
        metrics = {parse_distance(distance)};
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
    }
    if (seeds < 1) throw UsageError("--seeds must be >= 1");
    GradCheckOptions gopt;
    gopt.flip_value_sign = hooks.flip_value_grad_sign;
    bool ok = true;
    double worst_sx = 0.0, worst_reg = 0.0;
    out << "seed\tdistance\tmax_rel_err_sx\tvq_identity_ok\treg_grad_rel_err\n";
    for (Index s = 0; s < seeds; ++s) {
      for (Distance m : metrics) {
        DpqConfig cfg;
        cfg.distance = m;
        cfg.batch_norm = batch_norm;
        cfg.bn_affine = bn_affine;
        cfg.tau_backward = tau_backward;
        cfg.reg_coefficient = reg;
        GradCheckResult r;
        try {
          r = grad_check(cfg, seed + static_cast<std::uint64_t>(s), sizes, gopt);
        } catch (const InvalidArgument& e) {
          throw UsageError(e.what());
        }
        const bool sx_ok = r.max_rel_err_sx < GradCheckResult::kSxTolerance;
        const bool vq_ok = r.vq_identity_ok && r.reg_grad_rel_err < GradCheckResult::kRegTolerance &&
                           r.reg_minimizer_grad < 1e-9;
        if (mode != "vq") ok = ok && sx_ok;
        if (mode != "sx") ok = ok && vq_ok;
        worst_sx = std::max(worst_sx, r.max_rel_err_sx);
        worst_reg = std::max(worst_reg, r.reg_grad_rel_err);
        out << seed + static_cast<std::uint64_t>(s) << '\t' << to_string(m) << '\t' << fmt(r.max_rel_err_sx) << '\t'
            << (r.vq_identity_ok ? "true" : "false") << '\t' << fmt(r.reg_grad_rel_err) << '\n';
      }
    }
    out << "worst_sx\t" << fmt(worst_sx) << "\nworst_reg\t" << fmt(worst_reg) << "\nresult\t" << (ok ? "pass" : "FAIL")
        << '\n';
    return ok ? kExitOk : kExitGradCheck;
  }
};

// ---- bench -----------------------------------------------------------------------

struct BenchCommand {
  Index n = 10000, d = 64, k = 16, groups = 8, batch = 256, iters = 20;
  std::string mode = "sx", distance = "euclidean";
  std::uint64_t seed = 0;

  int execute(std::ostream& out) const {
    DpqConfig cfg;
    cfg.vocab_size = n;
    cfg.dim = d;
    cfg.num_codes = k;
    cfg.num_groups = groups;
    try {
      cfg.mode = parse_mode(mode);
      cfg.distance = parse_distance(distance);
      cfg.validate();
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    if (batch < 1 || iters < 1) throw UsageError("--batch and --iters must be >= 1");
    Rng rng(seed);
    const QuantizerState st = init_state(cfg, rng);
    std::vector<Index> rows(static_cast<std::size_t>(std::min(batch, n)));
    for (auto& r : rows) r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    const Matrix up = rng.normal_matrix(static_cast<Index>(rows.size()), d);

    using clock = std::chrono::steady_clock;
    const auto seconds = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };
    out << "op\tseconds\trows_per_second\n";
    const auto line = [&](const char* op, double sec, double count) {
      out << op << '\t' << fixed(sec, 6) << '\t' << fixed(count / std::max(sec, 1e-12), 0) << '\n';
    };
    auto t = clock::now();
    ForwardTrace tr;
    for (Index i = 0; i < iters; ++i) tr = cfg.mode == Mode::sx ? sx_forward(st, cfg, rows) : vq_forward(st, cfg, rows);
    line("forward", seconds(t), static_cast<double>(iters * static_cast<Index>(rows.size())));
    t = clock::now();
    for (Index i = 0; i < iters; ++i)
      (void)(cfg.mode == Mode::sx ? sx_backward(tr, up, st, cfg) : vq_backward(tr, up, st, cfg));
    line("backward", seconds(t), static_cast<double>(iters * static_cast<Index>(rows.size())));
    t = clock::now();
    const Codebook codes = discretize_all(st, cfg);
    line("discretize_all", seconds(t), static_cast<double>(n));
    t = clock::now();
    const auto bytes = serialize_artifact(CompressedArtifact{codes, st.values(), st.tied()});
    const CompressedArtifact back = parse_artifact(bytes);
    line("serialize+parse", seconds(t), static_cast<double>(n));
    t = clock::now();
    (void)build_table(back.codes, back.values);
    line("build_table", seconds(t), static_cast<double>(n));
    return kExitOk;
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const Hooks& hooks) {
  CLI::App app{"Differentiable product quantization: train, inspect, gradcheck, bench", "dpq"};
  app.require_subcommand(1);

  TrainCommand train;
  train.attach(app.add_subcommand("train", "train a quantized embedding (reconstruction or classification)"));

  InspectCommand inspect;
  auto* insp = app.add_subcommand("inspect", "read artifacts and checkpoints");
  insp->require_subcommand(1);
  const auto with_artifact = [&](CLI::App* c) {
    c->add_option("--artifact", inspect.artifact, "compressed artifact (.dpq)")->required();
  };
  const auto with_vocab = [&](CLI::App* c) {
    c->add_option("--vocab", inspect.vocab, "token list (default: vocab.tsv next to the artifact)");
  };
  auto* codes = insp->add_subcommand("codes", "code table (token, D codes)");
  with_artifact(codes);
  with_vocab(codes);
  codes->add_option("--ids", inspect.ids, "comma-separated token ids");
  codes->add_option("--tokens", inspect.tokens, "comma-separated tokens");
  auto* hist = insp->add_subcommand("hist", "per-group code usage (D rows x K columns)");
  with_artifact(hist);
  auto* delta = insp->add_subcommand("delta", "fraction of codes changed between consecutive checkpoints");
  delta->add_option("--dir", inspect.dir, "checkpoint directory")->required();
  auto* nn = insp->add_subcommand("nn", "cosine nearest neighbours in the decoded table");
  with_artifact(nn);
  with_vocab(nn);
  nn->add_option("--token", inspect.token, "query token");
  nn->add_option("--id", inspect.id, "query token id");
  nn->add_option("--top", inspect.top, "list length")->default_str("10");
  auto* stats = insp->add_subcommand("stats", "storage accounting and rank certificate");
  with_artifact(stats);
  stats->add_option("--rank-tol", inspect.rank_tol, "relative pivot tolerance")->default_str("1e-9");

  GradCheckCommand gc;
  auto* gcmd = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gcmd->add_option("--mode", gc.mode, "sx, vq or both")->default_str("both");
  gcmd->add_option("--distance", gc.distance, "dot, euclidean, cosine or all")->default_str("all");
  gcmd->add_flag("--batch-norm", gc.batch_norm, "normalize distances");
  gcmd->add_flag("--bn-affine", gc.bn_affine, "learned scale and shift");
  gcmd->add_option("--tau-backward", gc.tau_backward)->default_str("1");
  gcmd->add_option("--reg-coefficient", gc.reg)->default_str("1");
  gcmd->add_option("--seed", gc.seed, "first seed")->default_str("0");
  gcmd->add_option("--seeds", gc.seeds, "number of consecutive seeds")->default_str("5");
  gcmd->add_option("--n", gc.sizes.vocab_size)->default_str("8");
  gcmd->add_option("--d", gc.sizes.dim)->default_str("4");
  gcmd->add_option("--k", gc.sizes.num_codes)->default_str("3");
  gcmd->add_option("--d-groups", gc.sizes.num_groups)->default_str("2");

  BenchCommand bench;
  auto* bcmd = app.add_subcommand("bench", "time the main kernels");
  bcmd->add_option("--n", bench.n)->default_str("10000");
  bcmd->add_option("--d", bench.d)->default_str("64");
  bcmd->add_option("--k", bench.k)->default_str("16");
  bcmd->add_option("--d-groups", bench.groups)->default_str("8");
  bcmd->add_option("--batch", bench.batch)->default_str("256");
  bcmd->add_option("--iters", bench.iters)->default_str("20");
  bcmd->add_option("--mode", bench.mode)->default_str("sx");
  bcmd->add_option("--distance", bench.distance)->default_str("euclidean");
  bcmd->add_option("--seed", bench.seed)->default_str("0");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "dpq: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    if (sub->get_name() == "train") return train.execute(out, hooks);
    if (sub->get_name() == "inspect") {
      inspect.which = sub->get_subcommands().front()->get_name();
      return inspect.execute(out, err);
    }
    if (sub->get_name() == "gradcheck") return gc.execute(out, hooks);
    return bench.execute(out);
  } catch (const UsageError& e) {
    err << "dpq: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "dpq: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    err << "dpq: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const CorruptFile& e) {
    err << "dpq: corrupt file: " << e.what() << '\n';
    return kExitCorrupt;
  } catch (const CorruptCodebook& e) {
    err << "dpq: corrupt file: " << e.what() << '\n';
    return kExitCorrupt;
  } catch (const UnsupportedFile& e) {
    err << "dpq: unsupported file: " << e.what() << '\n';
    return kExitCorrupt;
  } catch (const std::exception& e) {
    err << "dpq: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace dpq::cli
