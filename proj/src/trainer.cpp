#include "dpq/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <thread>

namespace dpq {

namespace {

// Shuffles use their own stream so that init and batch order do not interact.
constexpr std::uint64_t kOrderSalt = 0xD1B54A32D192ED03ull;

void sgd_dense(Matrix& w, Matrix& vel, const Matrix& g, double lr, double momentum) {
  if (g.size() == 0) return;
  if (momentum == 0.0) {
    w -= lr * g;
    return;
  }
  if (vel.size() == 0) vel = Matrix::Zero(w.rows(), w.cols());
  vel = momentum * vel + g;
  w -= lr * vel;
}

// Near-equal contiguous slices (sizes differ by at most one).
std::vector<std::span<const Index>> split_even(std::span<const Index> all, Index parts) {
  std::vector<std::span<const Index>> out;
  const Index n = static_cast<Index>(all.size());
  parts = std::max<Index>(1, std::min(parts, n));
  Index at = 0;
  for (Index p = 0; p < parts; ++p) {
    const Index len = n / parts + (p < n % parts ? 1 : 0);
    out.push_back(all.subspan(static_cast<std::size_t>(at), static_cast<std::size_t>(len)));
    at += len;
  }
  return out;
}

template <typename F>
void run_parallel(std::size_t count, F&& fn) {
  if (count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(count);
  for (std::size_t i = 0; i < count; ++i)
    pool.emplace_back([&, i] {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

double reconstruction_mse(const Matrix& table, const EmbeddingTable& target) {
  return (table - target).squaredNorm() / static_cast<double>(target.size());
}

void require_finite_state(const QuantizerState& st, Index epoch) {
  if (!all_finite(st.queries) || !all_finite(st.keys.data()) || (!st.tied() && !all_finite(st.values().data())))
    throw TrainingDiverged(epoch, "parameters became non-finite");
}

// Past initialization every input has been validated, so a similarity that
// cannot be normalized means the parameters blew up.
Matrix guarded_lookup(EmbeddingLayer& layer, std::span<const Index> rows, Index epoch) {
  try {
    return layer.lookup(rows);
  } catch (const InvalidArgument& e) {
    throw TrainingDiverged(epoch, e.what());
  }
}

}  // namespace

// ---- optimizer ---------------------------------------------------------------

QuantizerOptimizer::QuantizerOptimizer(const QuantizerState& state, const DpqConfig& cfg, SgdOptions opt)
    : cfg_(cfg), opt_(opt) {
  if (opt.momentum != 0.0) v_queries_ = Matrix::Zero(state.queries.rows(), state.queries.cols());
}

void QuantizerOptimizer::step(QuantizerState& state, const GradientBundle& g) {
  const double mom = opt_.momentum;
  const double qlr = opt_.query_step();
  if (mom == 0.0) {
    for (std::size_t i = 0; i < g.rows.size(); ++i)
      state.queries.row(g.rows[i]) -= qlr * g.queries.row(static_cast<Index>(i));
  } else {
    std::vector<Index> touched(g.rows);
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    Matrix acc = Matrix::Zero(state.queries.rows(), state.queries.cols());
    for (std::size_t i = 0; i < g.rows.size(); ++i) acc.row(g.rows[i]) += g.queries.row(static_cast<Index>(i));
    for (Index r : touched) {
      v_queries_.row(r) = mom * v_queries_.row(r) + acc.row(r);
      state.queries.row(r) -= qlr * v_queries_.row(r);
    }
  }

  if (!state.ema) {
    if (state.tied()) {
      sgd_dense(state.keys.data(), v_keys_, g.keys + g.values, opt_.lr, mom);
    } else {
      sgd_dense(state.keys.data(), v_keys_, g.keys, opt_.lr, mom);
      sgd_dense(state.untied_values->data(), v_values_, g.values, opt_.lr, mom);
    }
  }
  if (state.norm && state.norm->affine && g.bn_gamma.size() != 0) {
    sgd_dense(state.norm->gamma, v_gamma_, g.bn_gamma, opt_.lr, mom);
    sgd_dense(state.norm->beta, v_beta_, g.bn_beta, opt_.lr, mom);
  }
}

// ---- embedding layers ----------------------------------------------------------

const char* to_string(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::full: return "full";
    case EmbeddingKind::sx: return "sx";
    case EmbeddingKind::vq: return "vq";
  }
  return "?";
}

EmbeddingKind parse_embedding_kind(const std::string& s) {
  if (s == "full") return EmbeddingKind::full;
  if (s == "sx") return EmbeddingKind::sx;
  if (s == "vq") return EmbeddingKind::vq;
  throw InvalidArgument("unknown embedding kind '" + s + "' (full, sx, vq)");
}

FullEmbedding::FullEmbedding(Matrix table, SgdOptions opt) : table_(std::move(table)), opt_(opt) {
  if (opt_.momentum != 0.0) velocity_ = Matrix::Zero(table_.rows(), table_.cols());
}

Matrix FullEmbedding::lookup(std::span<const Index> rows) {
  rows_.assign(rows.begin(), rows.end());
  Matrix out(static_cast<Index>(rows.size()), table_.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table_.rows()) throw InvalidArgument("embedding lookup: row out of range");
    out.row(static_cast<Index>(i)) = table_.row(rows[i]);
  }
  return out;
}

double FullEmbedding::backward(const Matrix& upstream) {
  if (upstream.rows() != static_cast<Index>(rows_.size()) || upstream.cols() != table_.cols())
    throw InvalidArgument("embedding backward: upstream shape mismatch");
  const double lr = opt_.query_step();
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const Index r = rows_[i];
    if (opt_.momentum == 0.0) {
      table_.row(r) -= lr * upstream.row(static_cast<Index>(i));
    } else {
      velocity_.row(r) = opt_.momentum * velocity_.row(r) + upstream.row(static_cast<Index>(i));
      table_.row(r) -= lr * velocity_.row(r);
    }
  }
  return 0.0;
}

DpqEmbedding::DpqEmbedding(QuantizerState state, DpqConfig cfg, SgdOptions opt, Index shards)
    : state_(std::move(state)), cfg_(std::move(cfg)), optimizer_(state_, cfg_, opt), shards_(std::max<Index>(1, shards)) {
  cfg_.validate();
}

Matrix DpqEmbedding::lookup(std::span<const Index> rows) {
  Index parts = shards_;
  if (cfg_.batch_norm) parts = std::min(parts, std::max<Index>(1, static_cast<Index>(rows.size()) / 2));
  const auto slices = split_even(rows, parts);
  traces_.assign(slices.size(), ForwardTrace{});
  run_parallel(slices.size(), [&](std::size_t i) {
    traces_[i] = cfg_.mode == Mode::sx ? sx_forward(state_, cfg_, slices[i], true) : vq_forward(state_, cfg_, slices[i], true);
  });
  Matrix out(static_cast<Index>(rows.size()), cfg_.dim);
  Index at = 0;
  for (const auto& t : traces_) {
    out.middleRows(at, t.output.rows()) = t.output;
    at += t.output.rows();
  }
  return out;
}

double DpqEmbedding::backward(const Matrix& upstream) {
  std::vector<GradientBundle> parts(traces_.size());
  std::vector<Index> offset(traces_.size(), 0);
  for (std::size_t i = 1; i < traces_.size(); ++i) offset[i] = offset[i - 1] + traces_[i - 1].queries.rows();
  const Index total = traces_.empty() ? 0 : offset.back() + traces_.back().queries.rows();
  if (upstream.rows() != total || upstream.cols() != cfg_.dim)
    throw InvalidArgument("embedding backward: upstream shape mismatch");
  run_parallel(traces_.size(), [&](std::size_t i) {
    const Matrix up = upstream.middleRows(offset[i], traces_[i].queries.rows());
    parts[i] = cfg_.mode == Mode::sx ? sx_backward(traces_[i], up, state_, cfg_) : vq_backward(traces_[i], up, state_, cfg_);
  });
  if (parts.empty()) return 0.0;
  GradientBundle sum = std::move(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) sum += parts[i];

  for (const auto& t : traces_) commit_norm_stats(state_, t);
  optimizer_.step(state_, sum);
  if (cfg_.ema_decay)
    for (const auto& t : traces_) ema_update(state_, t, *cfg_.ema_decay);
  traces_.clear();
  return sum.reg_loss;
}

Matrix DpqEmbedding::table() const { return build_table(discretize_all(state_, cfg_), state_.values()); }

// ---- reports -------------------------------------------------------------------

std::string TrainReport::tsv() const {
  std::string out = "# task=" + task + "\n";
  if (compression)
    out += "# full_bits=" + std::to_string(compression->full_bits) +
           " compressed_bits=" + std::to_string(compression->compressed_bits) + " ratio=" + num(compression->ratio) + "\n";
  out += "epoch\tloss\tmetric\theldout_accuracy\treg_loss\tcode_change\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + '\t' + num(e.loss) + '\t' + num(e.metric) + '\t' +
           (e.heldout_accuracy ? num(*e.heldout_accuracy) : "-") + '\t' + num(e.reg_loss) + '\t' +
           (e.code_change ? num(*e.code_change) : "-") + '\n';
  }
  return out;
}

// ---- reconstruction --------------------------------------------------------------

QuantizerState reconstruction_init(const EmbeddingTable& target, const DpqConfig& cfg, bool keys_from_data, Rng& rng) {
  cfg.validate();
  if (target.rows() != cfg.vocab_size || target.cols() != cfg.dim)
    throw InvalidArgument("reconstruction target shape does not match the config");
  require_finite(target, "reconstruction target");
  QuantizerState st = init_state(cfg, rng, target);
  if (!keys_from_data) return st;

  const Index n = target.rows(), s = cfg.sub_dim(), k = cfg.num_codes;
  Matrix& keys = st.keys.data();
  if (cfg.subspace_sharing) {
    std::vector<Index> cells(static_cast<std::size_t>(n * cfg.num_groups));
    std::iota(cells.begin(), cells.end(), Index{0});
    rng.shuffle(cells);
    for (Index c = 0; c < k; ++c) {
      const Index cell = cells[static_cast<std::size_t>(c % static_cast<Index>(cells.size()))];
      keys.row(c) = target.row(cell / cfg.num_groups).segment((cell % cfg.num_groups) * s, s);
    }
  } else {
    for (Index j = 0; j < cfg.num_groups; ++j) {
      std::vector<Index> rows(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), Index{0});
      rng.shuffle(rows);
      for (Index c = 0; c < k; ++c)
        keys.row(c).segment(j * s, s) = target.row(rows[static_cast<std::size_t>(c % n)]).segment(j * s, s);
    }
  }
  if (!st.tied()) st.untied_values->data() = keys;
  if (st.ema) st.ema->sums = keys;
  return st;
}

ReconstructionResult train_reconstruction(const EmbeddingTable& target, const DpqConfig& cfg, const TrainOptions& opt,
                                          std::optional<QuantizerState> initial) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  if (target.rows() != cfg.vocab_size || target.cols() != cfg.dim)
    throw InvalidArgument("reconstruction target shape does not match the config");
  if (opt.batch < 1 || opt.epochs < 0) throw InvalidArgument("batch must be >= 1 and epochs >= 0");
  require_finite(target, "reconstruction target");

  Rng rng(opt.seed);
  QuantizerState st = initial ? std::move(*initial) : reconstruction_init(target, cfg, opt.init_keys_from_data, rng);
  if (st.queries.rows() != target.rows() || st.queries.cols() != target.cols())
    throw InvalidArgument("initial state does not match the target shape");
  DpqEmbedding layer(std::move(st), cfg, opt.sgd, opt.shards);
  Rng order_rng(opt.seed ^ kOrderSalt);

  ReconstructionResult res;
  res.report.task = "recon";
  res.report.compression = compression_stats(cfg);

  const Index n = target.rows();
  Codebook prev = discretize_all(*layer.quantizer(), cfg);
  {
    EpochRecord r0;
    r0.metric = reconstruction_mse(build_table(prev, layer.quantizer()->values()), target);
    r0.loss = r0.metric;
    res.report.epochs.push_back(r0);
    if (opt.on_epoch) opt.on_epoch(r0, layer);
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Index nbatches = (n + opt.batch - 1) / opt.batch;
  for (Index epoch = 1; epoch <= opt.epochs; ++epoch) {
    order_rng.shuffle(order);
    double sq = 0.0, reg = 0.0;
    for (const auto batch : split_even(order, nbatches)) {
      const Matrix h = guarded_lookup(layer, batch, epoch);
      Matrix diff(h.rows(), h.cols());
      for (Index i = 0; i < h.rows(); ++i) diff.row(i) = h.row(i) - target.row(batch[static_cast<std::size_t>(i)]);
      const double l = diff.squaredNorm();
      if (!std::isfinite(l)) throw TrainingDiverged(epoch, "reconstruction loss is not finite");
      sq += l;
      reg += layer.backward((2.0 / static_cast<double>(h.rows())) * diff);
      require_finite_state(*layer.quantizer(), epoch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sq / static_cast<double>(target.size());
    rec.reg_loss = reg;
    Codebook codes = discretize_all(*layer.quantizer(), cfg);
    rec.metric = reconstruction_mse(build_table(codes, layer.quantizer()->values()), target);
    if (!std::isfinite(rec.metric)) throw TrainingDiverged(epoch, "reconstruction error is not finite");
    rec.code_change = static_cast<double>((codes.codes.array() != prev.codes.array()).count()) /
                      static_cast<double>(codes.codes.size());
    prev = std::move(codes);
    res.report.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec, layer);
  }
  res.state = layer.state();
  res.codes = std::move(prev);
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- classifier ------------------------------------------------------------------

ClassifierModel::ClassifierModel(std::unique_ptr<EmbeddingLayer> embedding, Index hidden, int classes, Rng& rng,
                                 SgdOptions opt)
    : embedding_(std::move(embedding)), opt_(opt) {
  if (hidden < 1 || classes < 2) throw InvalidArgument("classifier needs hidden >= 1 and >= 2 classes");
  const Index d = embedding_->dim();
  const double a1 = std::sqrt(6.0 / static_cast<double>(d + hidden));
  const double a2 = std::sqrt(6.0 / static_cast<double>(hidden + classes));
  w1_ = rng.uniform_matrix(hidden, d, -a1, a1);
  b1_ = Matrix::Zero(1, hidden);
  w2_ = rng.uniform_matrix(classes, hidden, -a2, a2);
  b2_ = Matrix::Zero(1, classes);
}

std::vector<std::tuple<std::string, Index, Index>> ClassifierModel::downstream_shapes() const {
  return {{"hidden.weight", w1_.rows(), w1_.cols()},
          {"hidden.bias", b1_.rows(), b1_.cols()},
          {"output.weight", w2_.rows(), w2_.cols()},
          {"output.bias", b2_.rows(), b2_.cols()}};
}

Matrix ClassifierModel::pool(const TextDataset& data, std::span<const Index> docs, const Matrix& rows,
                             const std::vector<Index>& position) const {
  Matrix x = Matrix::Zero(static_cast<Index>(docs.size()), rows.cols());
  for (std::size_t b = 0; b < docs.size(); ++b) {
    const auto& doc = data.documents[static_cast<std::size_t>(docs[b])];
    if (doc.empty()) continue;
    for (Index t : doc) x.row(static_cast<Index>(b)) += rows.row(position.empty() ? t : position[static_cast<std::size_t>(t)]);
    x.row(static_cast<Index>(b)) /= static_cast<double>(doc.size());
  }
  return x;
}

std::pair<double, double> ClassifierModel::train_step(const TextDataset& data, std::span<const Index> docs) {
  std::vector<Index> unique;
  for (Index b : docs) {
    const auto& doc = data.documents[static_cast<std::size_t>(b)];
    unique.insert(unique.end(), doc.begin(), doc.end());
  }
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<Index> position(static_cast<std::size_t>(embedding_->vocab_size()), -1);
  for (std::size_t i = 0; i < unique.size(); ++i) position[static_cast<std::size_t>(unique[i])] = static_cast<Index>(i);

  const Matrix e = embedding_->lookup(unique);
  const Matrix x = pool(data, docs, e, position);
  const Matrix z1 = (x * w1_.transpose()).rowwise() + b1_.row(0);
  const Matrix a = z1.cwiseMax(0.0);
  const Matrix logits = (a * w2_.transpose()).rowwise() + b2_.row(0);
  if (!all_finite(logits)) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  const Matrix p = softmax_rows(logits, 1.0);

  const Index bsz = static_cast<Index>(docs.size());
  double ce = 0.0;
  Matrix dl = p;
  for (Index b = 0; b < bsz; ++b) {
    const int y = data.labels[static_cast<std::size_t>(docs[static_cast<std::size_t>(b)])];
    const double mx = logits.row(b).maxCoeff();
    ce += mx + std::log((logits.row(b).array() - mx).exp().sum()) - logits(b, y);
    dl(b, y) -= 1.0;
  }
  ce /= static_cast<double>(bsz);
  dl /= static_cast<double>(bsz);

  const Matrix gw2 = dl.transpose() * a;
  const Matrix gb2 = dl.colwise().sum();
  const Matrix dz = (dl * w2_).cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
  const Matrix gw1 = dz.transpose() * x;
  const Matrix gb1 = dz.colwise().sum();
  const Matrix dx = dz * w1_;

  Matrix de = Matrix::Zero(e.rows(), e.cols());
  for (Index b = 0; b < bsz; ++b) {
    const auto& doc = data.documents[static_cast<std::size_t>(docs[static_cast<std::size_t>(b)])];
    if (doc.empty()) continue;
    const double inv = 1.0 / static_cast<double>(doc.size());
    for (Index t : doc) de.row(position[static_cast<std::size_t>(t)]) += inv * dx.row(b);
  }
  const double reg = embedding_->backward(de);
  sgd_dense(w1_, vw1_, gw1, opt_.lr, opt_.momentum);
  sgd_dense(b1_, vb1_, gb1, opt_.lr, opt_.momentum);
  sgd_dense(w2_, vw2_, gw2, opt_.lr, opt_.momentum);
  sgd_dense(b2_, vb2_, gb2, opt_.lr, opt_.momentum);
  return {ce, reg};
}

std::vector<int> ClassifierModel::predict(const TextDataset& data, const Matrix& table) const {
  std::vector<Index> all(static_cast<std::size_t>(data.size()));
  std::iota(all.begin(), all.end(), Index{0});
  const Matrix x = pool(data, all, table, {});
  const Matrix z1 = (x * w1_.transpose()).rowwise() + b1_.row(0);
  const Matrix logits = (z1.cwiseMax(0.0) * w2_.transpose()).rowwise() + b2_.row(0);
  std::vector<int> out(all.size());
  for (Index b = 0; b < logits.rows(); ++b) out[static_cast<std::size_t>(b)] = static_cast<int>(argmax_first(logits.row(b)));
  return out;
}

double ClassifierModel::accuracy(const TextDataset& data, const Matrix& table) const {
  if (data.size() == 0) return 0.0;
  const auto pred = predict(data, table);
  Index hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::unique_ptr<EmbeddingLayer> make_embedding(EmbeddingKind kind, const DpqConfig& cfg, const TrainOptions& opt,
                                               Rng& rng) {
  DpqConfig c = cfg;
  if (kind == EmbeddingKind::full) {
    // Same initial rows as the DPQ queries at this seed.
    c.mode = Mode::sx;
    c.ema_decay.reset();
    c.validate();
    return std::make_unique<FullEmbedding>(init_state(c, rng).queries, opt.sgd);
  }
  c.mode = kind == EmbeddingKind::sx ? Mode::sx : Mode::vq;
  c.validate();
  return std::make_unique<DpqEmbedding>(init_state(c, rng), c, opt.sgd, opt.shards);
}

ClassifierResult train_classifier(const DatasetSplit& data, EmbeddingKind kind, const DpqConfig& cfg,
                                  const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  data.train.validate();
  if (data.heldout.size() == 0) throw InvalidDataset("held-out split is empty");
  if (cfg.vocab_size != data.train.vocab.size())
    throw InvalidArgument("config vocab size " + std::to_string(cfg.vocab_size) + " does not match the dataset (" +
                          std::to_string(data.train.vocab.size()) + ")");
  if (opt.batch < 1 || opt.epochs < 0) throw InvalidArgument("batch must be >= 1 and epochs >= 0");

  Rng rng(opt.seed);
  auto embedding = make_embedding(kind, cfg, opt, rng);
  ClassifierResult res;
  res.model = std::make_unique<ClassifierModel>(std::move(embedding), opt.hidden, data.train.num_classes(), rng, opt.sgd);
  res.report.task = "classify";
  if (kind != EmbeddingKind::full) res.report.compression = compression_stats(*res.model->embedding().config());

  const auto codes_of = [&]() -> std::optional<Codebook> {
    const auto& emb = res.model->embedding();
    if (!emb.quantizer()) return std::nullopt;
    return discretize_all(*emb.quantizer(), *emb.config());
  };
  std::optional<Codebook> prev = codes_of();

  Rng order_rng(opt.seed ^ kOrderSalt);
  std::vector<Index> order(static_cast<std::size_t>(data.train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index nbatches = (data.train.size() + opt.batch - 1) / opt.batch;
  for (Index epoch = 1; epoch <= opt.epochs; ++epoch) {
    order_rng.shuffle(order);
    double ce = 0.0, reg = 0.0;
    for (const auto batch : split_even(order, nbatches)) {
      std::pair<double, double> lr;
      try {
        lr = res.model->train_step(data.train, batch);
      } catch (const InvalidArgument& e) {
        throw TrainingDiverged(epoch, e.what());
      }
      const auto [l, r] = lr;
      if (!std::isfinite(l) || !std::isfinite(r)) throw TrainingDiverged(epoch, "classifier loss is not finite");
      if (const QuantizerState* q = res.model->embedding().quantizer()) require_finite_state(*q, epoch);
      ce += l * static_cast<double>(batch.size());
      reg += r;
    }
    const Matrix table = res.model->embedding().table();
    if (!all_finite(table)) throw TrainingDiverged(epoch, "embedding table became non-finite");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = ce / static_cast<double>(data.train.size());
    rec.reg_loss = reg;
    rec.metric = res.model->accuracy(data.train, table);
    rec.heldout_accuracy = res.model->accuracy(data.heldout, table);
    if (auto codes = codes_of()) {
      rec.code_change = static_cast<double>((codes->codes.array() != prev->codes.array()).count()) /
                        static_cast<double>(codes->codes.size());
      prev = std::move(codes);
    }
    res.report.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec, res.model->embedding());
  }
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- oracles ---------------------------------------------------------------------

KMeansResult kmeans_oracle(const EmbeddingTable& target, Index num_codes, Index num_groups, Index iters,
                           std::uint64_t seed) {
  const Index n = target.rows(), d = target.cols();
  if (num_groups < 1 || d % num_groups != 0) throw InvalidArgument("kmeans_oracle: D must divide d");
  if (num_codes < 1 || num_codes > n) throw InvalidArgument("kmeans_oracle: need 1 <= K <= n");
  if (iters < 0) throw InvalidArgument("kmeans_oracle: iters must be >= 0");
  require_finite(target, "kmeans target");
  const Index s = d / num_groups, k = num_codes;
  Rng rng(seed);

  KMeansResult res;
  Matrix cent(k, d);
  res.codes = Codebook{CodeMatrix::Zero(n, num_groups), k};
  std::vector<Matrix> blocks;
  for (Index j = 0; j < num_groups; ++j) {
    blocks.push_back(target.middleCols(j * s, s));
    const Matrix& x = blocks.back();
    std::vector<Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), Index{0});
    rng.shuffle(rows);
    // prefer distinct points; fall back to repeats when there are fewer than K
    std::vector<Index> chosen;
    for (Index r : rows) {
      if (static_cast<Index>(chosen.size()) == k) break;
      bool dup = false;
      for (Index c : chosen) dup = dup || x.row(c) == x.row(r);
      if (!dup) chosen.push_back(r);
    }
    for (std::size_t i = 0; static_cast<Index>(chosen.size()) < k; ++i) chosen.push_back(rows[i]);
    for (Index c = 0; c < k; ++c) cent.row(c).segment(j * s, s) = x.row(chosen[static_cast<std::size_t>(c)]);
  }

  Eigen::VectorXd dist(n);
  const auto assign = [&]() {
    double sse = 0.0;
    for (Index j = 0; j < num_groups; ++j) {
      const Matrix& x = blocks[static_cast<std::size_t>(j)];
      for (Index i = 0; i < n; ++i) {
        Index best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (Index c = 0; c < k; ++c) {
          const double dd = (x.row(i) - cent.row(c).segment(j * s, s)).squaredNorm();
          if (dd < bd) bd = dd, best = c;
        }
        res.codes.codes(i, j) = static_cast<std::int32_t>(best);
        sse += bd;
      }
    }
    return sse / static_cast<double>(n * d);
  };
  const auto update = [&]() {
    for (Index j = 0; j < num_groups; ++j) {
      const Matrix& x = blocks[static_cast<std::size_t>(j)];
      Matrix sums = Matrix::Zero(k, s);
      std::vector<Index> count(static_cast<std::size_t>(k), 0);
      for (Index i = 0; i < n; ++i) {
        const Index c = res.codes.codes(i, j);
        sums.row(c) += x.row(i);
        ++count[static_cast<std::size_t>(c)];
        dist(i) = (x.row(i) - cent.row(c).segment(j * s, s)).squaredNorm();
      }
      for (Index c = 0; c < k; ++c) {
        if (count[static_cast<std::size_t>(c)] > 0) {
          cent.row(c).segment(j * s, s) = sums.row(c) / static_cast<double>(count[static_cast<std::size_t>(c)]);
          continue;
        }
        // empty: move to the farthest point not yet used for a re-seed
        Index far = 0;
        for (Index i = 1; i < n; ++i)
          if (dist(i) > dist(far)) far = i;
        cent.row(c).segment(j * s, s) = x.row(far);
        dist(far) = -1.0;
      }
    }
  };

  res.history.push_back(assign());
  for (Index it = 0; it < iters; ++it) {
    update();
    res.history.push_back(assign());
  }
  res.mse = res.history.back();
  res.centroids = ProductTable(cent, num_groups, false);
  return res;
}

double grad_rel_err(const Matrix& analytic, const Matrix& numeric) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols())
    throw InvalidArgument("grad_rel_err: shape mismatch");
  double worst = 0.0;
  for (Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], b = numeric.data()[i];
    worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}));
  }
  return worst;
}

GradCheckResult grad_check(const DpqConfig& cfg, std::uint64_t seed, const GradCheckSizes& sizes,
                           const GradCheckOptions& opt) {
  if (sizes.vocab_size * sizes.dim + 3 * sizes.num_codes * sizes.dim > 10000)
    throw InvalidArgument("grad_check: sizes too large for the finite-difference oracle");
  DpqConfig base = cfg;
  base.vocab_size = sizes.vocab_size;
  base.dim = sizes.dim;
  base.num_codes = sizes.num_codes;
  base.num_groups = sizes.num_groups;
  base.ema_decay.reset();

  GradCheckResult res;
  std::vector<Index> rows(static_cast<std::size_t>(base.vocab_size));
  std::iota(rows.begin(), rows.end(), Index{0});

  {
    DpqConfig c = base;
    c.mode = Mode::sx;
    c.validate();
    Rng rng(seed);
    QuantizerState st = init_state(c, rng);
    st.queries = rng.normal_matrix(c.vocab_size, c.dim);
    if (st.norm && st.norm->affine) {
      st.norm->gamma.array() += 0.1 * rng.normal_matrix(c.num_groups, c.num_codes).array();
      st.norm->beta = 0.1 * rng.normal_matrix(c.num_groups, c.num_codes);
    }
    const Matrix up = rng.normal_matrix(c.vocab_size, c.dim);
    GradientBundle g = sx_backward(sx_forward(st, c, rows, true), up, st, c);
    if (opt.flip_value_sign) g.values = -g.values;
    const auto f = [&](const QuantizerState& s) { return up.cwiseProduct(sx_soft_output(s, c, rows, true)).sum(); };
    const auto check = [&](const Matrix& analytic, const Matrix& at, auto set) {
      const Matrix num = central_diff_grad(
          [&](const Matrix& m) {
            QuantizerState s = st;
            set(s, m);
            return f(s);
          },
          at, opt.h);
      res.max_rel_err_sx = std::max(res.max_rel_err_sx, grad_rel_err(analytic, num));
    };
    check(g.queries, st.queries, [](QuantizerState& s, const Matrix& m) { s.queries = m; });
    check(g.keys, st.keys.data(), [](QuantizerState& s, const Matrix& m) { s.keys.data() = m; });
    check(g.values, st.values().data(), [](QuantizerState& s, const Matrix& m) { s.untied_values->data() = m; });
    if (g.bn_gamma.size() != 0) {
      check(g.bn_gamma, st.norm->gamma, [](QuantizerState& s, const Matrix& m) { s.norm->gamma = m; });
      check(g.bn_beta, st.norm->beta, [](QuantizerState& s, const Matrix& m) { s.norm->beta = m; });
    }
  }

  DpqConfig v = base;
  v.mode = Mode::vq;
  v.distance = Distance::euclidean;
  {
    DpqConfig c = v;
    c.reg_coefficient = 0.0;
    c.validate();
    Rng rng(seed ^ 0x1);
    QuantizerState st = init_state(c, rng);
    st.queries = rng.normal_matrix(c.vocab_size, c.dim);
    const Matrix up = rng.normal_matrix(c.vocab_size, c.dim);
    const GradientBundle g = vq_backward(vq_forward(st, c, rows, true), up, st, c);
    res.vq_identity_ok = g.queries.rows() == up.rows() && g.queries.cols() == up.cols() &&
                         std::equal(up.data(), up.data() + up.size(), g.queries.data(),
                                    [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); });
  }
  {
    DpqConfig c = v;
    if (c.reg_coefficient == 0.0) c.reg_coefficient = 1.0;
    c.validate();
    Rng rng(seed ^ 0x2);
    QuantizerState st = init_state(c, rng);
    st.queries = rng.normal_matrix(c.vocab_size, c.dim);
    const Matrix zero = Matrix::Zero(c.vocab_size, c.dim);
    const ForwardTrace trace = vq_forward(st, c, rows, true);
    GradientBundle g = vq_backward(trace, zero, st, c);
    Matrix analytic = g.keys + g.values;
    if (opt.flip_value_sign) analytic = -analytic;
    const Matrix num = central_diff_grad(
        [&](const Matrix& m) {
          QuantizerState s = st;
          s.keys.data() = m;
          return vq_backward(trace, zero, s, c).reg_loss;
        },
        st.keys.data(), opt.h);
    res.reg_grad_rel_err = grad_rel_err(analytic, num);

    // centroids at their member means (assignments held fixed) zero the gradient
    QuantizerState at_mean = st;
    const Index s = c.sub_dim();
    Matrix sums = Matrix::Zero(st.keys.data().rows(), st.keys.data().cols());
    Matrix counts = Matrix::Zero(st.keys.num_blocks(), c.num_codes);
    for (Index j = 0; j < c.num_groups; ++j) {
      const Index block = st.keys.shared() ? 0 : j;
      for (Index r = 0; r < c.vocab_size; ++r) {
        const Index code = trace.codes(r, j);
        counts(block, code) += 1.0;
        sums.row(code).segment(st.keys.block_col(j), s) += trace.queries.row(r).segment(j * s, s);
      }
    }
    for (Index block = 0; block < st.keys.num_blocks(); ++block)
      for (Index code = 0; code < c.num_codes; ++code)
        if (counts(block, code) > 0)
          at_mean.keys.data().row(code).segment(block * s, s) = sums.row(code).segment(block * s, s) / counts(block, code);
    const GradientBundle gm = vq_backward(trace, zero, at_mean, c);
    res.reg_minimizer_grad = (gm.keys + gm.values).cwiseAbs().maxCoeff();
  }
  return res;
}

}  // namespace dpq
