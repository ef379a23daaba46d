#include "icafs/vfl/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

#include "icafs/nn/loss.hpp"
#include "icafs/vfl/parallel.hpp"

namespace icafs::vfl {

namespace {

std::string head_name(int n, const char* part) { return "h" + std::to_string(n) + "." + part; }
std::string gate_name(int n) { return "g" + std::to_string(n) + ".w"; }
std::string selector_prefix(int n) { return "s" + std::to_string(n) + "."; }

Matrix rows_of(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<Eigen::Index>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

/// Parameters of selector n with the "s<n>." prefix removed.
nn::ParamNodes sub_nodes(const nn::ParamNodes& all, const std::string& prefix) {
  nn::ParamNodes out;
  for (const auto& [name, v] : all) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), v);
  }
  return out;
}

nn::ParamNodes constants(nn::Tape& tape, const nn::ParamSet& params) {
  nn::ParamNodes out;
  for (const auto& [name, t] : params) out.emplace(name, tape.constant(t.value()));
  return out;
}

nn::OptimizerConfig optimizer_config(const TrainConfig& c) {
  nn::OptimizerConfig o;
  o.kind = c.optimizer;
  o.adam.lr = c.lr;
  return o;
}

std::vector<std::vector<Eigen::Index>> shuffled_batches(Eigen::Index n, int batch, nn::Rng rng) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Eigen::Index>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

int argmax_row(const Matrix& m, Eigen::Index i) {
  Eigen::Index best;
  m.row(i).maxCoeff(&best);
  return static_cast<int>(best);
}

bool gate_variant(Variant v) { return v == Variant::icafs || v == Variant::fixed_temp; }

Matrix broadcast(const RowVector& r, Eigen::Index rows) { return r.replicate(rows, 1); }

/// Hard alpha for selector n, per sample.
Matrix hard_alpha(const ServerParty& s, const Matrix& z, int n) {
  switch (s.variant) {
    case Variant::icafs:
    case Variant::fixed_temp:
      return gates::hard_gate(z, s.selector.at(gate_name(n)).value().row(0));
    case Variant::embedding_mlp: {
      nn::ParamSet sub;
      const auto prefix = selector_prefix(n);
      for (const auto& [name, t] : s.selector) {
        if (name.rfind(prefix, 0) == 0) sub.add(name.substr(prefix.size()), t);
      }
      const Matrix logits = nn::mlp_forward(sub, s.selector_spec, z);
      return (logits.array() > 0.0).cast<double>().matrix();
    }
    case Variant::no_fs:
      return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

struct ClientWork {
  std::unique_ptr<nn::Tape> tape;
  nn::ParamNodes nodes;
  Var z;
  std::vector<Var> per_sample_z;  // DP only
  std::vector<std::unique_ptr<nn::Tape>> per_sample_tapes;
};

std::vector<std::int64_t> ids_of(const std::vector<Eigen::Index>& idx, const std::vector<std::int64_t>* ids) {
  std::vector<std::int64_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(ids ? (*ids)[static_cast<std::size_t>(i)] : static_cast<std::int64_t>(i));
  return out;
}

void post_batch(Federation& f, Bus& bus, int stage, const std::vector<std::int64_t>& ids) {
  for (int k = 0; k < static_cast<int>(f.clients.size()); ++k) {
    Message m;
    m.round = f.round;
    m.stage = stage;
    m.sender = kServer;
    m.receiver = k;
    m.kind = MessageKind::batch_indices;
    m.tag = PayloadTag::sample_ids;
    m.ids = ids;
    bus.post(std::move(m));
  }
  bus.barrier();
}

std::vector<Matrix> uploads_by_sender(const std::vector<Message>& delivered, int clients, MessageKind kind) {
  std::vector<Matrix> out(static_cast<std::size_t>(clients));
  std::vector<bool> seen(static_cast<std::size_t>(clients), false);
  for (const auto& m : delivered) {
    if (m.kind != kind || m.receiver != kServer) continue;
    if (m.sender < 0 || m.sender >= clients) throw ProtocolError("upload from unknown party");
    out[static_cast<std::size_t>(m.sender)] = m.payload;
    seen[static_cast<std::size_t>(m.sender)] = true;
  }
  for (int k = 0; k < clients; ++k) {
    if (!seen[static_cast<std::size_t>(k)]) throw ProtocolError("missing upload from " + party_name(k));
  }
  return out;
}

std::map<int, Matrix> feedback_by_receiver(const std::vector<Message>& delivered, MessageKind kind) {
  std::map<int, Matrix> out;
  for (const auto& m : delivered) {
    if (m.kind == kind) out[m.receiver] = m.payload;
  }
  return out;
}

}  // namespace

// ---- enums -------------------------------------------------------------------

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "mlp") return EncoderKind::mlp;
  if (s == "featurewise") return EncoderKind::featurewise;
  if (s == "identity") return EncoderKind::identity;
  if (s == "softplus") return EncoderKind::softplus;
  throw ConfigError("unknown encoder: " + s);
}

std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::mlp: return "mlp";
    case EncoderKind::featurewise: return "featurewise";
    case EncoderKind::identity: return "identity";
    case EncoderKind::softplus: return "softplus";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "icafs") return Variant::icafs;
  if (s == "fixed-temp") return Variant::fixed_temp;
  if (s == "embedding-mlp") return Variant::embedding_mlp;
  if (s == "no-fs") return Variant::no_fs;
  throw ConfigError("unknown variant: " + s);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::icafs: return "icafs";
    case Variant::fixed_temp: return "fixed-temp";
    case Variant::embedding_mlp: return "embedding-mlp";
    case Variant::no_fs: return "no-fs";
  }
  return "?";
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "per_sample") return MaskMode::per_sample;
  if (s == "aggregated") return MaskMode::aggregated;
  throw ConfigError("unknown mask mode: " + s);
}

std::string to_string(MaskMode m) { return m == MaskMode::per_sample ? "per_sample" : "aggregated"; }

nlohmann::ordered_json TrainConfig::fingerprint() const {
  nlohmann::ordered_json j;
  j["epochs"] = epochs;
  j["batch"] = batch;
  j["selectors"] = selectors;
  j["beta"] = beta;
  j["gamma"] = gamma;
  j["lr"] = lr;
  j["optimizer"] = optimizer == nn::OptimizerKind::adam ? "adam" : "sgd";
  j["variant"] = to_string(variant);
  j["encoder"] = to_string(encoder.kind);
  j["encoder_hidden"] = encoder.hidden;
  j["encoder_output"] = encoder.output;
  j["strict"] = strict;
  j["mask_mode"] = to_string(mask_mode);
  j["dp"] = dp.enabled;
  if (dp.enabled) {
    j["dp_clip"] = dp.clip;
    j["dp_noise_multiplier"] = dp.noise_multiplier;
  }
  j["seed"] = seed;
  return j;
}

// ---- parties -------------------------------------------------------------------

Var ClientParty::forward(const nn::ParamNodes& params, Var x) const {
  if (x.cols() != input_width) {
    throw ShapeError(party_name(id) + ": block width " + std::to_string(x.cols()) + " != " + std::to_string(input_width));
  }
  switch (kind) {
    case EncoderKind::mlp: return nn::mlp_forward(spec, params, x);
    case EncoderKind::featurewise:
      return nn::softplus(nn::add_row(nn::mul_row(x, params.at("a")), params.at("b")));
    case EncoderKind::identity: return x;
    case EncoderKind::softplus: return nn::softplus(x);
  }
  return x;
}

Matrix ClientParty::forward(const Matrix& x) const {
  nn::Tape tape;
  return forward(constants(tape, encoder), tape.constant(x)).value();
}

ClientParty make_client(int id, int input_width, const EncoderConfig& config, const nn::OptimizerConfig& optimizer,
                        nn::Rng& rng) {
  if (input_width < 1) throw ShapeError("client block must have at least one column");
  ClientParty c;
  c.id = id;
  c.kind = config.kind;
  c.input_width = input_width;
  c.optimizer = nn::Optimizer(optimizer);
  switch (config.kind) {
    case EncoderKind::mlp:
      if (config.hidden < 1 || config.output < 1) throw ConfigError("encoder widths must be positive");
      c.spec = nn::MlpSpec::dense(input_width, {config.hidden, config.hidden, config.output}, nn::Activation::relu,
                                  nn::Activation::relu);
      c.encoder = nn::init_params(c.spec, rng);
      c.output_width = config.output;
      break;
    case EncoderKind::featurewise:
      c.encoder.add("a", nn::Tensor::vector(RowVector::Ones(input_width)));
      c.encoder.add("b", nn::Tensor::vector(RowVector::Zero(input_width)));
      c.output_width = input_width;
      break;
    case EncoderKind::identity:
    case EncoderKind::softplus:
      c.output_width = input_width;
      break;
  }
  return c;
}

std::vector<gates::GateParams> ServerParty::gate_params() const {
  if (!gate_variant(variant)) throw ConfigError("variant " + to_string(variant) + " has no gate vectors");
  std::vector<gates::GateParams> out;
  for (int n = 0; n < selectors; ++n) {
    out.emplace_back(selector.at(gate_name(n)).value().row(0), w0[static_cast<std::size_t>(n)], n);
  }
  return out;
}

ServerParty make_server(int n_classes, const std::vector<gates::Slice>& slices, const TrainConfig& config, nn::Rng& rng) {
  if (config.selectors < 1) throw ConfigError("at least one selector required");
  if (config.beta < 0) throw ConfigError("beta must be >= 0");
  if (n_classes < 2) throw DataError("server needs at least two classes");
  ServerParty s;
  s.n_classes = n_classes;
  s.slices = slices;
  for (const auto& sl : slices) s.width += sl.width;
  s.selectors = config.selectors;
  s.variant = config.variant;
  s.clamp = config.clamp;
  s.head_optimizer = nn::Optimizer(optimizer_config(config));
  s.selector_optimizer = nn::Optimizer(optimizer_config(config));
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.width));
  for (int n = 0; n < s.selectors; ++n) {
    s.heads.add(head_name(n, "weight"), nn::Tensor(nn::uniform(s.width, n_classes, rng, -bound, bound)));
    s.heads.add(head_name(n, "bias"), nn::Tensor::vector(RowVector::Zero(n_classes)));
  }
  if (gate_variant(config.variant)) {
    for (int n = 0; n < s.selectors; ++n) {
      auto g = gates::GateParams::init(s.width, rng, n, config.gate_init_std);
      s.selector.add(gate_name(n), nn::Tensor::vector(g.w));
      s.w0.push_back(g.w0());
    }
  } else if (config.variant == Variant::embedding_mlp) {
    s.selector_spec = nn::MlpSpec::dense(s.width, {config.selector_hidden, s.width}, nn::Activation::relu,
                                         nn::Activation::identity);
    for (int n = 0; n < s.selectors; ++n) {
      for (const auto& [name, t] : nn::init_params(s.selector_spec, rng)) s.selector.add(selector_prefix(n) + name, t);
    }
  }
  return s;
}

Slices slice_map(const std::vector<int>& widths) {
  Slices m;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    m.slices.push_back({static_cast<int>(k), m.width, widths[k]});
    m.width += widths[k];
  }
  return m;
}

Matrix concat_embeddings(const std::vector<Matrix>& z, Slices* map) {
  if (z.empty()) throw ShapeError("concat_embeddings: no clients");
  std::vector<int> widths;
  for (const auto& b : z) {
    if (b.rows() != z.front().rows()) throw ShapeError("concat_embeddings: batch size mismatch");
    widths.push_back(static_cast<int>(b.cols()));
  }
  Slices m = slice_map(widths);
  Matrix out(z.front().rows(), m.width);
  for (std::size_t k = 0; k < z.size(); ++k) out.middleCols(m.slices[k].begin, m.slices[k].width) = z[k];
  if (map) *map = m;
  return out;
}

std::vector<Matrix> scatter_embeddings(const Matrix& z, const Slices& map) {
  if (z.cols() != map.width) throw ShapeError("scatter_embeddings: width does not match slice map");
  std::vector<Matrix> out;
  for (const auto& s : map.slices) out.push_back(z.middleCols(s.begin, s.width));
  return out;
}

// ---- ensemble ---------------------------------------------------------------------

EnsembleTrace ensemble_forward(const ServerParty& server, const nn::ParamNodes& heads, const nn::ParamNodes& selector,
                               Var z, GateMode mode, double tau, MaskMode masks) {
  if (z.cols() != server.width) throw ShapeError("ensemble: embedding width " + std::to_string(z.cols()) + " != p");
  nn::Tape& tape = *z.tape();
  EnsembleTrace tr;
  for (int n = 0; n < server.selectors; ++n) {
    Var alpha;
    if (mode == GateMode::hard) {
      if (masks == MaskMode::aggregated && server.variant != Variant::no_fs) {
        if (static_cast<int>(server.fixed_masks.size()) != server.selectors) {
          throw ConfigError("aggregated masks requested before they were computed");
        }
        alpha = tape.constant(broadcast(server.fixed_masks[static_cast<std::size_t>(n)], z.rows()));
      } else if (gate_variant(server.variant)) {
        alpha = tape.constant(gates::hard_gate(z.value(), selector.at(gate_name(n)).value().row(0)));
      } else if (server.variant == Variant::embedding_mlp) {
        Var logits = nn::mlp_forward(server.selector_spec, sub_nodes(selector, selector_prefix(n)), z);
        alpha = tape.constant((logits.value().array() > 0.0).cast<double>().matrix());
      } else {
        alpha = tape.constant(Matrix::Ones(z.rows(), z.cols()));
      }
    } else {
      switch (server.variant) {
        case Variant::icafs:
        case Variant::fixed_temp:
          alpha = gates::soft_gate(z, selector.at(gate_name(n)), server.w0[static_cast<std::size_t>(n)], tau, server.clamp);
          break;
        case Variant::embedding_mlp:
          alpha = nn::sigmoid(nn::mlp_forward(server.selector_spec, sub_nodes(selector, selector_prefix(n)), z));
          break;
        case Variant::no_fs:
          alpha = tape.constant(Matrix::Ones(z.rows(), z.cols()));
          break;
      }
    }
    Var s = gates::select(z, alpha);
    Var logits = nn::add_row(nn::matmul(s, heads.at(head_name(n, "weight"))), heads.at(head_name(n, "bias")));
    tr.logits = n == 0 ? logits : nn::add(tr.logits, logits);
    tr.alphas.push_back(alpha);
    tr.selected.push_back(s);
  }
  return tr;
}

Prediction ensemble_predict(const ServerParty& server, const Matrix& z, GateMode mode, double tau, MaskMode masks) {
  nn::Tape tape;
  auto tr = ensemble_forward(server, constants(tape, server.heads), constants(tape, server.selector), tape.constant(z),
                             mode, tau, masks);
  Prediction p;
  p.logits = tr.logits.value();
  p.probabilities.resize(p.logits.rows(), p.logits.cols());
  for (Eigen::Index i = 0; i < p.logits.rows(); ++i) {
    p.probabilities.row(i) = nn::softmax(p.logits.row(i));
    p.labels.push_back(argmax_row(p.logits, i));
  }
  return p;
}

// ---- federation ----------------------------------------------------------------------

Federation make_federation(const data::VerticalSplit& real, const TrainConfig& config, MessageLog* log) {
  if (config.epochs < 0 || config.batch < 1) throw ConfigError("epochs >= 0 and batch >= 1 required");
  if (config.dp.enabled && config.dp.clip <= 0) throw ConfigError("dp clip must be > 0");
  if (config.dp.enabled && config.dp.noise_multiplier < 0) throw ConfigError("dp noise multiplier must be >= 0");
  if (real.parties() < 1) throw DataError("federation needs at least one client");
  Federation f;
  f.config = config;
  f.log = log;
  std::vector<int> widths;
  for (int k = 0; k < real.parties(); ++k) {
    nn::Rng rng = nn::derive_rng(config.seed, {0x61, static_cast<std::uint64_t>(k)});
    f.clients.push_back(make_client(k, static_cast<int>(real.blocks[static_cast<std::size_t>(k)].width()), config.encoder,
                                    optimizer_config(config), rng));
    widths.push_back(f.clients.back().output_width);
  }
  nn::Rng srng = nn::derive_rng(config.seed, {0x62});
  f.server = make_server(real.n_classes, slice_map(widths).slices, config, srng);
  f.schedule.gamma = config.gamma;
  f.schedule.total = std::max(1, config.epochs);
  f.schedule.fixed = config.variant == Variant::fixed_temp;
  return f;
}

EpochStats stage2_epoch(Federation& f, const synthgen::SyntheticDataset& synth, int epoch) {
  const int K = static_cast<int>(f.clients.size());
  if (synth.rows() == 0 || synth.parties() != K) throw DataError("stage 2: missing synthetic data");
  for (int k = 0; k < K; ++k) {
    if (synth.blocks[static_cast<std::size_t>(k)].cols() != f.clients[static_cast<std::size_t>(k)].input_width) {
      throw DataError("stage 2: synthetic block width does not match " + party_name(k));
    }
  }
  if (epoch < 0 || epoch >= std::max(1, f.config.epochs)) throw ConfigError("stage 2: epoch outside [0, T)");
  Bus bus(K, f.log);
  EpochStats stats;
  stats.tau = f.schedule.at(epoch);
  stats.gate_checksum_before = f.server.selector.checksum();
  double weight = 0;
  for (const auto& batch : shuffled_batches(synth.rows(), f.config.batch, nn::derive_rng(f.config.seed, {0x63, static_cast<std::uint64_t>(epoch)}))) {
    const auto ids = ids_of(batch, nullptr);
    post_batch(f, bus, 2, ids);

    std::vector<ClientWork> work(static_cast<std::size_t>(K));
    for_each_party(K, f.config.workers, [&](int k) {
      auto& c = f.clients[static_cast<std::size_t>(k)];
      auto& w = work[static_cast<std::size_t>(k)];
      w.tape = std::make_unique<nn::Tape>();
      w.nodes = w.tape->bind(c.encoder);
      w.z = c.forward(w.nodes, w.tape->constant(rows_of(synth.blocks[static_cast<std::size_t>(k)], batch)));
      Message m;
      m.round = f.round;
      m.stage = 2;
      m.sender = k;
      m.receiver = kServer;
      m.kind = MessageKind::synth_embedding_up;
      m.tag = PayloadTag::embeddings;
      m.payload = w.z.value();
      m.ids = ids;
      bus.post(std::move(m));
    });
    const auto up = uploads_by_sender(bus.barrier(), K, MessageKind::synth_embedding_up);

    nn::Tape tape;
    auto heads = tape.bind(f.server.heads);
    auto sel = tape.bind(f.server.selector);
    std::vector<Var> zk;
    for (const auto& u : up) zk.push_back(tape.input(u));
    Var z = nn::concat_cols(zk);
    auto tr = ensemble_forward(f.server, heads, sel, z, GateMode::soft, stats.tau);
    Var ce = nn::cross_entropy(tr.logits, pick(synth.y, batch));
    Var loss = ce;
    double pen = 0;
    if (f.server.variant != Variant::no_fs && f.config.beta > 0) {
      Var p = gates::gate_penalty(tr.alphas, f.config.beta);
      pen = p.scalar();
      loss = nn::add(loss, p);
    }
    const double rows = static_cast<double>(batch.size());
    stats.prediction += ce.scalar() * rows;
    stats.penalty += pen * rows;
    stats.loss += loss.scalar() * rows;
    weight += rows;
    tape.backward(loss);
    f.server.head_optimizer.step(f.server.heads, tape.grads(heads));
    if (!f.server.selector.empty()) f.server.selector_optimizer.step(f.server.selector, tape.grads(sel));
    for (int k = 0; k < K; ++k) {
      if (f.clients[static_cast<std::size_t>(k)].encoder.empty()) continue;
      Message m;
      m.round = f.round;
      m.stage = 2;
      m.sender = kServer;
      m.receiver = k;
      m.kind = MessageKind::synth_feedback_down;
      m.tag = PayloadTag::embedding_gradient;
      m.payload = tape.grad(zk[static_cast<std::size_t>(k)]);
      m.ids = ids;
      bus.post(std::move(m));
    }
    const auto fb = feedback_by_receiver(bus.barrier(), MessageKind::synth_feedback_down);
    for_each_party(K, f.config.workers, [&](int k) {
      auto it = fb.find(k);
      if (it == fb.end()) return;
      auto& c = f.clients[static_cast<std::size_t>(k)];
      auto& w = work[static_cast<std::size_t>(k)];
      w.tape->backward(w.z, it->second);
      c.optimizer.step(c.encoder, w.tape->grads(w.nodes));
    });
    ++f.round;
  }
  stats.loss /= weight;
  stats.prediction /= weight;
  stats.penalty /= weight;
  stats.gate_checksum_after = f.server.selector.checksum();
  return stats;
}

EpochStats stage3_epoch(Federation& f, const data::VerticalSplit& real, int epoch) {
  const int K = static_cast<int>(f.clients.size());
  if (real.parties() != K || real.rows() == 0) throw DataError("stage 3: real split does not match the federation");
  Bus bus(K, f.log);
  EpochStats stats;
  const std::uint64_t before = f.server.selector.checksum();
  stats.gate_checksum_before = before;
  double weight = 0;
  const bool dp = f.config.dp.enabled;
  for (const auto& batch : shuffled_batches(real.rows(), f.config.batch, nn::derive_rng(f.config.seed, {0x64, static_cast<std::uint64_t>(epoch)}))) {
    const auto ids = ids_of(batch, &real.ids);
    const auto B = static_cast<Eigen::Index>(batch.size());
    post_batch(f, bus, 3, ids);

    std::vector<ClientWork> work(static_cast<std::size_t>(K));
    for_each_party(K, f.config.workers, [&](int k) {
      auto& c = f.clients[static_cast<std::size_t>(k)];
      auto& w = work[static_cast<std::size_t>(k)];
      const Matrix x = rows_of(real.blocks[static_cast<std::size_t>(k)].x, batch);
      w.tape = std::make_unique<nn::Tape>();
      w.nodes = w.tape->bind(c.encoder);
      w.z = c.forward(w.nodes, w.tape->constant(x));
      Message m;
      m.round = f.round;
      m.stage = 3;
      m.sender = k;
      m.receiver = kServer;
      m.kind = MessageKind::embedding_up;
      m.tag = PayloadTag::embeddings;
      m.payload = w.z.value();
      m.ids = ids;
      bus.post(std::move(m));
    });
    const auto up = uploads_by_sender(bus.barrier(), K, MessageKind::embedding_up);
    const std::vector<int> y = pick(real.y, batch);

    nn::Tape tape;
    auto heads = tape.bind(f.server.heads);
    auto sel = constants(tape, f.server.selector);
    std::vector<Var> zk;
    for (const auto& u : up) zk.push_back(tape.input(u));
    Var z = nn::concat_cols(zk);
    auto tr = ensemble_forward(f.server, heads, sel, z, GateMode::hard, 1.0);
    Var loss = nn::cross_entropy(tr.logits, y);
    stats.loss += loss.scalar() * static_cast<double>(B);
    weight += static_cast<double>(B);
    tape.backward(loss);

    if (dp) {
      std::vector<nn::ParamGrads> per_sample;
      const Matrix zfull = z.value();
      for (Eigen::Index i = 0; i < B; ++i) {
        nn::Tape t;
        auto h = t.bind(f.server.heads);
        auto tri = ensemble_forward(f.server, h, constants(t, f.server.selector), t.constant(zfull.row(i)),
                                    GateMode::hard, 1.0);
        Var li = nn::cross_entropy(tri.logits, {y[static_cast<std::size_t>(i)]});
        t.backward(li);
        per_sample.push_back(t.grads(h));
      }
      nn::Rng rng = nn::derive_rng(f.config.seed, {0x65, 0, static_cast<std::uint64_t>(f.round)});
      f.server.head_optimizer.step(
          f.server.heads, nn::privatize(per_sample, f.config.dp.clip, f.config.dp.noise_multiplier, rng));
    } else {
      f.server.head_optimizer.step(f.server.heads, tape.grads(heads));
    }

    if (!f.config.strict) {
      for (int k = 0; k < K; ++k) {
        if (f.clients[static_cast<std::size_t>(k)].encoder.empty()) continue;
        Message m;
        m.round = f.round;
        m.stage = 3;
        m.sender = kServer;
        m.receiver = k;
        m.kind = MessageKind::feedback_down;
        m.tag = PayloadTag::embedding_gradient;
        m.payload = tape.grad(zk[static_cast<std::size_t>(k)]);
        m.ids = ids;
        bus.post(std::move(m));
      }
      const auto fb = feedback_by_receiver(bus.barrier(), MessageKind::feedback_down);
      for_each_party(K, f.config.workers, [&](int k) {
        auto it = fb.find(k);
        if (it == fb.end()) return;
        auto& c = f.clients[static_cast<std::size_t>(k)];
        auto& w = work[static_cast<std::size_t>(k)];
        if (!dp) {
          w.tape->backward(w.z, it->second);
          c.optimizer.step(c.encoder, w.tape->grads(w.nodes));
          return;
        }
        // The loss is a batch mean, so sample i's own gradient is B times its row of dL/dz.
        const Matrix x = rows_of(real.blocks[static_cast<std::size_t>(k)].x, batch);
        std::vector<nn::ParamGrads> per_sample;
        for (Eigen::Index i = 0; i < B; ++i) {
          nn::Tape t;
          auto nodes = t.bind(c.encoder);
          Var zi = c.forward(nodes, t.constant(x.row(i)));
          t.backward(zi, it->second.row(i) * static_cast<double>(B));
          per_sample.push_back(t.grads(nodes));
        }
        nn::Rng rng = nn::derive_rng(f.config.seed, {0x65, static_cast<std::uint64_t>(k + 1), static_cast<std::uint64_t>(f.round)});
        c.optimizer.step(c.encoder, nn::privatize(per_sample, f.config.dp.clip, f.config.dp.noise_multiplier, rng));
      });
    }
    ++f.round;
  }
  stats.loss /= weight;
  stats.prediction = stats.loss;
  stats.gate_checksum_after = f.server.selector.checksum();
  if (stats.gate_checksum_after != before) {
    throw InvariantError("stage 3 changed selector parameters in epoch " + std::to_string(epoch));
  }
  return stats;
}

// ---- model ------------------------------------------------------------------------------

std::vector<nn::Section> TrainedModel::sections() const {
  std::vector<nn::Section> out;
  for (const auto& c : clients) out.emplace_back(party_name(c.id), c.encoder);
  nn::ParamSet s;
  for (const auto& [name, t] : server.heads) s.add("heads." + name, t);
  for (const auto& [name, t] : server.selector) s.add("selector." + name, t);
  for (std::size_t n = 0; n < server.w0.size(); ++n) s.add("state.w0." + std::to_string(n), nn::Tensor::vector(server.w0[n]));
  for (std::size_t n = 0; n < server.fixed_masks.size(); ++n) {
    s.add("state.mask." + std::to_string(n), nn::Tensor::vector(server.fixed_masks[n]));
  }
  out.emplace_back(party_name(kServer), s);
  return out;
}

void TrainedModel::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nn::write_checkpoint(path.string(), sections());
}

std::string TrainedModel::checkpoint_bytes() const { return nn::checkpoint_bytes(sections()); }

namespace {

void overwrite(nn::ParamSet& target, const nn::ParamSet& source, const std::string& who) {
  if (target.size() != source.size()) throw DataError("checkpoint: parameter count mismatch for " + who);
  for (auto& [name, t] : target) {
    if (!source.contains(name)) throw DataError("checkpoint: " + who + " lacks " + name);
    const auto& v = source.at(name);
    if (v.shape() != t.shape()) throw DataError("checkpoint: shape mismatch for " + who + "/" + name);
    t = v;
  }
}

}  // namespace

TrainedModel load_model(const std::filesystem::path& path, const data::VerticalSplit& schema, const TrainConfig& config) {
  if (!std::filesystem::exists(path)) throw DataError("missing checkpoint: " + path.string());
  auto sections = nn::read_checkpoint(path.string());
  Federation f = make_federation(schema, config);
  std::map<std::string, nn::ParamSet> by_name(sections.begin(), sections.end());
  TrainedModel m;
  for (auto& c : f.clients) {
    auto it = by_name.find(party_name(c.id));
    if (it == by_name.end()) throw DataError("checkpoint: missing section " + party_name(c.id));
    overwrite(c.encoder, it->second, party_name(c.id));
  }
  auto it = by_name.find(party_name(kServer));
  if (it == by_name.end()) throw DataError("checkpoint: missing server section");
  nn::ParamSet heads, selector;
  std::map<int, RowVector> w0, masks;
  for (const auto& [name, t] : it->second) {
    if (name.rfind("heads.", 0) == 0) heads.add(name.substr(6), t);
    else if (name.rfind("selector.", 0) == 0) selector.add(name.substr(9), t);
    else if (name.rfind("state.w0.", 0) == 0) w0[std::stoi(name.substr(9))] = t.value().row(0);
    else if (name.rfind("state.mask.", 0) == 0) masks[std::stoi(name.substr(11))] = t.value().row(0);
    else throw DataError("checkpoint: unexpected server entry " + name);
  }
  overwrite(f.server.heads, heads, "server heads");
  overwrite(f.server.selector, selector, "server selector");
  if (w0.size() != f.server.w0.size()) throw DataError("checkpoint: gate snapshot count mismatch");
  for (auto& [n, v] : w0) f.server.w0[static_cast<std::size_t>(n)] = v;
  f.server.fixed_masks.clear();
  for (auto& [n, v] : masks) f.server.fixed_masks.push_back(v);
  m.clients = std::move(f.clients);
  m.server = std::move(f.server);
  m.schedule = f.schedule;
  m.epochs_run = config.epochs;
  m.fingerprint = config.fingerprint();
  return m;
}

Matrix embed(const std::vector<ClientParty>& clients, const data::VerticalSplit& split) {
  if (static_cast<int>(clients.size()) != split.parties()) throw DataError("embed: split has a different number of blocks");
  std::vector<Matrix> z;
  for (std::size_t k = 0; k < clients.size(); ++k) z.push_back(clients[k].forward(split.blocks[k].x));
  return concat_embeddings(z);
}

gates::Selection model_selection(const TrainedModel& model, const data::VerticalSplit& split) {
  const Matrix z = embed(model.clients, split);
  if (z.rows() == 0) throw DataError("selection needs at least one sample");
  if (gate_variant(model.server.variant)) return gates::selected_set(model.server.gate_params(), z);
  gates::Selection s;
  std::set<int> all;
  for (int n = 0; n < model.server.selectors; ++n) {
    RowVector freq = hard_alpha(model.server, z, n).colwise().mean();
    std::vector<int> chosen;
    for (Eigen::Index j = 0; j < freq.size(); ++j) {
      if (freq(j) > 0.5) {
        chosen.push_back(static_cast<int>(j));
        all.insert(static_cast<int>(j));
      }
    }
    s.frequency.push_back(freq);
    s.chosen.push_back(chosen);
  }
  s.ensemble.assign(all.begin(), all.end());
  return s;
}

TrainResult train(const data::VerticalSplit& real, const synthgen::SyntheticDataset& synth, const TrainConfig& config,
                  MessageLog* log) {
  Federation f = make_federation(real, config, log);
  if (config.epochs > 0) synth.validate_against(real);
  TrainResult r;
  using clock = std::chrono::steady_clock;
  for (int t = 0; t < config.epochs; ++t) {
    auto t0 = clock::now();
    r.stage2.push_back(stage2_epoch(f, synth, t));
    auto t1 = clock::now();
    r.stage3.push_back(stage3_epoch(f, real, t));
    auto t2 = clock::now();
    r.stage2_seconds += std::chrono::duration<double>(t1 - t0).count();
    r.stage3_seconds += std::chrono::duration<double>(t2 - t1).count();
  }
  r.model.clients = std::move(f.clients);
  r.model.server = std::move(f.server);
  r.model.schedule = f.schedule;
  r.model.epochs_run = config.epochs;
  r.model.fingerprint = config.fingerprint();
  if (config.epochs > 0) r.model.fingerprint["synthetic"] = synth.fingerprint;
  // Fixed masks from the training rows, for aggregated inference.
  const auto sel = model_selection(r.model, real);
  for (const auto& freq : sel.frequency) r.model.server.fixed_masks.push_back((freq.array() > 0.5).cast<double>().matrix());
  return r;
}

Evaluation evaluate(const TrainedModel& model, const data::VerticalSplit& test, const std::vector<int>* relevant,
                    MaskMode masks) {
  if (test.parties() != static_cast<int>(model.clients.size())) throw DataError("evaluate: schema mismatch (block count)");
  for (std::size_t k = 0; k < model.clients.size(); ++k) {
    if (test.blocks[k].width() != model.clients[k].input_width) throw DataError("evaluate: schema mismatch (block width)");
  }
  if (test.n_classes != model.server.n_classes) throw DataError("evaluate: schema mismatch (classes)");
  if (test.rows() == 0) throw DataError("evaluate: empty test split");
  Evaluation e;
  const Matrix z = embed(model.clients, test);
  const Prediction p = ensemble_predict(model.server, z, GateMode::hard, 1.0, masks);
  e.predictions = p.labels;
  std::vector<double> hits(static_cast<std::size_t>(test.n_classes), 0.0), counts(hits.size(), 0.0);
  double correct = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const int y = test.y[i];
    counts[static_cast<std::size_t>(y)] += 1;
    if (p.labels[i] == y) {
      correct += 1;
      hits[static_cast<std::size_t>(y)] += 1;
    }
  }
  e.accuracy = correct / static_cast<double>(p.labels.size());
  for (std::size_t c = 0; c < hits.size(); ++c) e.per_class.push_back(counts[c] > 0 ? hits[c] / counts[c] : 0.0);
  e.selection = model_selection(model, test);
  const bool columnwise = std::all_of(model.clients.begin(), model.clients.end(),
                                      [](const ClientParty& c) { return c.kind != EncoderKind::mlp; });
  if (columnwise) {
    for (int idx : e.selection.ensemble) {
      for (const auto& s : model.server.slices) {
        if (idx >= s.begin && idx < s.begin + s.width) {
          e.selected_columns.push_back(test.blocks[static_cast<std::size_t>(s.client)].source_columns[static_cast<std::size_t>(idx - s.begin)]);
        }
      }
    }
    std::sort(e.selected_columns.begin(), e.selected_columns.end());
    if (relevant && !relevant->empty()) {
      std::set<int> chosen(e.selected_columns.begin(), e.selected_columns.end());
      double hit = 0;
      for (int r : *relevant) hit += chosen.count(r) ? 1.0 : 0.0;
      e.tpr = hit / static_cast<double>(relevant->size());
    }
  }
  return e;
}

// ---- audit --------------------------------------------------------------------------------

namespace {

bool non_constant(const Eigen::VectorXd& v) { return v.size() > 1 && v.maxCoeff() > v.minCoeff(); }

bool same_column(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double tol) {
  return a.size() == b.size() && (a - b).cwiseAbs().maxCoeff() <= tol;
}

}  // namespace

std::vector<Violation> audit_messages(const MessageLog& log, const AuditOptions& options) {
  std::vector<Violation> out;
  const auto& records = log.records();
  auto flag = [&](std::size_t i, const std::string& rule, const std::string& detail) {
    out.push_back({i, rule, detail});
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string route = party_name(r.sender) + "->" + party_name(r.receiver) + " " + to_string(r.kind);
    if (r.tag == PayloadTag::raw_features) flag(i, "raw-features", route);
    if ((r.tag == PayloadTag::parameter_gradient || r.tag == PayloadTag::parameters) && r.sender != r.receiver) {
      flag(i, "parameter-exchange", route);
    }
    if (r.tag == PayloadTag::labels && r.receiver != kServer) flag(i, "label-to-client", route);
    const bool feedback = r.kind == MessageKind::feedback_down || r.kind == MessageKind::synth_feedback_down;
    if (feedback && (r.tag != PayloadTag::embedding_gradient || r.sender != kServer || r.receiver == kServer)) {
      flag(i, "feedback-channel", route + " tagged " + to_string(r.tag));
    }
    if (options.strict && r.kind == MessageKind::feedback_down) flag(i, "strict-feedback", route);
  }

  // Content check: payload columns that reproduce real labels or real continuous features.
  if (!options.real || log.messages().size() != records.size()) return out;
  const auto& real = *options.real;
  std::map<std::int64_t, Eigen::Index> row_of;
  for (std::size_t i = 0; i < real.ids.size(); ++i) row_of[real.ids[i]] = static_cast<Eigen::Index>(i);
  const auto& messages = log.messages();
  for (std::size_t i = 0; i < messages.size(); ++i) {
    const auto& m = messages[i];
    if (m.stage == 2 || m.payload.size() == 0 || m.ids.empty()) continue;  // Stage-2 ids index synthetic rows
    if (m.payload.rows() != static_cast<Eigen::Index>(m.ids.size())) continue;
    std::vector<Eigen::Index> rows;
    bool aligned = true;
    for (auto id : m.ids) {
      auto it = row_of.find(id);
      if (it == row_of.end()) {
        aligned = false;
        break;
      }
      rows.push_back(it->second);
    }
    if (!aligned) continue;
    const std::string route = party_name(m.sender) + "->" + party_name(m.receiver) + " " + to_string(m.kind);
    if (m.receiver != kServer) {
      Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t j = 0; j < rows.size(); ++j) y(static_cast<Eigen::Index>(j)) = real.y[static_cast<std::size_t>(rows[j])];
      if (non_constant(y)) {
        for (Eigen::Index c = 0; c < m.payload.cols(); ++c) {
          if (same_column(m.payload.col(c), y, options.tolerance)) {
            flag(i, "label-content", route + " column " + std::to_string(c));
            break;
          }
        }
      }
    }
    if (m.sender != kServer) {
      bool found = false;
      for (const auto& block : real.blocks) {
        for (Eigen::Index c = 0; c < block.width() && !found; ++c) {
          if (block.columns[static_cast<std::size_t>(c)].kind != data::ColumnKind::continuous) continue;
          Eigen::VectorXd col(static_cast<Eigen::Index>(rows.size()));
          for (std::size_t j = 0; j < rows.size(); ++j) col(static_cast<Eigen::Index>(j)) = block.x(rows[j], c);
          if (!non_constant(col)) continue;
          for (Eigen::Index pc = 0; pc < m.payload.cols(); ++pc) {
            if (same_column(m.payload.col(pc), col, options.tolerance)) {
              flag(i, "raw-feature-content", route + " payload column " + std::to_string(pc) + " equals " +
                                                 block.columns[static_cast<std::size_t>(c)].name);
              found = true;
              break;
            }
          }
        }
      }
    }
  }
  return out;
}

}  // namespace icafs::vfl
