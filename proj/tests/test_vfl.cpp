#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "icafs/data/generators.hpp"
#include "icafs/nn/loss.hpp"
#include "icafs/vfl/runtime.hpp"

using namespace icafs;
using namespace icafs::vfl;

namespace {

TrainConfig small_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch = 32;
  c.selectors = 2;
  c.encoder.hidden = 8;
  c.encoder.output = 4;
  c.seed = 3;
  return c;
}

struct Planted {
  data::VerticalSplit train, test;
  std::vector<int> relevant;
};

Planted planted(int n, std::uint64_t seed) {
  nn::Rng rng(seed);
  auto b = data::make_tpr_benchmark(n, 8, {0, 5}, rng);
  auto tt = data::stratified_split(b.ds, 0.25, seed);
  Planted p;
  p.train = data::vertical_partition(tt.train, data::explicit_layout(8, {{0, 4}, {4, 8}}));
  p.test = data::vertical_partition(tt.test, data::explicit_layout(8, {{0, 4}, {4, 8}}));
  p.relevant = b.relevant;
  return p;
}

/// Synthetic stand-in for Stage 1 output: the real rows with a little noise.
synthgen::SyntheticDataset jittered(const data::VerticalSplit& s, std::uint64_t seed) {
  nn::Rng rng(seed);
  synthgen::SyntheticDataset out;
  for (const auto& b : s.blocks) {
    out.blocks.push_back(b.x + nn::gaussian(b.x.rows(), b.x.cols(), rng, 0.05));
    out.columns.push_back(b.columns);
  }
  out.y = s.y;
  out.n_classes = s.n_classes;
  out.fingerprint["source"] = "jitter";
  return out;
}

double relu(double v) { return v > 0 ? v : 0; }
double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Scalar evaluation of gates, mean substitution and the summed heads for one sample.
std::vector<double> oracle_logits(const std::vector<double>& z, const std::vector<std::vector<double>>& w,
                                  const std::vector<std::vector<double>>& w0,
                                  const std::vector<std::vector<std::vector<double>>>& W,
                                  const std::vector<std::vector<double>>& b, bool hard, double tau) {
  const std::size_t p = z.size(), N = w.size(), C = b[0].size();
  double zbar = 0;
  for (double v : z) zbar += v;
  zbar /= static_cast<double>(p);
  std::vector<double> out(C, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = b[n][c];
      for (std::size_t i = 0; i < p; ++i) {
        double a;
        if (hard) {
          a = w[n][i] * z[i] > 0 ? 1.0 : 0.0;
        } else {
          a = sigm(tau * w[n][i] * z[i]) / sigm(w0[n][i]);
          if (a > 1) a = 1;
        }
        const double s = a * z[i] + (1 - a) * zbar;
        acc += W[n][i][c] * s;
      }
      out[c] += acc;
    }
  }
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "icafs_test_vfl";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("client encoders") {
  nn::Rng rng(1);
  nn::OptimizerConfig opt;
  Matrix x = nn::gaussian(5, 3, rng);

  EncoderConfig id;
  id.kind = EncoderKind::identity;
  auto ci = make_client(0, 3, id, opt, rng);
  CHECK(ci.forward(x) == x);
  CHECK(ci.encoder.empty());

  EncoderConfig mlp;
  mlp.hidden = 6;
  mlp.output = 4;
  auto cm = make_client(1, 3, mlp, opt, rng);
  CHECK(cm.forward(x).cols() == 4);
  CHECK_THROWS_AS(cm.forward(Matrix::Zero(2, 4)), ShapeError);

  // straight-line oracle
  const auto& W0 = cm.encoder.at("l0.weight").value();
  const auto& W1 = cm.encoder.at("l1.weight").value();
  const auto& W2 = cm.encoder.at("l2.weight").value();
  const auto& b0 = cm.encoder.at("l0.bias").value();
  const auto& b1 = cm.encoder.at("l1.bias").value();
  const auto& b2 = cm.encoder.at("l2.bias").value();
  Matrix got = cm.forward(x);
  for (int r = 0; r < 5; ++r) {
    std::vector<double> h1(6), h2(6);
    for (int j = 0; j < 6; ++j) {
      double s = b0(0, j);
      for (int i = 0; i < 3; ++i) s += x(r, i) * W0(i, j);
      h1[j] = relu(s);
    }
    for (int j = 0; j < 6; ++j) {
      double s = b1(0, j);
      for (int i = 0; i < 6; ++i) s += h1[i] * W1(i, j);
      h2[j] = relu(s);
    }
    for (int j = 0; j < 4; ++j) {
      double s = b2(0, j);
      for (int i = 0; i < 6; ++i) s += h2[i] * W2(i, j);
      CHECK(std::abs(got(r, j) - relu(s)) < 1e-12);
    }
  }

  cm.encoder.at("l2.weight").value().setZero();
  cm.encoder.at("l2.bias").value() << 0.5, 1.5, 2.5, 3.5;
  Matrix z = cm.forward(x);
  for (int r = 0; r < 5; ++r) CHECK(z.row(r) == cm.encoder.at("l2.bias").value());

  EncoderConfig fw;
  fw.kind = EncoderKind::featurewise;
  auto cf = make_client(2, 3, fw, opt, rng);
  Matrix zf = cf.forward(x);
  for (int r = 0; r < 5; ++r)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(zf(r, j) - std::log1p(std::exp(x(r, j)))) < 1e-12);

  EncoderConfig sp;
  sp.kind = EncoderKind::softplus;
  auto cs = make_client(3, 3, sp, opt, rng);
  CHECK(cs.encoder.empty());
  CHECK(cs.output_width == 3);
  CHECK(cs.forward(x) == zf);
  CHECK(encoder_kind_from_string(to_string(EncoderKind::softplus)) == EncoderKind::softplus);
}

TEST_CASE("concat and scatter embeddings") {
  nn::Rng rng(2);
  Matrix a = nn::gaussian(3, 4, rng), b = nn::gaussian(3, 6, rng);
  Slices map;
  Matrix z = concat_embeddings({a, b}, &map);
  CHECK(z.cols() == 10);
  REQUIRE(map.slices.size() == 2);
  CHECK(map.slices[0].begin == 0);
  CHECK(map.slices[0].width == 4);
  CHECK(map.slices[1].begin == 4);
  CHECK(map.slices[1].width == 6);
  CHECK(concat_embeddings({a}) == a);
  auto parts = scatter_embeddings(z, map);
  CHECK(parts[0] == a);
  CHECK(parts[1] == b);
  CHECK(concat_embeddings(parts) == z);
  // sentinel routing
  Matrix g = Matrix::Zero(3, 10);
  g.leftCols(4).setConstant(1.0);
  g.rightCols(6).setConstant(2.0);
  auto routed = scatter_embeddings(g, map);
  CHECK(routed[0].cols() == 4);
  CHECK((routed[0].array() == 1.0).all());
  CHECK((routed[1].array() == 2.0).all());
  CHECK_THROWS_AS(concat_embeddings({a, Matrix::Zero(2, 6)}), ShapeError);
  CHECK_THROWS_AS(scatter_embeddings(Matrix::Zero(3, 9), map), ShapeError);
}

TEST_CASE("ensemble identity and additivity cases") {
  nn::Rng rng(3);
  TrainConfig c;
  c.selectors = 1;
  c.variant = Variant::no_fs;
  auto s = make_server(3, slice_map({3}).slices, c, rng);
  s.heads.at("h0.weight").value() = Matrix::Identity(3, 3);
  s.heads.at("h0.bias").value().setZero();
  Matrix z = nn::gaussian(4, 3, rng);
  auto p = ensemble_predict(s, z, GateMode::soft, 1.0);
  for (int i = 0; i < 4; ++i) CHECK((p.probabilities.row(i) - nn::softmax(z.row(i))).cwiseAbs().maxCoeff() < 1e-15);

  c.selectors = 2;
  c.variant = Variant::icafs;
  nn::Rng r1(4);
  auto one = make_server(3, slice_map({2, 2}).slices, TrainConfig{.selectors = 1}, r1);
  auto two = make_server(3, slice_map({2, 2}).slices, c, rng);
  for (int n = 0; n < 2; ++n) {
    const std::string k = std::to_string(n);
    two.heads.at("h" + k + ".weight") = one.heads.at("h0.weight");
    two.heads.at("h" + k + ".bias").value() = RowVector::LinSpaced(3, 0.1, 0.3);
    two.selector.at("g" + k + ".w") = one.selector.at("g0.w");
    two.w0[static_cast<std::size_t>(n)] = one.w0[0];
  }
  one.heads.at("h0.bias").value() = RowVector::LinSpaced(3, 0.1, 0.3);
  Matrix zz = nn::gaussian(6, 4, rng);
  for (auto mode : {GateMode::soft, GateMode::hard}) {
    auto p1 = ensemble_predict(one, zz, mode, 3.0);
    auto p2 = ensemble_predict(two, zz, mode, 3.0);
    CHECK(p2.logits == 2.0 * p1.logits);
    CHECK(p1.labels == p2.labels);
  }
}

TEST_CASE("ensemble_predict matches the scalar oracle on 1000 random cases") {
  nn::Rng rng(5);
  std::uniform_int_distribution<int> pd(1, 6), nd(1, 3), cd(2, 4);
  std::uniform_real_distribution<double> tau_d(1.0, 50.0);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int p = pd(rng), N = nd(rng), C = cd(rng);
    std::vector<int> widths;
    for (int left = p; left > 0;) {
      const int w = std::uniform_int_distribution<int>(1, left)(rng);
      widths.push_back(w);
      left -= w;
    }
    TrainConfig c;
    c.selectors = N;
    auto s = make_server(C, slice_map(widths).slices, c, rng);
    std::vector<std::vector<double>> w(N), w0(N), b(N);
    std::vector<std::vector<std::vector<double>>> W(N);
    for (int n = 0; n < N; ++n) {
      const std::string k = std::to_string(n);
      RowVector gw = nn::gaussian(1, p, rng);
      RowVector gw0 = nn::gaussian(1, p, rng, 0.3);
      s.selector.at("g" + k + ".w").value() = gw;
      s.w0[static_cast<std::size_t>(n)] = gw0;
      Matrix hw = nn::gaussian(p, C, rng);
      RowVector hb = nn::gaussian(1, C, rng);
      s.heads.at("h" + k + ".weight").value() = hw;
      s.heads.at("h" + k + ".bias").value() = hb;
      for (int i = 0; i < p; ++i) {
        w[n].push_back(gw(i));
        w0[n].push_back(gw0(i));
        W[n].emplace_back();
        for (int cc = 0; cc < C; ++cc) W[n][i].push_back(hw(i, cc));
      }
      for (int cc = 0; cc < C; ++cc) b[n].push_back(hb(cc));
    }
    Matrix z = nn::gaussian(3, p, rng);
    const double tau = tau_d(rng);
    for (auto mode : {GateMode::soft, GateMode::hard}) {
      auto pr = ensemble_predict(s, z, mode, tau);
      for (int i = 0; i < 3; ++i) {
        std::vector<double> zi;
        for (int j = 0; j < p; ++j) zi.push_back(z(i, j));
        auto ref = oracle_logits(zi, w, w0, W, b, mode == GateMode::hard, tau);
        double mx = ref[0];
        int arg = 0;
        for (int cc = 0; cc < C; ++cc) {
          CHECK(std::abs(pr.logits(i, cc) - ref[static_cast<std::size_t>(cc)]) < 1e-10);
          if (ref[static_cast<std::size_t>(cc)] > mx) {
            mx = ref[static_cast<std::size_t>(cc)];
            arg = cc;
          }
        }
        CHECK(pr.labels[static_cast<std::size_t>(i)] == arg);
        ++checked;
      }
    }
  }
  CHECK(checked == 6000);
}

TEST_CASE("stage 2 with lr 0 leaves parameters unchanged") {
  auto d = planted(200, 1);
  auto synth = jittered(d.train, 2);
  auto c = small_train(4);
  c.lr = 0.0;
  Federation f = make_federation(d.train, c);
  auto heads = f.server.heads;
  auto sel = f.server.selector;
  auto enc = f.clients[0].encoder;
  auto s = stage2_epoch(f, synth, 0);
  CHECK(std::isfinite(s.loss));
  CHECK(s.loss > 0);
  CHECK(f.server.heads == heads);
  CHECK(f.server.selector == sel);
  CHECK(f.clients[0].encoder == enc);
  CHECK(s.tau == 1.0);
  CHECK_THROWS_AS(stage2_epoch(f, synthgen::SyntheticDataset{}, 0), DataError);
}

TEST_CASE("stage 2 loss decreases on a separable toy with beta 0") {
  auto d = planted(200, 3);
  // Separable labels: sign of the first planted column.
  for (std::size_t i = 0; i < d.train.y.size(); ++i) d.train.y[i] = d.train.blocks[0].x(static_cast<Eigen::Index>(i), 0) > 0;
  auto synth = jittered(d.train, 4);
  for (std::size_t i = 0; i < synth.y.size(); ++i) synth.y[i] = synth.blocks[0](static_cast<Eigen::Index>(i), 0) > 0;
  auto c = small_train(50);
  c.beta = 0;
  c.variant = Variant::fixed_temp;
  c.batch = 1000;  // full batch
  c.optimizer = nn::OptimizerKind::sgd;
  c.lr = 0.05;
  c.encoder.kind = EncoderKind::identity;
  Federation f = make_federation(d.train, c);
  double prev = 1e9;
  bool monotone = true;
  for (int t = 0; t < 50; ++t) {
    const double loss = stage2_epoch(f, synth, t).loss;
    monotone = monotone && loss < prev;
    prev = loss;
  }
  CHECK(monotone);
}

TEST_CASE("large beta drives the mean gate toward zero") {
  auto d = planted(200, 5);
  auto synth = jittered(d.train, 6);
  auto c = small_train(30);
  c.encoder.kind = EncoderKind::featurewise;
  auto mean_alpha = [&](double beta) {
    c.beta = beta;
    Federation f = make_federation(d.train, c);
    for (int t = 0; t < 30; ++t) stage2_epoch(f, synth, t);
    Matrix z = embed(f.clients, d.train);
    double total = 0;
    for (const auto& g : f.server.gate_params()) total += gates::soft_gate(z, g, f.schedule.at(29)).mean();
    return total / 2.0;
  };
  const double big = mean_alpha(1e3), none = mean_alpha(0.0);
  CHECK(big < 0.1);
  CHECK(big < none);
}

TEST_CASE("stage 3 keeps selectors frozen and all-ones masks reduce to split training") {
  auto d = planted(200, 7);
  auto c = small_train(3);
  Federation f = make_federation(d.train, c);
  auto sel = f.server.selector;
  for (int t = 0; t < 3; ++t) {
    auto s = stage3_epoch(f, d.train, t);
    CHECK(s.gate_checksum_before == s.gate_checksum_after);
  }
  CHECK(f.server.selector == sel);

  // no-fs, one selector, SGD: one batch equals a joint step on encoder + head.
  auto c1 = small_train(1);
  c1.variant = Variant::no_fs;
  c1.selectors = 1;
  c1.batch = 1000;
  c1.optimizer = nn::OptimizerKind::sgd;
  c1.lr = 0.1;
  Federation g = make_federation(d.train, c1);
  auto enc0 = g.clients[0].encoder, enc1 = g.clients[1].encoder, heads = g.server.heads;
  stage3_epoch(g, d.train, 0);

  nn::Tape tape;
  auto n0 = tape.bind(enc0), n1 = tape.bind(enc1), nh = tape.bind(heads);
  Var z0 = g.clients[0].forward(n0, tape.constant(d.train.blocks[0].x));
  Var z1 = g.clients[1].forward(n1, tape.constant(d.train.blocks[1].x));
  Var logits = nn::add_row(nn::matmul(nn::concat_cols({z0, z1}), nh.at("h0.weight")), nh.at("h0.bias"));
  Var loss = nn::cross_entropy(logits, d.train.y);
  tape.backward(loss);
  auto g0 = tape.grads(n0);
  for (const auto& [name, t] : enc0) {
    Matrix expect = t.value() - 0.1 * g0.at(name);
    CHECK((g.clients[0].encoder.at(name).value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  auto gh = tape.grads(nh);
  Matrix expect_w = heads.at("h0.weight").value() - 0.1 * gh.at("h0.weight");
  CHECK((g.server.heads.at("h0.weight").value() - expect_w).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("train with zero epochs returns the initial model") {
  auto d = planted(100, 11);
  auto c = small_train(0);
  Federation f = make_federation(d.train, c);
  auto r = train(d.train, synthgen::SyntheticDataset{}, c);
  CHECK(r.model.server.heads == f.server.heads);
  CHECK(r.model.clients[1].encoder == f.clients[1].encoder);
  CHECK(r.stage2.empty());
}

TEST_CASE("training is seeded and schedule independent") {
  auto d = planted(160, 12);
  auto synth = jittered(d.train, 13);
  auto c = small_train(3);
  auto a = train(d.train, synth, c);
  auto b = train(d.train, synth, c);
  CHECK(a.model.checkpoint_bytes() == b.model.checkpoint_bytes());
  c.workers = 3;
  auto t = train(d.train, synth, c);
  CHECK(a.model.checkpoint_bytes() == t.model.checkpoint_bytes());
  c.seed = 4;
  auto other = train(d.train, synth, c);
  CHECK(a.model.checkpoint_bytes() != other.model.checkpoint_bytes());
  REQUIRE(a.stage2.size() == 3);
  CHECK(a.stage2[0].tau == 1.0);
  CHECK(a.stage2[2].tau > a.stage2[1].tau);
}

TEST_CASE("fixed-temp keeps tau at one") {
  auto d = planted(100, 14);
  auto c = small_train(3);
  c.variant = Variant::fixed_temp;
  auto r = train(d.train, jittered(d.train, 1), c);
  for (const auto& s : r.stage2) CHECK(s.tau == 1.0);
}

TEST_CASE("evaluate accuracy cases") {
  auto d = planted(200, 15);
  TrainConfig c = small_train(0);
  c.variant = Variant::no_fs;
  c.selectors = 1;
  auto r = train(d.train, synthgen::SyntheticDataset{}, c);
  // constant class: zero weights, bias favouring class 0, on a balanced set
  auto& m = r.model;
  m.server.heads.at("h0.weight").value().setZero();
  m.server.heads.at("h0.bias").value() << 1.0, 0.0;
  data::VerticalSplit balanced = d.test;
  for (std::size_t i = 0; i < balanced.y.size(); ++i) balanced.y[i] = static_cast<int>(i % 2);
  if (balanced.y.size() % 2) {
    balanced.y.pop_back();
    balanced.ids.pop_back();
    for (auto& b : balanced.blocks) b.x.conservativeResize(b.x.rows() - 1, Eigen::NoChange);
  }
  auto e = evaluate(m, balanced);
  CHECK(e.accuracy == 0.5);
  CHECK(e.per_class[0] == 1.0);
  CHECK(e.per_class[1] == 0.0);
  // perfect: labels equal the model's own predictions
  data::VerticalSplit own = d.test;
  own.y = evaluate(r.model, d.test).predictions;
  CHECK(evaluate(r.model, own).accuracy == 1.0);
  data::VerticalSplit bad = d.test;
  bad.blocks.pop_back();
  CHECK_THROWS_AS(evaluate(r.model, bad), DataError);
}

TEST_CASE("checkpoint round trip") {
  auto d = planted(120, 16);
  auto c = small_train(2);
  auto r = train(d.train, jittered(d.train, 3), c);
  auto path = scratch("model.ckpt");
  r.model.save(path);
  auto back = load_model(path, d.train, c);
  CHECK(back.checkpoint_bytes() == r.model.checkpoint_bytes());
  CHECK(evaluate(back, d.test).predictions == evaluate(r.model, d.test).predictions);
  auto other = c;
  other.encoder.output = 5;
  CHECK_THROWS_AS(load_model(path, d.train, other), DataError);
  CHECK_THROWS_AS(load_model(scratch("absent.ckpt"), d.train, c), DataError);
}

TEST_CASE("audit of standard, strict and rogue runs") {
  auto d = planted(120, 17);
  auto synth = jittered(d.train, 5);
  auto c = small_train(2);
  MessageLog log(true);
  train(d.train, synth, c, &log);
  AuditOptions opts;
  opts.real = &d.train;
  CHECK(audit_messages(log, opts).empty());
  bool saw_feedback = false;
  for (const auto& r : log.records()) saw_feedback = saw_feedback || r.kind == MessageKind::feedback_down;
  CHECK(saw_feedback);

  // rogue: labels to client 1
  Message rogue;
  rogue.stage = 3;
  rogue.sender = kServer;
  rogue.receiver = 1;
  rogue.kind = MessageKind::feedback_down;
  rogue.tag = PayloadTag::embedding_gradient;
  rogue.ids.assign(d.train.ids.begin(), d.train.ids.begin() + 16);
  rogue.payload.resize(16, 1);
  for (int i = 0; i < 16; ++i) rogue.payload(i, 0) = d.train.y[static_cast<std::size_t>(i)];
  MessageLog bad(true);
  bad.append(rogue);
  auto v = audit_messages(bad, opts);
  REQUIRE(v.size() == 1);
  CHECK(v[0].rule == "label-content");
  rogue.tag = PayloadTag::labels;
  rogue.kind = MessageKind::batch_indices;
  rogue.payload.resize(0, 0);
  MessageLog tagged(false);
  tagged.append(rogue);
  CHECK(audit_messages(tagged).size() == 1);

  // strict mode: no feedback channel in Stage 3
  c.strict = true;
  MessageLog slog(false);
  train(d.train, synth, c, &slog);
  AuditOptions sopts;
  sopts.strict = true;
  CHECK(audit_messages(slog, sopts).empty());
  for (const auto& r : slog.records()) CHECK(r.kind != MessageKind::feedback_down);
  CHECK(audit_messages(log, sopts).size() > 0);

  // identity encoders upload raw features
  c.strict = false;
  c.encoder.kind = EncoderKind::identity;
  MessageLog ilog(true);
  train(d.train, synth, c, &ilog);
  auto iv = audit_messages(ilog, opts);
  CHECK(std::any_of(iv.begin(), iv.end(), [](const Violation& x) { return x.rule == "raw-feature-content"; }));
}

TEST_CASE("dp stage 3 is seeded and noisy") {
  auto d = planted(120, 18);
  auto synth = jittered(d.train, 6);
  auto c = small_train(2);
  auto plain = train(d.train, synth, c);
  c.dp.enabled = true;
  c.dp.clip = 1.0;
  c.dp.noise_multiplier = 1.0;
  auto a = train(d.train, synth, c);
  auto b = train(d.train, synth, c);
  CHECK(a.model.checkpoint_bytes() == b.model.checkpoint_bytes());
  CHECK(a.model.checkpoint_bytes() != plain.model.checkpoint_bytes());
  c.dp.clip = 0;
  CHECK_THROWS_AS(train(d.train, synth, c), ConfigError);
}

TEST_CASE("planted TPR is reported for featurewise encoders") {
  auto d = planted(200, 19);
  auto c = small_train(0);
  c.encoder.kind = EncoderKind::featurewise;
  auto r = train(d.train, synthgen::SyntheticDataset{}, c);
  for (int n = 0; n < 2; ++n) r.model.server.selector.at("g" + std::to_string(n) + ".w").value() = RowVector::Constant(8, -1.0);
  r.model.server.selector.at("g0.w").value()(0) = 1.0;  // source column 0
  auto e = evaluate(r.model, d.test, &d.relevant);
  REQUIRE(e.tpr.has_value());
  CHECK(*e.tpr == 0.5);
  CHECK(e.selected_columns == std::vector<int>{0});
  c.encoder.kind = EncoderKind::mlp;
  auto m = train(d.train, synthgen::SyntheticDataset{}, c);
  CHECK(!evaluate(m.model, d.test, &d.relevant).tpr.has_value());
}
