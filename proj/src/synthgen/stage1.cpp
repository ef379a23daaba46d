#include "icafs/synthgen/stage1.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "icafs/vfl/parallel.hpp"

namespace icafs::synthgen {

using data::ColumnKind;
using data::ColumnMeta;
using data::EncodedSpan;

namespace {

Matrix rows_of(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

Matrix one_hot(const std::vector<int>& y, int n_classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(y.size()), n_classes);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= n_classes) throw DataError("label outside [0, n_classes)");
    out(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  }
  return out;
}

struct LocalParty {
  int id = 0;
  data::TableNormalizer normalizer;
  Matrix encoded;
  Matrix indicators;
  GanPair pair;
  double last_critic = 0;
};

Matrix local_condition(const LocalParty& p, const std::vector<Eigen::Index>& batch, LocalCv mode, nn::Rng& rng) {
  Matrix cv = rows_of(p.indicators, batch);
  if (mode == LocalCv::row_modes) return cv;
  const auto& blocks = p.normalizer.discrete_blocks();
  std::uniform_int_distribution<int> pick(0, static_cast<int>(blocks.size()) - 1);
  for (Eigen::Index i = 0; i < cv.rows(); ++i) {
    const auto& keep = blocks[static_cast<std::size_t>(pick(rng))];
    RowVector r = RowVector::Zero(cv.cols());
    r.segment(keep.offset, keep.width) = cv.row(i).segment(keep.offset, keep.width);
    cv.row(i) = r;
  }
  return cv;
}

/// Per row: one uniformly chosen block among the softmax spans of `rows` and the label, copied from the row.
Matrix sampled_condition(const Matrix& rows, const std::vector<EncodedSpan>& spans, const Matrix& labels,
                         nn::Rng& rng) {
  std::vector<std::pair<int, int>> blocks;  // (cv offset, source offset in rows; -1 for the label)
  std::vector<int> widths;
  int off = 0;
  for (const auto& s : spans) {
    if (s.kind != EncodedSpan::Kind::softmax) continue;
    blocks.emplace_back(off, s.offset);
    widths.push_back(s.width);
    off += s.width;
  }
  blocks.emplace_back(off, -1);
  widths.push_back(static_cast<int>(labels.cols()));
  Matrix cv = Matrix::Zero(rows.rows(), off + labels.cols());
  std::uniform_int_distribution<int> pick(0, static_cast<int>(blocks.size()) - 1);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const auto b = static_cast<std::size_t>(pick(rng));
    const auto [dst, src] = blocks[b];
    if (src < 0) {
      cv.row(i).segment(dst, widths[b]) = labels.row(i);
    } else {
      cv.row(i).segment(dst, widths[b]) = rows.row(i).segment(src, widths[b]);
    }
  }
  return cv;
}

int softmax_width(const std::vector<EncodedSpan>& spans) {
  int w = 0;
  for (const auto& s : spans) w += s.kind == EncodedSpan::Kind::softmax ? s.width : 0;
  return w;
}

void check_divergence(double loss, double limit, const std::string& who, int iteration) {
  if (!std::isfinite(loss) || std::abs(loss) > limit) {
    std::ostringstream os;
    os << "stage 1 diverged: " << who << " critic loss " << loss << " at iteration " << iteration
       << " (limit " << limit << ")";
    throw NumericError(os.str());
  }
}

double train_pair(GanPair& pair, const Matrix& real, const Matrix& cv, const GanConfig& gan, nn::Rng& rng) {
  double critic = 0;
  const auto b = real.rows();
  for (int c = 0; c < gan.n_critic; ++c) {
    Matrix noise = nn::gaussian(b, pair.noise_dim, rng);
    nn::Tape tape;
    nn::ParamNodes gen;
    for (const auto& [name, t] : pair.gen) gen.emplace(name, tape.constant(t.value()));
    Matrix fake = generator_forward(pair, gen, tape, noise, cv, &rng).rows.value();
    critic = critic_step(pair, real, fake, cv, gan.lambda_gp, rng).loss;
  }
  Matrix noise = nn::gaussian(b, pair.noise_dim, rng);
  generator_step(pair, noise, cv, gan, &rng);
  return critic;
}

std::vector<EncodedSpan> shifted(const std::vector<EncodedSpan>& spans, int offset) {
  std::vector<EncodedSpan> out = spans;
  for (auto& s : out) s.offset += offset;
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_matrix_csv(const Matrix& m, const std::vector<std::string>& header, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
}

Matrix read_matrix_csv(const std::filesystem::path& path, std::size_t expected_cols) {
  std::ifstream in(path);
  if (!in) throw DataError("missing synthetic file: " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (r.size() != expected_cols) throw DataError("malformed row in " + path.string());
    rows.push_back(std::move(r));
  }
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(expected_cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < expected_cols; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

nlohmann::ordered_json columns_json(const std::vector<ColumnMeta>& cols) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& c : cols) {
    nlohmann::ordered_json j;
    j["name"] = c.name;
    j["kind"] = c.kind == ColumnKind::continuous ? "continuous" : "categorical";
    j["categories"] = c.categories;
    j["noise"] = c.noise;
    arr.push_back(j);
  }
  return arr;
}

std::vector<ColumnMeta> columns_from_json(const nlohmann::ordered_json& arr) {
  std::vector<ColumnMeta> out;
  for (const auto& j : arr) {
    ColumnMeta c;
    c.name = j.at("name").get<std::string>();
    c.kind = j.at("kind").get<std::string>() == "continuous" ? ColumnKind::continuous : ColumnKind::categorical;
    c.categories = j.at("categories").get<std::vector<std::string>>();
    c.noise = j.value("noise", false);
    out.push_back(std::move(c));
  }
  return out;
}

double mean_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

LocalCv local_cv_from_string(const std::string& s) {
  if (s == "row_modes") return LocalCv::row_modes;
  if (s == "single_column") return LocalCv::single_column;
  throw ConfigError("unknown local_cv: " + s);
}

std::string to_string(LocalCv v) { return v == LocalCv::row_modes ? "row_modes" : "single_column"; }

GlobalCv global_cv_from_string(const std::string& s) {
  if (s == "label") return GlobalCv::label;
  if (s == "sampled") return GlobalCv::sampled;
  throw ConfigError("unknown global cv: " + s);
}

std::string to_string(GlobalCv v) { return v == GlobalCv::label ? "label" : "sampled"; }

void SyntheticDataset::validate_against(const data::VerticalSplit& split) const {
  if (parties() != split.parties()) throw DataError("synthetic data has a different number of blocks");
  for (int k = 0; k < parties(); ++k) {
    const auto& b = blocks[static_cast<std::size_t>(k)];
    if (b.cols() != split.blocks[static_cast<std::size_t>(k)].width()) throw DataError("synthetic block width mismatch");
    if (b.rows() != rows()) throw DataError("synthetic block row count mismatch");
    if (!b.allFinite()) throw DataError("synthetic block holds non-finite values");
  }
  if (n_classes != split.n_classes) throw DataError("synthetic label space mismatch");
  for (int v : y) {
    if (v < 0 || v >= n_classes) throw DataError("synthetic label outside [0, n_classes)");
  }
}

void save_synthetic(const SyntheticDataset& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["fingerprint"] = s.fingerprint;
  meta["n_classes"] = s.n_classes;
  meta["blocks"] = nlohmann::ordered_json::array();
  for (int k = 0; k < s.parties(); ++k) {
    const auto& cols = s.columns[static_cast<std::size_t>(k)];
    std::vector<std::string> header;
    for (const auto& c : cols) header.push_back(c.name);
    write_matrix_csv(s.blocks[static_cast<std::size_t>(k)], header, dir / ("block_" + std::to_string(k) + ".csv"));
    meta["blocks"].push_back(columns_json(cols));
  }
  Matrix labels(s.rows(), 1);
  for (Eigen::Index i = 0; i < s.rows(); ++i) labels(i, 0) = s.y[static_cast<std::size_t>(i)];
  write_matrix_csv(labels, {"label"}, dir / "labels.csv");
  std::ofstream out(dir / "fingerprint.json");
  if (!out) throw Error("cannot write fingerprint");
  out << meta.dump(2) << '\n';
}

SyntheticDataset load_synthetic(const std::filesystem::path& dir) {
  std::ifstream in(dir / "fingerprint.json");
  if (!in) throw DataError("missing synthetic fingerprint in " + dir.string());
  nlohmann::ordered_json meta;
  in >> meta;
  SyntheticDataset s;
  s.fingerprint = meta.at("fingerprint");
  s.n_classes = meta.at("n_classes").get<int>();
  for (std::size_t k = 0; k < meta.at("blocks").size(); ++k) {
    auto cols = columns_from_json(meta["blocks"][k]);
    s.blocks.push_back(read_matrix_csv(dir / ("block_" + std::to_string(k) + ".csv"), cols.size()));
    s.columns.push_back(std::move(cols));
  }
  Matrix labels = read_matrix_csv(dir / "labels.csv", 1);
  for (Eigen::Index i = 0; i < labels.rows(); ++i) s.y.push_back(static_cast<int>(labels(i, 0)));
  return s;
}

Matrix server_aggregate(const std::vector<Matrix>& blocks, const std::vector<int>& labels, int n_classes) {
  if (blocks.empty()) throw ShapeError("server_aggregate: no client blocks");
  const Eigen::Index rows = static_cast<Eigen::Index>(labels.size());
  Eigen::Index width = n_classes;
  for (const auto& b : blocks) {
    if (b.rows() != rows) throw ShapeError("server_aggregate: batch size mismatch");
    width += b.cols();
  }
  Matrix out(rows, width);
  Eigen::Index off = 0;
  for (const auto& b : blocks) {
    out.middleCols(off, b.cols()) = b;
    off += b.cols();
  }
  out.rightCols(n_classes) = one_hot(labels, n_classes);
  return out;
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DataError("wasserstein1: empty sample");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  // Integrate |F_a - F_b| over the merged support.
  const double na = static_cast<double>(x.size()), nb = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(x.front(), y.front());
  double total = 0;
  while (i < x.size() || j < y.size()) {
    const double next = (j >= y.size() || (i < x.size() && x[i] <= y[j])) ? x[i] : y[j];
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    while (i < x.size() && x[i] == next) ++i;
    while (j < y.size() && y[j] == next) ++j;
    prev = next;
  }
  return total;
}

FidelityReport fidelity_report(const std::vector<ColumnMeta>& real_columns, const Matrix& real,
                               const std::vector<ColumnMeta>& synth_columns, const Matrix& synth) {
  if (real_columns.size() != synth_columns.size() || real.cols() != synth.cols() ||
      real.cols() != static_cast<Eigen::Index>(real_columns.size())) {
    throw DataError("fidelity_report: schemas differ");
  }
  FidelityReport r;
  for (std::size_t c = 0; c < real_columns.size(); ++c) {
    const auto& rc = real_columns[c];
    const auto& sc = synth_columns[c];
    if (rc.name != sc.name || rc.kind != sc.kind || rc.categories != sc.categories) throw DataError("fidelity_report: schemas differ");
    std::vector<double> a(real.rows()), b(synth.rows());
    for (Eigen::Index i = 0; i < real.rows(); ++i) a[static_cast<std::size_t>(i)] = real(i, static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < synth.rows(); ++i) b[static_cast<std::size_t>(i)] = synth(i, static_cast<Eigen::Index>(c));
    FeatureFidelity f;
    f.name = rc.name;
    f.kind = rc.kind;
    f.real_mean = mean_of(a);
    f.synth_mean = mean_of(b);
    f.real_std = std_of(a);
    f.synth_std = std_of(b);
    f.w1 = wasserstein1(a, b);
    if (rc.kind == ColumnKind::categorical) {
      f.real_freq.assign(static_cast<std::size_t>(rc.cardinality()), 0.0);
      f.synth_freq.assign(static_cast<std::size_t>(rc.cardinality()), 0.0);
      for (double v : a) f.real_freq[static_cast<std::size_t>(v)] += 1.0 / static_cast<double>(a.size());
      for (double v : b) f.synth_freq[static_cast<std::size_t>(v)] += 1.0 / static_cast<double>(b.size());
      for (std::size_t k = 0; k < f.real_freq.size(); ++k) f.max_freq_gap = std::max(f.max_freq_gap, std::abs(f.real_freq[k] - f.synth_freq[k]));
    }
    r.features.push_back(std::move(f));
  }
  return r;
}

FidelityReport fidelity_report(const data::VerticalSplit& real, const SyntheticDataset& synth) {
  synth.validate_against(real);
  std::vector<ColumnMeta> rc, sc;
  std::vector<Matrix> rb, sb;
  RowVector dummy;
  Eigen::Index width = 0;
  for (int k = 0; k < real.parties(); ++k) {
    const auto& b = real.blocks[static_cast<std::size_t>(k)];
    rc.insert(rc.end(), b.columns.begin(), b.columns.end());
    sc.insert(sc.end(), synth.columns[static_cast<std::size_t>(k)].begin(), synth.columns[static_cast<std::size_t>(k)].end());
    width += b.width();
  }
  Matrix r(real.rows(), width), s(synth.rows(), width);
  Eigen::Index off = 0;
  for (int k = 0; k < real.parties(); ++k) {
    const auto w = real.blocks[static_cast<std::size_t>(k)].width();
    r.middleCols(off, w) = real.blocks[static_cast<std::size_t>(k)].x;
    s.middleCols(off, w) = synth.blocks[static_cast<std::size_t>(k)];
    off += w;
  }
  return fidelity_report(rc, r, sc, s);
}

nlohmann::ordered_json FidelityReport::to_json() const {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& f : features) {
    nlohmann::ordered_json j;
    j["name"] = f.name;
    j["kind"] = f.kind == ColumnKind::continuous ? "continuous" : "categorical";
    j["real_mean"] = f.real_mean;
    j["synth_mean"] = f.synth_mean;
    j["real_std"] = f.real_std;
    j["synth_std"] = f.synth_std;
    j["w1"] = f.w1;
    if (f.kind == ColumnKind::categorical) {
      j["real_freq"] = f.real_freq;
      j["synth_freq"] = f.synth_freq;
      j["max_freq_gap"] = f.max_freq_gap;
    }
    arr.push_back(j);
  }
  return arr;
}

Stage1Result run_stage1(const data::VerticalSplit& split, const Stage1Config& config, vfl::MessageLog* log) {
  const auto start = std::chrono::steady_clock::now();
  if (split.parties() < 1) throw DataError("stage 1 needs at least one client block");
  if (split.rows() == 0) throw DataError("stage 1 needs training rows");
  if (config.batch < 1 || config.iterations < 0) throw ConfigError("stage 1: batch >= 1 and iterations >= 0 required");
  const int K = split.parties();
  const int C = split.n_classes;

  std::vector<LocalParty> parties(static_cast<std::size_t>(K));
  std::vector<EncodedSpan> global_spans;
  int global_width = 0;
  for (int k = 0; k < K; ++k) {
    auto& p = parties[static_cast<std::size_t>(k)];
    const auto& block = split.blocks[static_cast<std::size_t>(k)];
    p.id = k;
    p.normalizer = data::TableNormalizer::fit(block.x, block.columns, config.gmm);
    p.encoded = p.normalizer.apply(block.x);
    p.indicators = p.normalizer.indicators(block.x);
    nn::Rng init = nn::derive_rng(config.seed, {0x51, static_cast<std::uint64_t>(k)});
    p.pair = make_gan_pair(p.normalizer.spans(), p.normalizer.encoded_width(), p.normalizer.indicator_width(), true,
                           config.gan, init);
    auto s = shifted(p.normalizer.spans(), global_width);
    global_spans.insert(global_spans.end(), s.begin(), s.end());
    global_width += p.normalizer.encoded_width();
  }
  nn::Rng ginit = nn::derive_rng(config.seed, {0x52});
  GanConfig gconf = config.gan;
  const bool sampled = config.global_cv == GlobalCv::sampled;
  const int global_cv_prefix = sampled ? softmax_width(global_spans) : 0;
  if (!sampled) gconf.cond_weight = 0;  // the label enters the critic directly
  GanPair global = make_gan_pair(global_spans, global_width, global_cv_prefix + C, sampled, gconf, ginit);

  vfl::Bus bus(K, log);
  Stage1Result result;
  const auto n = split.rows();

  for (int it = 0; it < config.iterations; ++it) {
    nn::Rng srng = nn::derive_rng(config.seed, {0x53, static_cast<std::uint64_t>(it)});
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    std::vector<Eigen::Index> batch(static_cast<std::size_t>(config.batch));
    std::vector<std::int64_t> ids;
    std::vector<int> labels;
    for (auto& b : batch) {
      b = pick(srng);
      ids.push_back(split.ids[static_cast<std::size_t>(b)]);
      labels.push_back(split.y[static_cast<std::size_t>(b)]);
    }
    for (int k = 0; k < K; ++k) {
      vfl::Message m;
      m.round = it;
      m.stage = 1;
      m.sender = vfl::kServer;
      m.receiver = k;
      m.kind = vfl::MessageKind::batch_indices;
      m.tag = vfl::PayloadTag::sample_ids;
      m.ids = ids;
      bus.post(std::move(m));
    }
    bus.barrier();

    auto client_round = [&](int k) {
      auto& p = parties[static_cast<std::size_t>(k)];
      nn::Rng rng = nn::derive_rng(config.seed, {0x54, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(it)});
      Matrix real = rows_of(p.encoded, batch);
      Matrix cv = local_condition(p, batch, config.local_cv, rng);
      p.last_critic = train_pair(p.pair, real, cv, config.gan, rng);
      Matrix noise = nn::gaussian(real.rows(), p.pair.noise_dim, rng);
      vfl::Message m;
      m.round = it;
      m.stage = 1;
      m.sender = k;
      m.receiver = vfl::kServer;
      m.kind = vfl::MessageKind::synth_rows_up;
      m.tag = vfl::PayloadTag::synthetic_rows;
      m.payload = snap_one_hot(local_generate(p.pair, noise, cv), p.pair.spans);
      m.ids = ids;
      bus.post(std::move(m));
    };
    vfl::for_each_party(K, config.workers, client_round);
    double local_sum = 0;
    for (int k = 0; k < K; ++k) {
      check_divergence(parties[static_cast<std::size_t>(k)].last_critic, config.divergence_limit, vfl::party_name(k), it);
      local_sum += parties[static_cast<std::size_t>(k)].last_critic;
    }
    result.trace.local_critic.push_back(local_sum / K);

    auto delivered = bus.barrier();
    std::vector<Matrix> uploads(static_cast<std::size_t>(K));
    for (const auto& m : delivered) {
      if (m.kind == vfl::MessageKind::synth_rows_up) uploads[static_cast<std::size_t>(m.sender)] = m.payload;
    }
    Matrix quasi = server_aggregate(uploads, labels, C);
    Matrix qx = quasi.leftCols(global_width), qy = quasi.rightCols(C);
    nn::Rng grng = nn::derive_rng(config.seed, {0x55, static_cast<std::uint64_t>(it)});
    Matrix gcv = sampled ? sampled_condition(qx, global_spans, qy, grng) : qy;
    const double gcritic = train_pair(global, qx, gcv, gconf, grng);
    check_divergence(gcritic, config.divergence_limit, "server", it);
    result.trace.global_critic.push_back(gcritic);
  }

  // Class-balanced labels for the final draw.
  const int n_synth = config.n_synth > 0 ? config.n_synth : static_cast<int>(n);
  std::vector<int> y;
  for (int c = 0; c < C; ++c) {
    const int count = n_synth / C + (c < n_synth % C ? 1 : 0);
    y.insert(y.end(), static_cast<std::size_t>(count), c);
  }
  nn::Rng frng = nn::derive_rng(config.seed, {0x56});
  std::shuffle(y.begin(), y.end(), frng);
  Matrix noise = nn::gaussian(n_synth, global.noise_dim, frng);
  Matrix final_cv = Matrix::Zero(n_synth, global_cv_prefix + C);
  final_cv.rightCols(C) = one_hot(y, C);
  Matrix encoded = local_generate(global, noise, final_cv);

  SyntheticDataset& s = result.synthetic;
  s.y = y;
  s.n_classes = C;
  int off = 0;
  for (int k = 0; k < K; ++k) {
    auto& p = parties[static_cast<std::size_t>(k)];
    const int w = p.normalizer.encoded_width();
    vfl::Message m;
    m.round = config.iterations;
    m.stage = 1;
    m.sender = vfl::kServer;
    m.receiver = k;
    m.kind = vfl::MessageKind::synth_block_down;
    m.tag = vfl::PayloadTag::synthetic_rows;
    m.payload = encoded.middleCols(off, w);
    bus.post(m);
    off += w;
  }
  for (const auto& m : bus.barrier()) {
    auto& p = parties[static_cast<std::size_t>(m.receiver)];
    s.blocks.push_back(p.normalizer.invert(m.payload));
    s.columns.push_back(split.blocks[static_cast<std::size_t>(m.receiver)].columns);
  }
  s.fingerprint["seed"] = config.seed;
  s.fingerprint["iterations"] = config.iterations;
  s.fingerprint["batch"] = config.batch;
  s.fingerprint["n_synth"] = n_synth;
  s.fingerprint["topology"] = to_string(config.gan.topology);
  s.fingerprint["noise_dim"] = config.gan.noise_dim;
  s.fingerprint["n_critic"] = config.gan.n_critic;
  s.fingerprint["lambda_gp"] = config.gan.lambda_gp;
  s.fingerprint["cond_weight"] = config.gan.cond_weight;
  s.fingerprint["local_cv"] = to_string(config.local_cv);
  s.fingerprint["global_cv"] = to_string(config.global_cv);
  s.validate_against(split);
  result.fidelity = fidelity_report(split, s);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace icafs::synthgen
