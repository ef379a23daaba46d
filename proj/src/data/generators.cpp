#include "icafs/data/generators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

namespace icafs::data {

namespace {

std::vector<ColumnMeta> continuous_columns(int d, const std::string& prefix) {
  std::vector<ColumnMeta> cols;
  for (int j = 0; j < d; ++j) cols.push_back({prefix + std::to_string(j), ColumnKind::continuous, {}, false});
  return cols;
}

std::vector<int> balanced_labels(int n, int classes, nn::Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i % classes;
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

// 5x7 bitmap digits, one string of 35 cells per glyph.
constexpr const char* kGlyphs[10] = {
    "01110100011001110101110011000101110", "00100011000010000100001000010001110",
    "01110100010000100010001000100011111", "11111000100010000010000011000101110",
    "00010001100101010010111110001000010", "11111100001111000001000011000101110",
    "00110010001000011110100011000101110", "11111000010001000100010000100001000",
    "01110100011000101110100011000101110", "01110100011000101111000010001001100"};

double glyph_at(int digit, double u, double v) {
  // Bilinear sample; outside the 5x7 box is background.
  auto cell = [&](int x, int y) {
    if (x < 0 || x >= 5 || y < 0 || y >= 7) return 0.0;
    return kGlyphs[digit][y * 5 + x] == '1' ? 1.0 : 0.0;
  };
  const double fx = u - 0.5, fy = v - 0.5;
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0, ay = fy - y0;
  return (1 - ax) * (1 - ay) * cell(x0, y0) + ax * (1 - ay) * cell(x0 + 1, y0) + (1 - ax) * ay * cell(x0, y0 + 1) +
         ax * ay * cell(x0 + 1, y0 + 1);
}

}  // namespace

int noise_column_count(int d, double fraction) {
  if (!(fraction > 0 && fraction < 1)) throw DataError("noise fraction must lie in (0, 1)");
  return static_cast<int>(std::ceil(fraction * d / (1.0 - fraction) - 1e-9));
}

TabularDataset inject_noise_features(const TabularDataset& ds, double fraction, nn::Rng& rng) {
  const int extra = noise_column_count(static_cast<int>(ds.cols()), fraction);
  TabularDataset out = ds;
  out.x.conservativeResize(Eigen::NoChange, ds.cols() + extra);
  out.x.rightCols(extra) = nn::gaussian(ds.rows(), extra, rng);
  for (int j = 0; j < extra; ++j) out.columns.push_back({"noise" + std::to_string(j), ColumnKind::continuous, {}, true});
  return out;
}

TprBenchmark make_tpr_benchmark(int n, int d, const std::vector<int>& relevant, nn::Rng& rng, const TprOptions& options) {
  if (relevant.empty()) throw DataError("planted benchmark needs at least one relevant column");
  if (n < 1 || d < 1) throw DataError("planted benchmark needs n, d >= 1");
  std::set<int> uniq(relevant.begin(), relevant.end());
  if (uniq.size() != relevant.size()) throw DataError("relevant columns repeat");
  for (int r : relevant) {
    if (r < 0 || r >= d) throw DataError("relevant column " + std::to_string(r) + " outside [0, d)");
  }
  if (options.n_classes < 2) throw DataError("planted benchmark needs >= 2 classes");
  std::vector<double> w = options.weights;
  if (w.empty()) {
    std::uniform_real_distribution<double> mag(0.5, 1.5);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t i = 0; i < relevant.size(); ++i) w.push_back((sign(rng) ? 1.0 : -1.0) * mag(rng));
  }
  if (w.size() != relevant.size()) throw DataError("one weight per relevant column required");

  TprBenchmark b;
  b.relevant = std::vector<int>(uniq.begin(), uniq.end());
  b.ds.x = nn::gaussian(n, d, rng);
  b.ds.columns = continuous_columns(d, "x");
  b.ds.n_classes = options.n_classes;
  std::normal_distribution<double> noise(0.0, options.label_noise);
  std::vector<double> score(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = noise(rng);
    for (std::size_t r = 0; r < relevant.size(); ++r) s += w[r] * b.ds.x(i, relevant[r]);
    score[static_cast<std::size_t>(i)] = s;
  }
  std::vector<double> cuts;
  if (options.n_classes == 2) {
    cuts = {0.0};
  } else {
    std::vector<double> sorted = score;
    std::sort(sorted.begin(), sorted.end());
    for (int c = 1; c < options.n_classes; ++c) cuts.push_back(sorted[static_cast<std::size_t>(c * n / options.n_classes)]);
  }
  for (double s : score) {
    b.ds.y.push_back(static_cast<int>(std::upper_bound(cuts.begin(), cuts.end(), s) - cuts.begin()));
  }
  fill_defaults(b.ds);
  return b;
}

void write_ground_truth(const std::vector<int>& relevant, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json(relevant).dump() << '\n';
}

std::vector<int> read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing ground-truth file: " + path.string());
  nlohmann::json j;
  in >> j;
  return j.get<std::vector<int>>();
}

TabularDataset gaussian_mixture_toy(int n, nn::Rng& rng) {
  TabularDataset ds;
  ds.n_classes = 2;
  ds.y = balanced_labels(n, 2, rng);
  ds.columns = {{"bimodal", ColumnKind::continuous, {}, false},
                {"colour", ColumnKind::categorical, {"red", "green", "blue"}, false},
                {"unimodal", ColumnKind::continuous, {}, false}};
  ds.x.resize(n, 3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution agree(0.8);
  std::discrete_distribution<int> colour({0.5, 0.3, 0.2});
  for (int i = 0; i < n; ++i) {
    const int y = ds.y[static_cast<std::size_t>(i)];
    const bool high = agree(rng) ? y == 1 : y == 0;
    ds.x(i, 0) = (high ? 2.0 : -2.0) + 0.5 * g(rng);
    ds.x(i, 1) = colour(rng);
    ds.x(i, 2) = 1.0 + 0.7 * g(rng);
  }
  fill_defaults(ds);
  return ds;
}

TabularDataset rendered_digits(int n, nn::Rng& rng) {
  TabularDataset ds;
  ds.n_classes = 10;
  ds.y = balanced_labels(n, 10, rng);
  ds.columns = continuous_columns(256, "px");
  ds.x.resize(n, 256);
  std::uniform_real_distribution<double> sx(1.5, 2.3), sy(1.6, 2.1), off(-1.5, 1.5), shear(-0.25, 0.25), gain(0.8, 1.4);
  std::normal_distribution<double> noise(0.0, 0.25);
  for (int i = 0; i < n; ++i) {
    const int digit = ds.y[static_cast<std::size_t>(i)];
    const double kx = sx(rng), ky = sy(rng), ox = off(rng), oy = off(rng), sh = shear(rng), gn = gain(rng);
    for (int py = 0; py < 16; ++py) {
      for (int px = 0; px < 16; ++px) {
        const double cy = py + 0.5 - 8.0 - oy;
        const double cx = px + 0.5 - 8.0 - ox - sh * cy;
        const double v = glyph_at(digit, cx / kx + 2.5, cy / ky + 3.5);
        ds.x(i, py * 16 + px) = std::clamp(2.0 * std::min(1.0, gn * v) - 1.0 + noise(rng), -1.0, 1.0);
      }
    }
  }
  fill_defaults(ds);
  return ds;
}

}  // namespace icafs::data
