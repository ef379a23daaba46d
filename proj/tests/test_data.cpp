#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "icafs/data/conditional.hpp"
#include "icafs/data/generators.hpp"
#include "icafs/data/normalizer.hpp"
#include "icafs/data/partition.hpp"

using namespace icafs;
using namespace icafs::data;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "icafs_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

Eigen::VectorXd labels_as_vector(const std::vector<int>& y) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) v(static_cast<Eigen::Index>(i)) = y[i];
  return v;
}

// Plug-in mutual information between a quantile-binned column and the label.
double binned_mutual_information(const Eigen::VectorXd& x, const std::vector<int>& y, int classes, int bins) {
  const auto n = static_cast<std::size_t>(x.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x(static_cast<Eigen::Index>(a)) < x(static_cast<Eigen::Index>(b)); });
  std::vector<std::vector<double>> joint(static_cast<std::size_t>(bins), std::vector<double>(static_cast<std::size_t>(classes), 0));
  for (std::size_t r = 0; r < n; ++r) joint[r * static_cast<std::size_t>(bins) / n][static_cast<std::size_t>(y[order[r]])] += 1.0 / static_cast<double>(n);
  std::vector<double> py(static_cast<std::size_t>(classes), 0);
  for (const auto& row : joint)
    for (int c = 0; c < classes; ++c) py[static_cast<std::size_t>(c)] += row[static_cast<std::size_t>(c)];
  double mi = 0;
  for (const auto& row : joint) {
    const double px = std::accumulate(row.begin(), row.end(), 0.0);
    for (int c = 0; c < classes; ++c) {
      const double p = row[static_cast<std::size_t>(c)];
      if (p > 0) mi += p * std::log(p / (px * py[static_cast<std::size_t>(c)]));
    }
  }
  return mi;
}

}  // namespace

TEST_CASE("load_table parses schema-described CSV") {
  auto csv = scratch("t.csv"), schema = scratch("t.json");
  write_file(csv, "a,colour,y\n1.5,red,no\n-2,blue,yes\n3e-1,red,yes\n");
  write_file(schema, R"({"a":{"kind":"continuous"},"colour":{"kind":"categorical"},"y":{"kind":"categorical","label":true}})");
  TabularDataset ds = load_table(csv, schema);
  CHECK(ds.rows() == 3);
  CHECK(ds.cols() == 2);
  CHECK(ds.n_classes == 2);
  CHECK(ds.class_names == std::vector<std::string>{"no", "yes"});
  CHECK(ds.y == std::vector<int>{0, 1, 1});
  CHECK(ds.x(2, 0) == 0.3);
  CHECK(ds.columns[1].categories == std::vector<std::string>{"blue", "red"});
  CHECK(ds.x(0, 1) == 1.0);

  auto csv2 = scratch("t2.csv"), schema2 = scratch("t2.json");
  save_table(ds, csv2, schema2);
  TabularDataset back = load_table(csv2, schema2);
  CHECK(back.x == ds.x);
  CHECK(back.y == ds.y);
}

TEST_CASE("load_table errors") {
  auto schema = scratch("e.json");
  write_file(schema, R"({"a":{"kind":"continuous"},"y":{"kind":"categorical","label":true}})");
  auto empty = scratch("empty.csv");
  write_file(empty, "");
  CHECK_THROWS_WITH_AS(load_table(empty, schema), "empty dataset", DataError);
  auto header_only = scratch("header.csv");
  write_file(header_only, "a,y\n");
  CHECK_THROWS_WITH_AS(load_table(header_only, schema), "empty dataset", DataError);
  auto bad = scratch("bad.csv");
  write_file(bad, "a,y\n1,0\nx,1\n");
  CHECK_THROWS_WITH_AS(load_table(bad, schema), doctest::Contains("row 2"), DataError);
  auto mismatch = scratch("mismatch.csv");
  write_file(mismatch, "b,y\n1,0\n");
  CHECK_THROWS_AS(load_table(mismatch, schema), DataError);
  CHECK_THROWS_AS(load_table(scratch("does_not_exist.csv"), schema), DataError);
}

TEST_CASE("benchmark tables have their documented shape when present") {
  // Only checked when the raw tables are available locally.
  for (auto [csv, n, d, k] : {std::tuple{"data/usps.csv", 9298, 256, 10}, std::tuple{"data/allaml.csv", 72, 7129, 2}}) {
    std::filesystem::path p = std::filesystem::path(ICAFS_SOURCE_DIR) / csv;
    auto schema = p;
    schema.replace_extension(".json");
    if (!std::filesystem::exists(p) || !std::filesystem::exists(schema)) {
      MESSAGE("skipping " << std::string(csv) << ": not present");
      continue;
    }
    TabularDataset ds = load_table(p, schema);
    CHECK(ds.rows() == n);
    CHECK(ds.cols() == d);
    CHECK(ds.n_classes == k);
  }
}

TEST_CASE("equal-random partition sizes") {
  auto l = equal_random_layout(256, 2, 0);
  CHECK(l.columns[0].size() == 128);
  CHECK(l.columns[1].size() == 128);
  auto big = equal_random_layout(7129, 10, 3);
  int n713 = 0, n712 = 0;
  for (const auto& c : big.columns) {
    n713 += c.size() == 713;
    n712 += c.size() == 712;
  }
  CHECK(n713 == 9);
  CHECK(n712 == 1);
  CHECK_THROWS_AS(equal_random_layout(3, 4, 0), DataError);
  CHECK(equal_random_layout(50, 3, 9).columns == equal_random_layout(50, 3, 9).columns);
  CHECK(equal_random_layout(50, 3, 9).columns != equal_random_layout(50, 3, 10).columns);
}

TEST_CASE("explicit partition validation") {
  CHECK_THROWS_AS(explicit_layout(6, {{0, 4}, {3, 6}}), DataError);
  CHECK_THROWS_AS(explicit_layout(6, {{0, 3}, {3, 5}}), DataError);
  auto l = explicit_layout(6, {{0, 2}, {2, 6}});
  CHECK(l.columns[1] == std::vector<int>{2, 3, 4, 5});
}

TEST_CASE("partition soundness: blocks reconstruct the table") {
  nn::Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> dd(2, 40);
    const int d = dd(rng);
    std::uniform_int_distribution<int> kk(2, d);
    const int k = kk(rng);
    TabularDataset ds;
    ds.x = nn::gaussian(7, d, rng);
    ds.columns.resize(static_cast<std::size_t>(d));
    ds.n_classes = 2;
    ds.y.assign(7, 0);
    fill_defaults(ds);
    VerticalSplit s = vertical_partition(ds, k, static_cast<std::uint64_t>(trial));
    CHECK(s.parties() == k);
    CHECK(s.reconstruct() == ds.x);
    std::size_t lo = 1000, hi = 0;
    for (const auto& b : s.blocks) {
      lo = std::min(lo, static_cast<std::size_t>(b.width()));
      hi = std::max(hi, static_cast<std::size_t>(b.width()));
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("stratified split keeps class proportions") {
  nn::Rng rng(2);
  TprBenchmark b = make_tpr_benchmark(1000, 5, {0}, rng);
  auto tt = stratified_split(b.ds, 0.2, 4);
  auto all = b.ds.class_counts(), test = tt.test.class_counts();
  for (std::size_t c = 0; c < all.size(); ++c) CHECK(std::abs(test[c] - 0.2 * all[c]) <= 0.5);
  CHECK(tt.train.rows() + tt.test.rows() == 1000);
  std::set<std::int64_t> ids(tt.train.ids.begin(), tt.train.ids.end());
  for (auto id : tt.test.ids) CHECK(ids.count(id) == 0);
}

TEST_CASE("single-mode normalizer uses the direct formula") {
  nn::Rng rng(5);
  Matrix x = nn::gaussian(500, 1, rng);
  std::vector<ColumnMeta> cols = {{"c", ColumnKind::continuous, {}, false}};
  GmmOptions opt;
  opt.max_modes = 1;
  TableNormalizer t = TableNormalizer::fit(x, cols, opt);
  const double mu = x.mean();
  const double sd = std::sqrt((x.array() - mu).square().mean());
  Matrix e = t.apply(x);
  REQUIRE(e.cols() == 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    CHECK(e(i, 0) == doctest::Approx(std::clamp((x(i, 0) - mu) / (4 * sd), -1.0, 1.0)).epsilon(1e-12));
    CHECK(e(i, 1) == 1.0);
  }
}

TEST_CASE("categorical one-hot and mixed round trip") {
  std::vector<ColumnMeta> cols = {{"k", ColumnKind::categorical, {"a", "b", "c"}, false}};
  Matrix x(3, 1);
  x << 0, 1, 2;
  TableNormalizer t = TableNormalizer::fit(x, cols);
  CHECK(t.apply(x).row(1) == (RowVector(3) << 0, 1, 0).finished());

  nn::Rng rng(6);
  TabularDataset toy = gaussian_mixture_toy(1000, rng);
  TableNormalizer tn = TableNormalizer::fit(toy.x, toy.columns);
  double weight_sum = std::accumulate(tn.column(0).gmm.weights.begin(), tn.column(0).gmm.weights.end(), 0.0);
  CHECK(weight_sum == doctest::Approx(1.0).epsilon(1e-9));
  Matrix enc = tn.apply(toy.x);
  Matrix back = tn.invert(enc);
  double worst = 0;
  for (const auto& s : tn.spans()) {
    if (s.kind != EncodedSpan::Kind::scalar) continue;
    for (Eigen::Index i = 0; i < enc.rows(); ++i) {
      if (std::abs(enc(i, s.offset)) < 1.0) worst = std::max(worst, std::abs(back(i, s.column) - toy.x(i, s.column)));
    }
  }
  CHECK(worst < 1e-6);
  CHECK(back.col(1) == toy.x.col(1));
  CHECK(enc.maxCoeff() <= 1.0);
  CHECK(enc.minCoeff() >= -1.0);
}

TEST_CASE("mixture fit recovers separated modes and collapses constants") {
  nn::Rng rng(8);
  std::vector<double> xs;
  std::normal_distribution<double> g(0, 1);
  for (int i = 0; i < 2000; ++i) xs.push_back(i % 2 ? 5 + 0.3 * g(rng) : -5 + 0.3 * g(rng));
  GaussianMixture m = fit_gmm(xs);
  int near_lo = 0, near_hi = 0;
  for (int j = 0; j < m.modes(); ++j) {
    near_lo += std::abs(m.means[static_cast<std::size_t>(j)] + 5) < 0.5;
    near_hi += std::abs(m.means[static_cast<std::size_t>(j)] - 5) < 0.5;
  }
  CHECK(near_lo >= 1);
  CHECK(near_hi >= 1);
  CHECK(m.assign(-5) != m.assign(5));
  std::vector<double> constant(100, 3.0);
  GaussianMixture c = fit_gmm(constant);
  CHECK(c.modes() == 1);
  CHECK(c.means[0] == 3.0);
}

TEST_CASE("BIC picks the mode count") {
  nn::Rng rng(9);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> two, one;
  for (int i = 0; i < 3000; ++i) {
    two.push_back(i % 2 ? 3 + 0.5 * g(rng) : -3 + 0.5 * g(rng));
    one.push_back(g(rng));
  }
  CHECK(fit_gmm(two).modes() == 2);
  CHECK(fit_gmm(one).modes() == 1);
  GmmOptions full;
  full.select_modes = false;
  CHECK(fit_gmm(one, full).modes() > 1);
}

TEST_CASE("conditional vectors") {
  DiscreteBlock lb = label_block({0, 1, 1, 0}, 2);
  ConditionalSampler labels({lb});
  nn::Rng rng(1);
  ConditionalVector cv = build_conditional_vector(labels, rng, 1);
  CHECK(cv.block == 0);
  CHECK(cv.category == 1);
  CHECK(cv.onehot == (RowVector(2) << 0, 1).finished());
  CHECK_THROWS_AS(ConditionalSampler({}), DataError);

  DiscreteBlock b;
  b.name = "k";
  b.column = 0;
  b.width = 3;
  b.frequencies = {0.5, 0.3, 0.2};
  ConditionalSampler s({b});
  const int draws = 100000;
  std::vector<double> counts(3, 0);
  for (int i = 0; i < draws; ++i) {
    ConditionalVector c = s.sample(rng);
    CHECK_MESSAGE(c.onehot.sum() == 1.0, "exactly one active entry");
    counts[static_cast<std::size_t>(c.category)] += 1;
  }
  double chi2 = 0;
  for (int k = 0; k < 3; ++k) {
    const double e = draws * b.frequencies[static_cast<std::size_t>(k)];
    chi2 += (counts[static_cast<std::size_t>(k)] - e) * (counts[static_cast<std::size_t>(k)] - e) / e;
  }
  // 99.9% quantile of chi-square with 2 degrees of freedom.
  CHECK(chi2 < 13.82);
  CHECK_THROWS_AS(build_conditional_vector(s, rng, 0), DataError);
}

TEST_CASE("noise injection") {
  nn::Rng rng(3);
  TabularDataset ds;
  ds.x = nn::gaussian(10, 100, rng);
  ds.columns.resize(100);
  ds.n_classes = 2;
  ds.y.assign(10, 1);
  fill_defaults(ds);
  TabularDataset half = inject_noise_features(ds, 0.5, rng);
  CHECK(half.cols() == 200);
  CHECK(half.columns[150].noise);
  CHECK(!half.columns[50].noise);
  CHECK(half.y == ds.y);
  CHECK(half.x.leftCols(100) == ds.x);
  CHECK(inject_noise_features(ds, 0.2, rng).cols() == 125);
  CHECK(noise_column_count(100, 0.33) == 50);
  CHECK_THROWS_AS(inject_noise_features(ds, 0.0, rng), DataError);
}

TEST_CASE("planted benchmark correlations") {
  nn::Rng rng(10);
  TprOptions opt;
  opt.weights = {1.0};
  TprBenchmark b = make_tpr_benchmark(1000, 8, {0}, rng, opt);
  const Eigen::VectorXd y = labels_as_vector(b.ds.y);
  CHECK(correlation(b.ds.x.col(0), y) > 0.7);
  for (int j = 1; j < 8; ++j) CHECK(std::abs(correlation(b.ds.x.col(j), y)) < 0.1);
  CHECK_THROWS_AS(make_tpr_benchmark(10, 3, {5}, rng), DataError);
  CHECK_THROWS_AS(make_tpr_benchmark(10, 3, {}, rng), DataError);

  auto path = scratch("gt.json");
  write_ground_truth({1, 4, 7}, path);
  CHECK(read_ground_truth(path) == std::vector<int>{1, 4, 7});
}

TEST_CASE("planted benchmark identifiability by single-feature mutual information") {
  int ok = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    nn::Rng rng(1000 + t);
    std::vector<int> all(20);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<int> rel(all.begin(), all.begin() + 1 + t % 4);
    TprBenchmark b = make_tpr_benchmark(1000, 20, rel, rng);
    std::set<int> r(b.relevant.begin(), b.relevant.end());
    double min_in = 1e9, max_out = -1;
    for (int j = 0; j < 20; ++j) {
      const double mi = binned_mutual_information(b.ds.x.col(j), b.ds.y, 2, 10);
      if (r.count(j)) {
        min_in = std::min(min_in, mi);
      } else {
        max_out = std::max(max_out, mi);
      }
    }
    ok += min_in > max_out;
  }
  CHECK(static_cast<double>(ok) / trials > 0.95);
}

TEST_CASE("generators are deterministic under seed") {
  nn::Rng a(77), b(77);
  CHECK(gaussian_mixture_toy(50, a).x == gaussian_mixture_toy(50, b).x);
  TabularDataset d1 = rendered_digits(30, a), d2 = rendered_digits(30, b);
  CHECK(d1.x == d2.x);
  CHECK(d1.cols() == 256);
  CHECK(d1.x.maxCoeff() <= 1.0);
  CHECK(d1.x.minCoeff() >= -1.0);
}
