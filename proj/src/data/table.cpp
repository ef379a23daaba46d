#include "icafs/data/table.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "icafs/nn/random.hpp"

namespace icafs::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  out.push_back(cell);
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size() && std::isfinite(out);
}

// Numeric category labels sort numerically, everything else lexicographically.
std::vector<std::string> ordered_categories(const std::set<std::string>& values) {
  std::vector<std::string> v(values.begin(), values.end());
  const bool numeric = std::all_of(v.begin(), v.end(), [](const std::string& s) {
    double d;
    return parse_double(s, d);
  });
  if (numeric) {
    std::stable_sort(v.begin(), v.end(), [](const std::string& a, const std::string& b) {
      double x, y;
      parse_double(a, x);
      parse_double(b, y);
      return x < y;
    });
  }
  return v;
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void TabularDataset::validate() const {
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || x.rows() != static_cast<Eigen::Index>(ids.size())) {
    throw DataError("dataset row counts disagree");
  }
  if (x.cols() != static_cast<Eigen::Index>(columns.size())) throw DataError("dataset column metadata mismatch");
  if (n_classes < 1) throw DataError("dataset needs at least one class");
  for (int v : y) {
    if (v < 0 || v >= n_classes) throw DataError("label outside [0, n_classes)");
  }
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].kind == ColumnKind::categorical) {
      if (columns[c].cardinality() < 2) throw DataError("categorical column '" + columns[c].name + "' needs >= 2 categories");
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double v = x(i, static_cast<Eigen::Index>(c));
        if (v < 0 || v >= columns[c].cardinality() || v != std::floor(v)) {
          throw DataError("invalid category index in column '" + columns[c].name + "'");
        }
      }
    }
  }
  if (!x.allFinite()) throw DataError("dataset holds non-finite values");
}

TabularDataset TabularDataset::select_rows(const std::vector<Eigen::Index>& rows) const {
  TabularDataset out;
  out.n_classes = n_classes;
  out.class_names = class_names;
  out.label_name = label_name;
  out.columns = columns;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    out.y.push_back(y[static_cast<std::size_t>(rows[i])]);
    out.ids.push_back(ids[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

std::vector<int> TabularDataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  for (int v : y) ++counts[static_cast<std::size_t>(v)];
  return counts;
}

void fill_defaults(TabularDataset& ds) {
  if (ds.ids.empty()) {
    ds.ids.resize(static_cast<std::size_t>(ds.x.rows()));
    std::iota(ds.ids.begin(), ds.ids.end(), 0);
  }
  if (ds.class_names.empty()) {
    for (int c = 0; c < ds.n_classes; ++c) ds.class_names.push_back(std::to_string(c));
  }
}

TabularDataset load_table(const std::filesystem::path& csv, const std::filesystem::path& schema_path) {
  std::ifstream sf(schema_path);
  if (!sf) throw DataError("missing schema file: " + schema_path.string());
  nlohmann::json schema;
  try {
    sf >> schema;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unreadable schema " + schema_path.string() + ": " + e.what());
  }
  if (!schema.is_object()) throw DataError("schema must be a JSON object");

  std::ifstream in(csv);
  if (!in) throw DataError("missing data file: " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset");
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  std::set<std::string> schema_names, header_names(header.begin(), header.end());
  for (auto it = schema.begin(); it != schema.end(); ++it) schema_names.insert(it.key());
  if (header_names.size() != header.size()) throw DataError("duplicate column names in header");
  if (schema_names != header_names) throw DataError("header does not match schema columns");

  int label_col = -1;
  std::vector<ColumnKind> kinds(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& entry = schema.at(header[c]);
    const std::string kind = entry.value("kind", "continuous");
    if (kind == "continuous") {
      kinds[c] = ColumnKind::continuous;
    } else if (kind == "categorical") {
      kinds[c] = ColumnKind::categorical;
    } else {
      throw DataError("unknown column kind '" + kind + "' for " + header[c]);
    }
    if (entry.value("label", false)) {
      if (label_col >= 0) throw DataError("schema names more than one label column");
      label_col = static_cast<int>(c);
    }
  }
  if (label_col < 0) throw DataError("schema names no label column");

  std::vector<std::vector<std::string>> cells;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto parts = split_csv_line(line);
    if (parts.size() != header.size()) {
      throw DataError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) + " cells, got " +
                      std::to_string(parts.size()));
    }
    for (std::size_t c = 0; c < parts.size(); ++c) {
      parts[c] = trim(parts[c]);
      double d;
      if (kinds[c] == ColumnKind::continuous && static_cast<int>(c) != label_col && !parse_double(parts[c], d)) {
        throw DataError("row " + std::to_string(row) + ": unparseable value '" + parts[c] + "' in column " + header[c]);
      }
      if (parts[c].empty()) throw DataError("row " + std::to_string(row) + ": empty cell in column " + header[c]);
    }
    cells.push_back(std::move(parts));
  }
  if (cells.empty()) throw DataError("empty dataset");

  auto categories_of = [&](std::size_t c) {
    std::set<std::string> values;
    for (const auto& r : cells) values.insert(r[c]);
    return ordered_categories(values);
  };

  TabularDataset ds;
  ds.label_name = header[static_cast<std::size_t>(label_col)];
  ds.class_names = categories_of(static_cast<std::size_t>(label_col));
  ds.n_classes = static_cast<int>(ds.class_names.size());
  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (static_cast<int>(c) == label_col) continue;
    feature_cols.push_back(c);
    ColumnMeta m;
    m.name = header[c];
    m.kind = kinds[c];
    if (m.kind == ColumnKind::categorical) m.categories = categories_of(c);
    ds.columns.push_back(std::move(m));
  }
  ds.x.resize(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(feature_cols.size()));
  std::vector<std::map<std::string, int>> index(feature_cols.size());
  for (std::size_t j = 0; j < feature_cols.size(); ++j) {
    for (std::size_t k = 0; k < ds.columns[j].categories.size(); ++k) index[j][ds.columns[j].categories[k]] = static_cast<int>(k);
  }
  std::map<std::string, int> label_index;
  for (std::size_t k = 0; k < ds.class_names.size(); ++k) label_index[ds.class_names[k]] = static_cast<int>(k);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      const std::string& cell = cells[i][feature_cols[j]];
      double v = 0;
      if (ds.columns[j].kind == ColumnKind::categorical) {
        v = index[j].at(cell);
      } else {
        parse_double(cell, v);
      }
      ds.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
    ds.y.push_back(label_index.at(cells[i][static_cast<std::size_t>(label_col)]));
  }
  fill_defaults(ds);
  ds.validate();
  return ds;
}

void save_table(const TabularDataset& ds, const std::filesystem::path& csv, const std::filesystem::path& schema_path) {
  ds.validate();
  for (const auto& p : {csv, schema_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream out(csv);
  if (!out) throw DataError("cannot write " + csv.string());
  for (const auto& c : ds.columns) out << quote(c.name) << ',';
  out << quote(ds.label_name) << '\n';
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.cols(); ++j) {
      const auto& meta = ds.columns[static_cast<std::size_t>(j)];
      if (meta.kind == ColumnKind::categorical) {
        out << quote(meta.categories[static_cast<std::size_t>(ds.x(i, j))]) << ',';
      } else {
        out << format_double(ds.x(i, j)) << ',';
      }
    }
    const auto label = static_cast<std::size_t>(ds.y[static_cast<std::size_t>(i)]);
    out << quote(label < ds.class_names.size() ? ds.class_names[label] : std::to_string(label)) << '\n';
  }
  nlohmann::ordered_json schema;
  for (const auto& c : ds.columns) {
    schema[c.name] = {{"kind", c.kind == ColumnKind::continuous ? "continuous" : "categorical"}, {"label", false}};
  }
  schema[ds.label_name] = {{"kind", "categorical"}, {"label", true}};
  std::ofstream sf(schema_path);
  if (!sf) throw DataError("cannot write " + schema_path.string());
  sf << schema.dump(2) << '\n';
}

TrainTest stratified_split(const TabularDataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw DataError("test fraction must lie in (0, 1)");
  nn::Rng rng = nn::derive_rng(seed, {0x5917});
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(ds.n_classes));
  for (Eigen::Index i = 0; i < ds.rows(); ++i) by_class[static_cast<std::size_t>(ds.y[static_cast<std::size_t>(i)])].push_back(i);
  std::vector<Eigen::Index> train, test;
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
    test.insert(test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  if (train.empty() || test.empty()) throw DataError("split leaves an empty part");
  return {ds.select_rows(train), ds.select_rows(test)};
}

}  // namespace icafs::data
