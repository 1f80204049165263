#include "ctgrader/ingest.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <tuple>

namespace ctg {

namespace {

bool accepted_extension(const fs::path& p) {
  const std::string ext = lower(p.extension().string());
  return ext == ".jpg" || ext == ".jpeg";
}

// Sort key: files with a trailing digit run order numerically, the rest fall
// back behind them in plain lexicographic order. Full name breaks ties.
std::tuple<int, uint64_t, std::string> slice_sort_key(const fs::path& p) {
  const std::string stem = p.stem().string();
  size_t end = stem.size();
  size_t begin = end;
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
  if (begin == end) return {1, 0, p.filename().string()};
  // Clamp very long runs instead of overflowing.
  const std::string digits = stem.substr(begin, std::min<size_t>(end - begin, 18));
  return {0, std::stoull(digits), p.filename().string()};
}

int64_t count_scan_files(const fs::path& dir) {
  int64_t n = 0;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && accepted_extension(entry.path())) ++n;
  return n;
}

}  // namespace

std::vector<ScanVolume> discover_scans(const fs::path& root_dir, Split split) {
  if (!fs::exists(root_dir) || !fs::is_directory(root_dir))
    throw ConfigError("scan root does not exist: " + root_dir.string());

  std::vector<ScanVolume> scans;
  for (const auto& entry : fs::directory_iterator(root_dir)) {
    if (!entry.is_directory()) continue;
    ScanVolume scan;
    scan.scan_id = entry.path().filename().string();
    scan.split = split;
    for (const auto& file : fs::directory_iterator(entry.path()))
      if (file.is_regular_file() && accepted_extension(file.path()))
        scan.slice_paths.push_back(file.path());
    std::sort(scan.slice_paths.begin(), scan.slice_paths.end(),
              [](const fs::path& a, const fs::path& b) {
                return slice_sort_key(a) < slice_sort_key(b);
              });
    scan.n = static_cast<int64_t>(scan.slice_paths.size());
    if (scan.n == 0)
      std::cerr << "warning: scan folder '" << scan.scan_id
                << "' holds no images; excluded from training\n";
    scans.push_back(std::move(scan));
  }
  std::sort(scans.begin(), scans.end(),
            [](const ScanVolume& a, const ScanVolume& b) { return a.scan_id < b.scan_id; });
  return scans;
}

LabelLoadResult load_labels(const fs::path& label_file, const std::vector<ScanVolume>& scans) {
  const CsvTable table = read_csv(label_file);
  if (table.header.size() < 2 || lower(table.header[0]) != "scan_id" ||
      lower(table.header[1]) != "label")
    throw DataError("label file must have header scan_id,label: " + label_file.string());

  std::map<std::string, Severity> labels;
  for (const auto& row : table.rows) {
    if (row.size() < 2) throw DataError("malformed label row in " + label_file.string());
    if (labels.count(row[0]))
      throw DataError("duplicate scan_id in label file: '" + row[0] + "'");
    labels.emplace(row[0], parse_severity(row[1]));
  }

  LabelLoadResult result;
  for (const auto& scan : scans) {
    if (scan.split == Split::test) continue;
    auto it = labels.find(scan.scan_id);
    if (it == labels.end()) {
      result.unmatched_scans.push_back(scan.scan_id);
      continue;
    }
    result.labeled.push_back({scan, it->second});
  }
  return result;
}

Manifest build_manifest(const std::vector<ScanVolume>& scans) {
  Manifest m;
  m.rows.reserve(scans.size());
  for (const auto& scan : scans) m.rows.push_back({scan.scan_id, scan.n, scan.split});
  std::sort(m.rows.begin(), m.rows.end(), [](const ManifestRow& a, const ManifestRow& b) {
    return std::tie(a.split, a.scan_id) < std::tie(b.split, b.scan_id);
  });
  return m;
}

void write_manifest_csv(const fs::path& path, const Manifest& manifest) {
  CsvTable table;
  table.header = {"scan_id", "file_count", "split"};
  for (const auto& row : manifest.rows)
    table.rows.push_back({row.scan_id, std::to_string(row.file_count), to_string(row.split)});
  write_csv(path, table);
}

Manifest read_manifest_csv(const fs::path& path) {
  const CsvTable table = read_csv(path);
  if (table.header != std::vector<std::string>{"scan_id", "file_count", "split"})
    throw DataError("not a manifest CSV (bad header): " + path.string());
  Manifest m;
  for (const auto& row : table.rows) {
    if (row.size() < 3) throw DataError("malformed manifest row in " + path.string());
    m.rows.push_back({row[0], std::stoll(row[1]), parse_split(row[2])});
  }
  return m;
}

std::vector<ManifestDiscrepancy> verify_manifest(const Manifest& manifest,
                                                 const fs::path& root_dir) {
  std::vector<ManifestDiscrepancy> out;
  std::set<std::pair<std::string, std::string>> listed;
  for (const auto& row : manifest.rows) {
    const fs::path dir = root_dir / to_string(row.split) / row.scan_id;
    listed.emplace(to_string(row.split), row.scan_id);
    const int64_t actual = fs::is_directory(dir) ? count_scan_files(dir) : 0;
    if (actual != row.file_count) out.push_back({row.scan_id, row.file_count, actual});
  }
  // Scan folders on disk that the manifest does not know about.
  for (const Split split : {Split::train, Split::internal_val, Split::unseen_val, Split::test}) {
    const fs::path split_dir = root_dir / to_string(split);
    if (!fs::is_directory(split_dir)) continue;
    std::vector<std::pair<std::string, int64_t>> extras;
    for (const auto& entry : fs::directory_iterator(split_dir)) {
      if (!entry.is_directory()) continue;
      const std::string id = entry.path().filename().string();
      if (!listed.count({to_string(split), id}))
        extras.emplace_back(id, count_scan_files(entry.path()));
    }
    std::sort(extras.begin(), extras.end());
    for (const auto& [id, count] : extras) out.push_back({id, 0, count});
  }
  return out;
}

Dataset load_dataset(const fs::path& root) {
  Dataset ds;
  const auto train_scans = discover_scans(root / "train", Split::train);
  const auto val_scans = discover_scans(root / "unseen_val", Split::unseen_val);
  if (fs::is_directory(root / "test"))
    ds.test = discover_scans(root / "test", Split::test);

  const fs::path label_file = root / "labels.csv";
  if (!fs::exists(label_file))
    throw ConfigError("label file not found: " + label_file.string());

  std::vector<ScanVolume> labeled_splits = train_scans;
  labeled_splits.insert(labeled_splits.end(), val_scans.begin(), val_scans.end());
  LabelLoadResult labels = load_labels(label_file, labeled_splits);
  if (!labels.unmatched_scans.empty()) {
    std::string msg = "label file misses scans:";
    for (const auto& id : labels.unmatched_scans) msg += " '" + id + "'";
    throw DataError(msg);
  }
  for (auto& ls : labels.labeled) {
    if (ls.volume.n == 0) continue;  // empty folders stay out of training
    (ls.volume.split == Split::train ? ds.train : ds.unseen_val).push_back(std::move(ls));
  }
  return ds;
}

}  // namespace ctg
