#pragma once

#include <string>
#include <vector>

#include "ctgrader/common.hpp"

namespace ctg {

// One patient scan: the folder's JPEG slices in deterministic order. The file
// count n stands in for the volume depth.
struct ScanVolume {
  std::string scan_id;
  std::vector<fs::path> slice_paths;
  int64_t n = 0;
  Split split = Split::train;
};

struct LabeledScan {
  ScanVolume volume;
  Severity label = Severity::mild;
};

struct ManifestRow {
  std::string scan_id;
  int64_t file_count = 0;
  Split split = Split::train;
};

struct Manifest {
  std::vector<ManifestRow> rows;
};

struct ManifestDiscrepancy {
  std::string scan_id;
  int64_t expected = 0;  // manifest count
  int64_t actual = 0;    // on-disk count
};

// Every immediate subdirectory of root_dir is one scan. Only .jpg/.jpeg files
// (case-insensitive) count; slices are ordered by the longest trailing digit
// run of the stem, falling back to the full name. Output is sorted by scan_id,
// so results do not depend on filesystem enumeration order.
std::vector<ScanVolume> discover_scans(const fs::path& root_dir, Split split);

struct LabelLoadResult {
  std::vector<LabeledScan> labeled;
  // Train/validation scans with no row in the label file.
  std::vector<std::string> unmatched_scans;
};

// CSV with header scan_id,label; word and numeric label tokens both accepted.
// Duplicate scan ids and unknown tokens are fatal. Test-split scans need no
// labels and are skipped.
LabelLoadResult load_labels(const fs::path& label_file, const std::vector<ScanVolume>& scans);

Manifest build_manifest(const std::vector<ScanVolume>& scans);
void write_manifest_csv(const fs::path& path, const Manifest& manifest);
Manifest read_manifest_csv(const fs::path& path);

// Empty result iff every on-disk count matches the manifest. Scans missing on
// disk report actual=0; extra on-disk scans report expected=0.
std::vector<ManifestDiscrepancy> verify_manifest(const Manifest& manifest,
                                                 const fs::path& root_dir);

// Dataset layout root/<split>/<scan_id>/*.jpg with labels.csv at the root.
struct Dataset {
  std::vector<LabeledScan> train;
  std::vector<LabeledScan> unseen_val;
  std::vector<ScanVolume> test;
};

Dataset load_dataset(const fs::path& root);

}  // namespace ctg
