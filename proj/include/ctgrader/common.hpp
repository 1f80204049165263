#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctg {

namespace fs = std::filesystem;

// Exit-code mapping: ConfigError/ArgumentError/DataError -> 1, CLI usage -> 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when a training run produces a non-finite loss; grid cells catch it.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kNumClasses = 4;

enum class Severity : int { mild = 0, moderate = 1, severe = 2, critical = 3 };

std::string to_string(Severity s);
// Accepts word tokens (case-insensitive) and numeric aliases "0".."3".
Severity parse_severity(const std::string& token);

enum class Split { train, internal_val, unseen_val, test };

std::string to_string(Split s);
Split parse_split(const std::string& token);

std::string lower(std::string s);
std::string trim(std::string s);
std::vector<std::string> split_csv_line(const std::string& line);

// Minimal CSV: no quoting, fields must not contain commas or newlines.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(const fs::path& path);
void write_csv(const fs::path& path, const CsvTable& table);

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, const std::string& content);

std::string iso8601_now();

}  // namespace ctg
