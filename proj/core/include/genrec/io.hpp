#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "genrec/array.hpp"

namespace genrec {

// Little-endian binary stream helpers for versioned file formats.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);
  void magic(const char tag[4]);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void i64(int64_t v);
  void f64(double v);
  void str(const std::string& s);
  void array(const Array& a);
  void close();

 private:
  std::ofstream out_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);
  void expect_magic(const char tag[4]);
  uint32_t u32();
  uint64_t u64();
  int64_t i64();
  double f64();
  std::string str();
  Array array();

 private:
  std::ifstream in_;
  std::string path_;
};

// Shortest round-trippable decimal form of a double; metric files built from
// this reproduce bit-identically across reruns.
std::string format_double(double v);

// Step-series CSV with a fixed header; all numbers via format_double.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns);
  void row(const std::vector<double>& values);
  void close();

 private:
  std::ofstream out_;
  size_t n_cols_;
};

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);
void ensure_dir(const std::string& path);

// FNV-1a over a string; used for config hashes in run manifests.
uint64_t fnv1a(const std::string& s);

}  // namespace genrec
