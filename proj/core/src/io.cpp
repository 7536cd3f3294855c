#include "genrec/io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace genrec {

BinaryWriter::BinaryWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path);
}

void BinaryWriter::magic(const char tag[4]) { out_.write(tag, 4); }
void BinaryWriter::u32(uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::u64(uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::i64(int64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::array(const Array& a) {
  u32(static_cast<uint32_t>(a.ndim()));
  for (int i = 0; i < a.ndim(); ++i) u32(static_cast<uint32_t>(a.dim(i)));
  out_.write(reinterpret_cast<const char*>(a.data()),
             static_cast<std::streamsize>(a.size() * static_cast<int64_t>(sizeof(double))));
}

void BinaryWriter::close() {
  out_.close();
  if (!out_.good()) throw std::runtime_error("write failed: " + path_);
}

BinaryReader::BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw std::runtime_error("cannot open for reading: " + path);
}

void BinaryReader::expect_magic(const char tag[4]) {
  char buf[4];
  in_.read(buf, 4);
  if (!in_ || std::memcmp(buf, tag, 4) != 0)
    throw std::runtime_error("bad magic bytes in " + path_);
}

uint32_t BinaryReader::u32() {
  uint32_t v;
  in_.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return v;
}

uint64_t BinaryReader::u64() {
  uint64_t v;
  in_.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return v;
}

int64_t BinaryReader::i64() {
  int64_t v;
  in_.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return v;
}

double BinaryReader::f64() {
  double v;
  in_.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return v;
}

std::string BinaryReader::str() {
  uint64_t n = u64();
  std::string s(n, '\0');
  in_.read(s.data(), static_cast<std::streamsize>(n));
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return s;
}

Array BinaryReader::array() {
  uint32_t nd = u32();
  std::vector<int> shape(nd);
  for (auto& d : shape) d = static_cast<int>(u32());
  Array a(shape);
  in_.read(reinterpret_cast<char*>(a.data()),
           static_cast<std::streamsize>(a.size() * static_cast<int64_t>(sizeof(double))));
  if (!in_) throw std::runtime_error("truncated file: " + path_);
  return a;
}

std::string format_double(double v) {
  char buf[32];
  // %.17g always round-trips; trim to the shortest form that still does.
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& columns)
    : out_(path), n_cols_(columns.size()) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  for (size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
  out_ << "\n";
}

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != n_cols_) throw std::invalid_argument("csv row width mismatch");
  for (size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_double(values[i]);
  out_ << "\n";
}

void CsvWriter::close() { out_.close(); }

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

void ensure_dir(const std::string& path) { std::filesystem::create_directories(path); }

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace genrec
