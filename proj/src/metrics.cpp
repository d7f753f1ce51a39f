#include "xling/metrics.hpp"

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <sstream>

#include "xling/common.hpp"
#include "xling/serialize.hpp"

namespace xling {

namespace {

constexpr const char* kHeader = "run_id,step,metric,language,value,timestamp";

void check_field(const std::string& what, const std::string& value) {
  if (value.find_first_of(",\n\r") != std::string::npos) {
    throw ConfigError("metrics " + what + " '" + value + "' contains a comma or newline");
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

int64_t parse_int(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw IoError("metrics file has a malformed " + what + " field: '" + s + "'");
  }
  return static_cast<int64_t>(v);
}

double parse_value(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw IoError("metrics file has a malformed value field: '" + s + "'");
  }
  return v;
}

}  // namespace

MetricsWriter::MetricsWriter(std::string path, std::string run_id)
    : path_(std::move(path)), run_id_(std::move(run_id)) {
  check_field("run id", run_id_);
  std::error_code ec;
  const bool fresh =
      !std::filesystem::exists(path_, ec) || std::filesystem::file_size(path_, ec) == 0;
  out_.open(path_, std::ios::app);
  if (!out_) throw IoError("cannot open metrics file '" + path_ + "' for appending");
  if (fresh) out_ << kHeader << '\n';
}

void MetricsWriter::emit(int64_t step, const std::string& metric, double value) {
  emit(step, metric, "", value);
}

void MetricsWriter::emit(int64_t step, const std::string& metric, const std::string& language,
                         double value) {
  check_field("metric name", metric);
  check_field("language", language);
  out_ << run_id_ << ',' << step << ',' << metric << ',' << language << ','
       << format_metric_value(value) << ',' << static_cast<int64_t>(std::time(nullptr)) << '\n';
  if (!out_) throw IoError("write to metrics file '" + path_ + "' failed");
}

void MetricsWriter::flush() { out_.flush(); }

std::string format_metric_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw IoError("metrics file '" + path + "' does not start with the expected header");
  }
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 6) {
      throw IoError("metrics file '" + path + "' has a row with " + std::to_string(f.size()) +
                    " fields (expected 6)");
    }
    MetricsRecord r;
    r.run_id = f[0];
    r.step = parse_int(f[1], "step");
    r.metric = f[2];
    r.language = f[3];
    r.value = parse_value(f[4]);
    r.timestamp = parse_int(f[5], "timestamp");
    records.push_back(std::move(r));
  }
  return records;
}

uint64_t metrics_digest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw IoError("metrics file '" + path + "' does not start with the expected header");
  }
  uint64_t h = fnv1a(std::string());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cut = line.rfind(',');
    if (cut == std::string::npos) {
      throw IoError("metrics file '" + path + "' has a row without a timestamp column");
    }
    h = fnv1a(line.substr(0, cut), h);
    h = fnv1a(std::string(1, '\n'), h);
  }
  return h;
}

}  // namespace xling
