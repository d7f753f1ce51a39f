#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace xling {

// One row of experiment telemetry. `language` is empty for run-level
// metrics. Values are written with enough digits to round-trip a double;
// non-finite values appear as the explicit tokens nan / inf / -inf.
struct MetricsRecord {
  std::string run_id;
  int64_t step = 0;
  std::string metric;
  std::string language;
  double value = 0.0;
  int64_t timestamp = 0;  // unix seconds at emission
};

// Append-only CSV sink: one row per record, stable column order
// (run_id,step,metric,language,value,timestamp). Opening an existing
// nonempty file appends rows without repeating the header, so a resumed
// run continues the same file. Text fields must stay comma/newline-free.
class MetricsWriter {
 public:
  MetricsWriter(std::string path, std::string run_id);

  void emit(int64_t step, const std::string& metric, double value);
  void emit(int64_t step, const std::string& metric, const std::string& language, double value);
  void flush();

  const std::string& path() const { return path_; }
  const std::string& run_id() const { return run_id_; }

 private:
  std::string path_;
  std::string run_id_;
  std::ofstream out_;
};

// %.17g — shortest form that still round-trips every finite double.
std::string format_metric_value(double v);

// Parses a metrics CSV back into records. Malformed rows raise IoError.
std::vector<MetricsRecord> read_metrics(const std::string& path);

// Digest over every data row with the timestamp column dropped, so two
// runs of the same experiment compare equal regardless of wall clock.
uint64_t metrics_digest(const std::string& path);

}  // namespace xling
