#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tars/model.hpp"

namespace tars {

struct RowLocation {
  int layer = 0;
  ProjectionKind kind = ProjectionKind::kGate;
  int row = 0;

  auto operator<=>(const RowLocation&) const = default;
};

struct ScanHit {
  RowLocation location;
  double score = 0.0;  // cosine similarity; -inf for an all-zero row

  bool operator==(const ScanHit&) const = default;
};

// Descending score, then layer ascending, gate before up, row ascending.
bool scan_order(const ScanHit& a, const ScanHit& b);

struct ScanResult {
  std::vector<ScanHit> hits;          // every gate and up row, in scan_order
  std::vector<RowLocation> zero_rows;  // rows scored with the -inf sentinel
};

// Cosine of v_target against every row of every gate and up projection.
// Work is split by (layer, kind); the merge sort makes the output independent
// of `threads`.
ScanResult scan(const ModelWeights& w, std::span<const float> v_target, int threads = 1);

// -amplitude * v / ||v||_3
Vector reversed_target(std::span<const float> v_target, double amplitude = 1.0);

// Exactly one selector: theta keeps scores strictly greater than theta; top_k
// keeps the first k hits.
std::vector<ScanHit> select_candidates(const ScanResult& scan, std::optional<double> theta,
                                       std::optional<int> top_k);

struct EditEntry {
  RowLocation location;
  Vector prior_row;
  double prior_score = 0.0;
};

struct EditRecord {
  std::string concept_id;
  std::optional<double> theta;
  std::optional<int> top_k;
  double amplitude = 1.0;
  Vector replacement;
  std::vector<EditEntry> edits;
  std::string timestamp;  // informational; excluded from hashed content
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;
  std::vector<std::string> warnings;
};

// Overwrites each hit's row with reversed_target(v_target, amplitude). Hits
// that land on a row edited by any record in `history` are applied but
// reported in EditRecord::warnings.
EditRecord apply_edits(ModelWeights& w, std::span<const ScanHit> hits,
                       std::span<const float> v_target, double amplitude,
                       const std::string& concept_id, std::optional<double> theta,
                       std::optional<int> top_k, std::span<const EditRecord> history = {});

// Restores the prior rows. Throws IntegrityError unless the weights hash to
// record.hash_after.
void revert(ModelWeights& w, const EditRecord& record);

// JSON document plus a container sidecar "<stem>.rows.tars" holding the
// replacement vector and prior rows at full precision.
void save_edit_record(const EditRecord& r, const std::filesystem::path& json_path);
EditRecord load_edit_record(const std::filesystem::path& json_path);
nlohmann::json to_json(const EditRecord& r);  // summary, without row data

std::string format_scan_table(std::span<const ScanHit> hits, std::size_t n);

}  // namespace tars
