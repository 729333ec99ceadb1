#include "tars/surgery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>
#include <set>
#include <sstream>

#include "parallel.hpp"
#include "tars/container.hpp"
#include "tars/errors.hpp"

namespace tars {

bool scan_order(const ScanHit& a, const ScanHit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.location < b.location;
}

ScanResult scan(const ModelWeights& w, std::span<const float> v_target, int threads) {
  const auto d = static_cast<std::size_t>(w.config.d_model);
  if (v_target.size() != d) throw DimensionError("scan: targeting vector has wrong dimension");
  const double v_norm = l2_norm(v_target);
  if (!(v_norm > 0)) throw DomainError("scan: targeting vector is zero");
  if (!all_finite(v_target)) throw DomainError("scan: targeting vector is not finite");

  const std::size_t n_blocks = w.layers.size() * 2;
  std::vector<std::vector<ScanHit>> blocks(n_blocks);
  detail::parallel_for(n_blocks, threads, [&](std::size_t b) {
    const int layer = static_cast<int>(b / 2);
    const auto kind = static_cast<ProjectionKind>(b % 2);
    const Matrix& m = w.layers[static_cast<std::size_t>(layer)].projection(kind);
    auto& out = blocks[b];
    out.reserve(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto row = m.row(r);
      const double n = l2_norm(row);
      double score = -std::numeric_limits<double>::infinity();
      if (n > 0) score = std::clamp(dot(row, v_target) / (n * v_norm), -1.0, 1.0);
      out.push_back({{layer, kind, static_cast<int>(r)}, score});
    }
    std::sort(out.begin(), out.end(), scan_order);
  });

  ScanResult result;
  result.hits.reserve(static_cast<std::size_t>(w.config.scan_rows()));
  for (auto& b : blocks) {
    const auto mid = result.hits.size();
    result.hits.insert(result.hits.end(), b.begin(), b.end());
    std::inplace_merge(result.hits.begin(), result.hits.begin() + static_cast<long>(mid),
                       result.hits.end(), scan_order);
  }
  for (const auto& h : result.hits) {
    if (std::isinf(h.score)) result.zero_rows.push_back(h.location);
  }
  return result;
}

Vector reversed_target(std::span<const float> v_target, double amplitude) {
  if (!(amplitude > 0)) throw DomainError("reversed_target: amplitude must be > 0");
  const double n3 = p_norm(v_target, 3.0);
  if (n3 == 0.0) throw DomainError("reversed_target: targeting vector is zero");
  std::vector<float> out(v_target.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(-amplitude * static_cast<double>(v_target[i]) / n3);
  }
  return Vector(std::move(out));
}

std::vector<ScanHit> select_candidates(const ScanResult& scan, std::optional<double> theta,
                                       std::optional<int> top_k) {
  if (theta.has_value() == top_k.has_value()) {
    throw UsageError("select exactly one of theta or top_k");
  }
  if (top_k) {
    if (*top_k < 0) throw UsageError("top_k must be >= 0");
    const auto k = std::min(static_cast<std::size_t>(*top_k), scan.hits.size());
    return {scan.hits.begin(), scan.hits.begin() + static_cast<long>(k)};
  }
  std::vector<ScanHit> out;
  for (const auto& h : scan.hits) {
    if (!(h.score > *theta)) break;
    out.push_back(h);
  }
  return out;
}

namespace {

std::string location_string(const RowLocation& l) {
  return "layer " + std::to_string(l.layer) + " " + to_string(l.kind) + " row " +
         std::to_string(l.row);
}

Matrix& projection_at(ModelWeights& w, const RowLocation& l) {
  if (l.layer < 0 || static_cast<std::size_t>(l.layer) >= w.layers.size() || l.row < 0 ||
      l.row >= w.config.d_ff) {
    throw InputError("edit location out of range: " + location_string(l));
  }
  return w.layers[static_cast<std::size_t>(l.layer)].projection(l.kind);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

EditRecord apply_edits(ModelWeights& w, std::span<const ScanHit> hits,
                       std::span<const float> v_target, double amplitude,
                       const std::string& concept_id, std::optional<double> theta,
                       std::optional<int> top_k, std::span<const EditRecord> history) {
  if (hits.empty()) throw EmptySelectionError("no candidate rows selected for editing");
  std::set<RowLocation> seen;
  for (const auto& h : hits) {
    projection_at(w, h.location);
    if (!seen.insert(h.location).second) {
      throw UsageError("duplicate edit location: " + location_string(h.location));
    }
  }

  EditRecord rec;
  rec.concept_id = concept_id;
  rec.theta = theta;
  rec.top_k = top_k;
  rec.amplitude = amplitude;
  rec.replacement = reversed_target(v_target, amplitude);
  rec.timestamp = utc_now();
  rec.hash_before = checkpoint_hash(w);

  for (const auto& h : hits) {
    for (const auto& prev : history) {
      for (const auto& e : prev.edits) {
        if (e.location == h.location) {
          rec.warnings.push_back("overwriting " + location_string(h.location) +
                                 " previously edited for concept '" + prev.concept_id + "'");
        }
      }
    }
    Matrix& m = projection_at(w, h.location);
    const auto r = static_cast<std::size_t>(h.location.row);
    const auto prior = m.row(r);
    rec.edits.push_back({h.location, Vector(std::vector<float>(prior.begin(), prior.end())),
                         h.score});
    m.set_row(r, rec.replacement);
  }
  rec.hash_after = checkpoint_hash(w);
  return rec;
}

void revert(ModelWeights& w, const EditRecord& record) {
  if (checkpoint_hash(w) != record.hash_after) {
    throw IntegrityError("revert: weights hash " + hash_hex(checkpoint_hash(w)) +
                         " does not match the edit record's post-edit hash " +
                         hash_hex(record.hash_after));
  }
  // Reverse order so a row listed twice across records would unwind correctly.
  for (auto it = record.edits.rbegin(); it != record.edits.rend(); ++it) {
    projection_at(w, it->location).set_row(static_cast<std::size_t>(it->location.row), it->prior_row);
  }
  if (checkpoint_hash(w) != record.hash_before) {
    throw IntegrityError("revert: restored weights do not match the pre-edit hash");
  }
}

nlohmann::json to_json(const EditRecord& r) {
  nlohmann::json edits = nlohmann::json::array();
  for (const auto& e : r.edits) {
    edits.push_back({{"layer", e.location.layer},
                     {"kind", to_string(e.location.kind)},
                     {"row", e.location.row},
                     {"prior_score", std::isinf(e.prior_score) ? nlohmann::json(nullptr)
                                                               : nlohmann::json(e.prior_score)}});
  }
  nlohmann::json j = {{"concept_id", r.concept_id},
                      {"amplitude", r.amplitude},
                      {"edits", edits},
                      {"timestamp", r.timestamp},
                      {"hash_before", hash_hex(r.hash_before)},
                      {"hash_after", hash_hex(r.hash_after)},
                      {"warnings", r.warnings}};
  j["theta"] = r.theta ? nlohmann::json(*r.theta) : nlohmann::json(nullptr);
  j["top_k"] = r.top_k ? nlohmann::json(*r.top_k) : nlohmann::json(nullptr);
  return j;
}

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& json_path) {
  auto p = json_path;
  p.replace_extension(".rows.tars");
  return p;
}

std::uint64_t parse_hex(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used, 16);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("bad hash '" + s + "' in edit record");
  }
}

}  // namespace

void save_edit_record(const EditRecord& r, const std::filesystem::path& json_path) {
  const auto sidecar = sidecar_path(json_path);
  container::Container c;
  c.meta = {{"kind", "edit_rows"}, {"concept_id", r.concept_id}};
  const auto d = r.replacement.dim();
  c.tensors.push_back({"replacement", {d}, r.replacement.values()});
  std::vector<float> prior;
  for (const auto& e : r.edits) prior.insert(prior.end(), e.prior_row.begin(), e.prior_row.end());
  c.tensors.push_back({"prior_rows", {r.edits.size(), d}, std::move(prior)});
  container::write_file(sidecar, container::serialize(c));

  nlohmann::json j = to_json(r);
  j["sidecar"] = sidecar.filename().string();
  container::write_file(json_path, j.dump(2) + "\n");
}

EditRecord load_edit_record(const std::filesystem::path& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(container::read_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(json_path.string() + ": " + e.what());
  }
  EditRecord r;
  std::filesystem::path sidecar;
  try {
    r.concept_id = j.at("concept_id").get<std::string>();
    if (!j.at("theta").is_null()) r.theta = j.at("theta").get<double>();
    if (!j.at("top_k").is_null()) r.top_k = j.at("top_k").get<int>();
    r.amplitude = j.at("amplitude").get<double>();
    r.timestamp = j.value("timestamp", "");
    r.hash_before = parse_hex(j.at("hash_before").get<std::string>());
    r.hash_after = parse_hex(j.at("hash_after").get<std::string>());
    r.warnings = j.value("warnings", std::vector<std::string>{});
    for (const auto& e : j.at("edits")) {
      EditEntry entry;
      entry.location = {e.at("layer").get<int>(),
                        projection_kind_from_string(e.at("kind").get<std::string>()),
                        e.at("row").get<int>()};
      entry.prior_score = e.at("prior_score").is_null()
                              ? -std::numeric_limits<double>::infinity()
                              : e.at("prior_score").get<double>();
      r.edits.push_back(std::move(entry));
    }
    sidecar = json_path.parent_path() / j.at("sidecar").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(json_path.string() + ": bad edit record: " + e.what());
  }
  const auto c = container::parse(container::read_file(sidecar));
  r.replacement = Vector(c.get("replacement").data);
  const auto& prior = c.get("prior_rows");
  const auto d = r.replacement.dim();
  if (prior.shape != std::vector<std::size_t>{r.edits.size(), d}) {
    throw IntegrityError(sidecar.string() + ": prior rows do not match the edit list");
  }
  for (std::size_t i = 0; i < r.edits.size(); ++i) {
    r.edits[i].prior_row = Vector(std::vector<float>(prior.data.begin() + static_cast<long>(i * d),
                                                     prior.data.begin() + static_cast<long>((i + 1) * d)));
  }
  return r;
}

std::string format_scan_table(std::span<const ScanHit> hits, std::size_t n) {
  std::ostringstream out;
  char line[96];
  std::snprintf(line, sizeof(line), "%4s  %5s  %4s  %6s  %9s\n", "rank", "layer", "kind", "row",
                "cosine");
  out << line;
  for (std::size_t i = 0; i < std::min(n, hits.size()); ++i) {
    const auto& h = hits[i];
    std::snprintf(line, sizeof(line), "%4zu  %5d  %4s  %6d  %9.6f\n", i + 1, h.location.layer,
                  to_string(h.location.kind), h.location.row, h.score);
    out << line;
  }
  return out.str();
}

}  // namespace tars
