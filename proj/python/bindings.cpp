#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "tars/errors.hpp"
#include "tars/eval.hpp"
#include "tars/model.hpp"
#include "tars/pipeline.hpp"
#include "tars/surgery.hpp"
#include "tars/targeting.hpp"

namespace py = pybind11;
using namespace tars;

namespace {

py::array_t<float> to_numpy(std::span<const float> v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<float> to_numpy(const Matrix& m) {
  py::array_t<float> out({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  std::copy(m.view().begin(), m.view().end(), out.mutable_data());
  return out;
}

Vector from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw DimensionError("expected a 1-d array");
  return Vector(std::vector<float>(a.data(), a.data() + a.size()));
}

// JSON crosses the boundary as text; Python callers use the json module.
nlohmann::json parse_json(const std::string& s) { return nlohmann::json::parse(s); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Concept removal by replacing feed-forward rows with a reversed targeting vector";

  auto base = py::register_exception<Error>(m, "TarsError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());
  py::register_exception<RefinementError>(m, "RefinementError", base.ptr());
  py::register_exception<EmptySelectionError>(m, "EmptySelectionError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("lm_head_bias", &ModelConfig::lm_head_bias)
      .def("validate", &ModelConfig::validate)
      .def("scan_rows", &ModelConfig::scan_rows)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + to_json(c).dump() + ")"; });

  py::class_<ModelWeights>(m, "ModelWeights")
      .def_readonly("config", &ModelWeights::config)
      .def("hash", [](const ModelWeights& w) { return hash_hex(checkpoint_hash(w)); })
      .def("copy", [](const ModelWeights& w) { return ModelWeights(w); })
      .def("row",
           [](const ModelWeights& w, int layer, const std::string& kind, int row) {
             if (layer < 0 || layer >= static_cast<int>(w.layers.size())) {
               throw InputError("layer out of range");
             }
             const Matrix& p = w.layers[static_cast<std::size_t>(layer)].projection(
                 projection_kind_from_string(kind));
             if (row < 0 || row >= static_cast<int>(p.rows())) throw InputError("row out of range");
             return to_numpy(p.row(static_cast<std::size_t>(row)));
           },
           py::arg("layer"), py::arg("kind"), py::arg("row"))
      .def("__eq__", [](const ModelWeights& a, const ModelWeights& b) { return a == b; });

  m.def("init_weights", &init_weights, py::arg("config"), py::arg("seed"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("save_checkpoint", &save_checkpoint, py::arg("weights"), py::arg("path"));
  m.def(
      "logits",
      [](const ModelWeights& w, const std::vector<TokenId>& tokens) {
        return to_numpy(forward(w, tokens).logits);
      },
      py::arg("weights"), py::arg("tokens"), "Next-token logits, one row per position.");
  m.def(
      "lm_head_probe", [](const ModelWeights& w, py::array_t<float> v) {
        return to_numpy(lm_head_probe(w, from_numpy(v)).view());
      },
      py::arg("weights"), py::arg("v"));

  py::class_<TargetingSpec>(m, "TargetingSpec")
      .def(py::init<>())
      .def_readwrite("concept_token", &TargetingSpec::concept_token)
      .def_readwrite("prompt", &TargetingSpec::prompt)
      .def_readwrite("sigma", &TargetingSpec::sigma)
      .def_readwrite("sigma_rms_ratio", &TargetingSpec::sigma_rms_ratio)
      .def_readwrite("tau", &TargetingSpec::tau)
      .def_readwrite("batch_size", &TargetingSpec::batch_size)
      .def_readwrite("max_batches", &TargetingSpec::max_batches)
      .def_readwrite("min_candidates", &TargetingSpec::min_candidates)
      .def_readwrite("seed", &TargetingSpec::seed)
      .def_readwrite("threads", &TargetingSpec::threads);

  py::class_<TargetingVector>(m, "TargetingVector")
      .def_property_readonly("v_target", [](const TargetingVector& t) { return to_numpy(t.v_target.view()); })
      .def_property_readonly("v_approx", [](const TargetingVector& t) { return to_numpy(t.v_approx.view()); })
      .def_readonly("sigma", &TargetingVector::sigma)
      .def_readonly("p_target_before", &TargetingVector::p_target_before)
      .def_readonly("p_target_after", &TargetingVector::p_target_after)
      .def_readonly("retained", &TargetingVector::retained)
      .def_readonly("batches_run", &TargetingVector::batches_run)
      .def_readonly("warnings", &TargetingVector::warnings);

  m.def(
      "extract_approx_vector",
      [](const ModelWeights& w, const std::vector<TokenId>& prompt) {
        const auto a = extract_approx_vector(w, prompt);
        return py::make_tuple(to_numpy(a.v_approx.view()), a.argmax, a.p_max);
      },
      py::arg("weights"), py::arg("prompt"), "Returns (v_approx, argmax token, its probability).");
  m.def("build_targeting_vector", &build_targeting_vector, py::arg("weights"), py::arg("spec"),
        py::call_guard<py::gil_scoped_release>());
  m.def("load_targeting_vector", &load_targeting_vector, py::arg("path"));

  py::class_<ScanHit>(m, "ScanHit")
      .def_property_readonly("layer", [](const ScanHit& h) { return h.location.layer; })
      .def_property_readonly("kind", [](const ScanHit& h) { return std::string(to_string(h.location.kind)); })
      .def_property_readonly("row", [](const ScanHit& h) { return h.location.row; })
      .def_readonly("score", &ScanHit::score)
      .def("__repr__", [](const ScanHit& h) {
        return "ScanHit(" + std::to_string(h.location.layer) + ", " + to_string(h.location.kind) + ", " +
               std::to_string(h.location.row) + ", " + std::to_string(h.score) + ")";
      });

  m.def(
      "scan",
      [](const ModelWeights& w, py::array_t<float> v, int threads) {
        return scan(w, from_numpy(v), threads).hits;
      },
      py::arg("weights"), py::arg("v_target"), py::arg("threads") = 1,
      "Every gate and up row ranked by cosine similarity to v_target.");
  m.def(
      "reversed_target",
      [](py::array_t<float> v, double amplitude) {
        return to_numpy(reversed_target(from_numpy(v), amplitude).view());
      },
      py::arg("v_target"), py::arg("amplitude") = 1.0);

  py::class_<EditRecord>(m, "EditRecord")
      .def_readonly("concept_id", &EditRecord::concept_id)
      .def_readonly("theta", &EditRecord::theta)
      .def_readonly("top_k", &EditRecord::top_k)
      .def_readonly("warnings", &EditRecord::warnings)
      .def_property_readonly("hash_before", [](const EditRecord& r) { return hash_hex(r.hash_before); })
      .def_property_readonly("hash_after", [](const EditRecord& r) { return hash_hex(r.hash_after); })
      .def_property_readonly("locations",
                             [](const EditRecord& r) {
                               py::list out;
                               for (const auto& e : r.edits) {
                                 out.append(py::make_tuple(e.location.layer, to_string(e.location.kind),
                                                           e.location.row));
                               }
                               return out;
                             })
      .def("to_json", [](const EditRecord& r) { return to_json(r).dump(); })
      .def("save", [](const EditRecord& r, const std::filesystem::path& p) { save_edit_record(r, p); });
  m.def("load_edit_record", &load_edit_record, py::arg("path"));

  m.def(
      "edit",
      [](const ModelWeights& w, py::array_t<float> v, std::optional<double> theta, std::optional<int> top_k,
         double amplitude, const std::string& concept_id) {
        const Vector target = from_numpy(v);
        ModelWeights edited = w;
        const auto hits = select_candidates(scan(w, target), theta, top_k);
        auto record = apply_edits(edited, hits, target, amplitude, concept_id, theta, top_k);
        return py::make_tuple(std::move(edited), std::move(record));
      },
      py::arg("weights"), py::arg("v_target"), py::kw_only(), py::arg("theta") = py::none(),
      py::arg("top_k") = py::none(), py::arg("amplitude") = 1.0, py::arg("concept_id") = "concept",
      "Scan, select with theta or top_k, and return (edited weights, edit record).");
  m.def(
      "revert",
      [](const ModelWeights& w, const EditRecord& r) {
        ModelWeights out = w;
        revert(out, r);
        return out;
      },
      py::arg("weights"), py::arg("record"));

  m.def(
      "kl_divergence",
      [](const ModelWeights& a, const ModelWeights& b, const std::vector<std::vector<TokenId>>& docs) {
        std::vector<CorpusDoc> corpus(docs.size());
        for (std::size_t i = 0; i < docs.size(); ++i) corpus[i].tokens = docs[i];
        const auto k = kl_divergence(a, b, corpus, "corpus");
        py::dict out;
        out["values"] = k.values;
        out["median"] = k.median;
        out["p05"] = k.p05;
        out["p95"] = k.p95;
        return out;
      },
      py::arg("base"), py::arg("edited"), py::arg("docs"),
      "Per-position KL(base || edited) with its median and 5th/95th percentiles.");
  m.def("percentile", &percentile, py::arg("values"), py::arg("q"));

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def_readonly("seed", &PipelineConfig::seed)
      .def_readonly("model", &PipelineConfig::model)
      .def_property_readonly("concepts",
                             [](const PipelineConfig& c) {
                               std::vector<std::string> ids;
                               for (const auto& p : c.concepts) ids.push_back(p.concept_id);
                               return ids;
                             })
      .def("targeting_spec",
           [](const PipelineConfig& c, const std::string& concept_id) { return c.plan(concept_id).targeting; })
      .def("tokenize",
           [](const PipelineConfig& c, const std::string& text) { return c.vocab().tokenize(text); })
      .def("decode", [](const PipelineConfig& c, const std::vector<TokenId>& ids) {
        return c.vocab().decode(ids);
      });
  m.def("load_config", &load_pipeline_config, py::arg("path"));
  m.def(
      "config_from_json",
      [](const std::string& text, const std::filesystem::path& base_dir) {
        return pipeline_config_from_json(parse_json(text), base_dir);
      },
      py::arg("text"), py::arg("base_dir") = std::filesystem::path("."));
  m.def(
      "causal_probability",
      [](const PipelineConfig& c, const ModelWeights& w, const std::string& concept_id,
         const std::string& language) {
        return causal_probability(w, c.corpus, c.vocab(), concept_id, language);
      },
      py::arg("config"), py::arg("weights"), py::arg("concept_id"), py::arg("language"));
  m.def(
      "train",
      [](const PipelineConfig& c) {
        TrainOutcome out;
        {
          py::gil_scoped_release release;
          out = run_train(c);
        }
        return py::make_tuple(std::move(out.weights), out.checkpoint);
      },
      py::arg("config"), "Generate the corpus, train and save; returns (weights, checkpoint path).");
}
