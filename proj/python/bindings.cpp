// Python bindings: tensors travel as float64 numpy arrays keyed by their
// canonical names; configurations travel as JSON-compatible dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fedsp/checkpoint.hpp"
#include "fedsp/config.hpp"
#include "fedsp/distill.hpp"
#include "fedsp/experiment.hpp"
#include "fedsp/federation.hpp"
#include "fedsp/report.hpp"

namespace py = pybind11;
using namespace fedsp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict to_dict(const std::vector<NamedTensor>& tensors) {
  py::dict d;
  for (const auto& nt : tensors) d[py::str(nt.name)] = to_numpy(nt.tensor);
  return d;
}

std::vector<NamedTensor> from_dict(const py::dict& d) {
  std::vector<NamedTensor> out;
  for (const auto& [k, v] : d) out.push_back({py::cast<std::string>(k), from_numpy(py::cast<Array>(v))});
  return out;
}

nlohmann::json to_json_value(const py::handle& obj) {
  return nlohmann::json::parse(py::cast<std::string>(py::module_::import("json").attr("dumps")(obj)));
}

py::object from_json_value(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

RunConfig config_of(const py::dict& d) { return config_from_json(to_json_value(d)); }

py::dict round_dict(const RoundRecord& r) {
  py::dict d;
  d["round"] = r.round;
  d["train_loss_mean"] = r.train_loss_mean ? py::cast(*r.train_loss_mean) : py::none();
  d["eval_acc"] = r.eval_acc;
  d["uploaded_bytes"] = r.uploaded_bytes;
  d["downloaded_bytes"] = r.downloaded_bytes;
  d["wall_ms"] = r.wall_ms;
  return d;
}

}  // namespace

PYBIND11_MODULE(_fedsp, m) {
  m.doc() = "Federated soft-prompt exchange simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MissingCheckpoint>(m, "MissingCheckpoint", PyExc_FileNotFoundError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("default_config", [] { return from_json_value(to_json(RunConfig{})); },
        "Default run configuration as a dict.");
  m.def("resolve_config", [](const py::dict& d) {
        auto cfg = config_of(d);
        cfg.validate();
        return from_json_value(to_json(cfg));
      }, py::arg("config"), "Fills defaults and validates; raises ConfigError.");

  m.def("pretrain", [](const py::dict& d) {
        const auto cfg = config_of(d);
        py::gil_scoped_release release;
        return run_pretrain(cfg).losses;
      }, py::arg("config"), "Pretrains the global model; returns the loss curve.");
  m.def("distill", [](const py::dict& d) {
        const auto cfg = config_of(d);
        py::gil_scoped_release release;
        return run_distill(cfg).curve;
      }, py::arg("config"), "Distills the auxiliary model; returns the KD loss curve.");
  m.def("run", [](const py::dict& d) {
        const auto cfg = config_of(d);
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(cfg);
        }
        const auto per_round = is_federated(cfg.train_mode()) ? sample_clients(cfg.clients, cfg.client_fraction, 0).size() : 0;
        py::dict out;
        out["summary"] = from_json_value(summary_json(cfg, r.metrics.summary, per_round));
        py::list rounds;
        for (const auto& rec : r.metrics.rounds) rounds.append(round_dict(rec));
        out["rounds"] = rounds;
        out["prompts"] = to_dict(r.prompts.named_parameters());
        return out;
      }, py::arg("config"), "Runs one training mode; writes the run directory and returns metrics.");
  m.def("render_report", [](const std::vector<std::filesystem::path>& roots) { return render_report(collect_runs(roots)); },
        py::arg("roots"));

  m.def("load_tensors", [](const std::filesystem::path& p) { return to_dict(load_tensors(p)); }, py::arg("path"));
  m.def("save_tensors", [](const std::filesystem::path& p, const py::dict& d) { save_tensors(p, from_dict(d)); },
        py::arg("path"), py::arg("tensors"));
  m.def("encode_tensors", [](const py::dict& d) {
        const auto bytes = encode_tensors(from_dict(d));
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      }, py::arg("tensors"));
  m.def("decode_tensors", [](const py::bytes& b) {
        const std::string s = b;
        return to_dict(decode_tensors(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
      }, py::arg("data"));

  m.def("aggregate_prompts", [](const std::vector<py::dict>& sets, const std::vector<double>& weights) {
        if (sets.size() != weights.size()) throw std::invalid_argument("one weight per prompt set");
        std::vector<std::pair<PromptSet, double>> updates;
        for (std::size_t i = 0; i < sets.size(); ++i) {
          const auto named = from_dict(sets[i]);
          updates.emplace_back(PromptSet::from_named(named), weights[i]);
        }
        return to_dict(aggregate_prompts(updates).named_parameters());
      }, py::arg("prompt_sets"), py::arg("weights"), "Weighted average of prompt sets.");
  m.def("init_prompts", [](std::size_t depth, std::size_t prefix_len, std::size_t d_model, std::uint64_t seed,
                           double stddev) {
        return to_dict(PromptSet::init_direct(depth, prefix_len, d_model, seed, stddev).named_parameters());
      }, py::arg("depth"), py::arg("prefix_len"), py::arg("d_model"), py::arg("seed") = 0, py::arg("stddev") = 0.02);
  m.def("kd_loss", [](const Array& teacher, const Array& student, const Array& proj) {
        return kd_loss(from_numpy(teacher), from_numpy(student), KdProjector{from_numpy(proj)}).item();
      }, py::arg("teacher_hidden"), py::arg("student_hidden"), py::arg("projector"));
  m.def("sample_clients", &sample_clients, py::arg("k_total"), py::arg("fraction"), py::arg("round_seed"));
  m.def("derive_seed", &derive_seed, py::arg("base"), py::arg("stream"));
  m.def("selected_first_block", [](std::size_t l, std::size_t n, const std::string& s) {
        return selected_first_block(l, n, parse_selection(s));
      }, py::arg("n_layers"), py::arg("n_aux"), py::arg("selection"));
  m.def("count_params", [](const std::string& kind, const py::dict& d, std::size_t aux_layers) {
        auto cfg = config_of(d);
        const auto tasks = tasks_for(cfg);
        const auto mc = cfg.model_config(tasks.corpus.tokenizer.vocab_size());
        const auto k = kind == "global_model" ? ParamKind::global_model
                       : kind == "aux_model"  ? ParamKind::aux_model
                       : kind == "prompt_payload" ? ParamKind::prompt_payload
                                                  : throw std::invalid_argument("unknown parameter kind " + kind);
        return count_params(k, mc, aux_layers);
      }, py::arg("kind"), py::arg("config"), py::arg("aux_layers") = 1);

  m.def("toy_tasks", [](std::uint64_t seed, const std::string& task) {
        ToyTaskOptions o;
        o.task = parse_rule(task);
        const auto t = make_toy_tasks(seed, o);
        py::list docs, probes;
        for (const auto& d : t.corpus.documents) docs.append(py::make_tuple(d.text, to_string(d.split)));
        for (const auto& p : t.probes) probes.append(py::make_tuple(p.context, p.options, p.gold));
        return py::make_tuple(docs, probes);
      }, py::arg("seed") = 0, py::arg("task") = "third", "(documents, probes) of the toy world.");
}
