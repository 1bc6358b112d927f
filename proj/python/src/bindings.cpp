#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "jst/experiment.hpp"
#include "jst/grad_check.hpp"
#include "jst/losses.hpp"
#include "jst/masking.hpp"
#include "jst/probe.hpp"
#include "jst/sampler.hpp"

namespace py = pybind11;
using namespace jst;

namespace {

std::vector<double> flatten(const std::vector<std::vector<double>>& rows, std::size_t& cols) {
  if (rows.empty()) throw Error("expected a non-empty [frames][vocab] table");
  cols = rows[0].size();
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged [frames][vocab] table");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return flat;
}

py::dict preset_dict(const ModelConfig& c) {
  py::dict d;
  d["model_dim"] = c.model_dim;
  d["ff_dim"] = c.ff_dim;
  d["layers_contrastive"] = c.n_layers_contrastive;
  d["layers_mlm"] = c.n_layers_mlm;
  d["heads"] = c.heads;
  d["codebook_size"] = c.codebook_size;
  d["vocab_size"] = c.vocab_size;
  d["parameters"] = parameter_count(c);
  return d;
}

}  // namespace

PYBIND11_MODULE(_jst, m) {
  m.doc() = "Joint speech-text pretraining core";
  m.attr("__version__") = JST_VERSION;
  py::register_exception<Error>(m, "JstError", PyExc_ValueError);

  m.def(
      "ctc_loss",
      [](const std::vector<std::vector<double>>& log_probs, const std::vector<int>& target, int blank) {
        std::size_t V = 0;
        auto flat = flatten(log_probs, V);
        return ctc_loss(Tensor::from({log_probs.size(), V}, std::move(flat)), target, blank).loss.item();
      },
      py::arg("log_probs"), py::arg("target"), py::arg("blank") = kBlankId,
      "CTC negative log-likelihood of target under [frames][vocab] log-probabilities.");
  m.def(
      "ctc_brute_force",
      [](const std::vector<std::vector<double>>& log_probs, const std::vector<int>& target, int blank) {
        std::size_t V = 0;
        const auto flat = flatten(log_probs, V);
        return ctc_brute_force(flat, log_probs.size(), V, target, blank);
      },
      py::arg("log_probs"), py::arg("target"), py::arg("blank") = kBlankId);
  m.def("ctc_collapse", [](const std::vector<int>& path, int blank) { return ctc_collapse(path, blank); },
        py::arg("path"), py::arg("blank") = kBlankId);

  m.def("language_weights", &language_weights, py::arg("counts"), py::arg("temperature") = kDefaultTemperature);
  m.def("lr_schedule", &lr_schedule, py::arg("step"), py::arg("warmup") = 40000, py::arg("peak") = 6e-4);
  m.def(
      "mask_text_spans",
      [](std::size_t len, std::size_t span, double ratio, std::uint64_t seed) {
        return mask_text_spans(len, span, ratio, seed).positions;
      },
      py::arg("length"), py::arg("span") = kTextSpan, py::arg("ratio") = kTextMaskRatio, py::arg("seed") = 0);
  m.def(
      "mask_speech_frames",
      [](std::size_t len, double p, std::size_t span, std::uint64_t seed) {
        return mask_speech_frames(len, p, span, seed).positions;
      },
      py::arg("length"), py::arg("start_prob") = kSpeechStartProb, py::arg("span") = kSpeechSpan,
      py::arg("seed") = 0);

  m.def("cer", &cer, py::arg("hypothesis"), py::arg("reference"));
  m.def(
      "edit_distance",
      [](const std::string& a, const std::string& b) { return edit_distance(utf8_decode(a), utf8_decode(b)); });
  m.def(
      "greedy_ctc_ids",
      [](const std::vector<std::vector<double>>& log_probs, int blank) {
        std::size_t V = 0;
        const auto flat = flatten(log_probs, V);
        return greedy_ctc_ids(flat, log_probs.size(), V, blank);
      },
      py::arg("log_probs"), py::arg("blank") = kBlankId);

  m.def("model_preset", [](const std::string& name) { return preset_dict(model_preset(name)); });
  m.def("model_preset_names", &model_preset_names);

  py::class_<CharVocab>(m, "CharVocab")
      .def_static(
          "build",
          [](const std::vector<std::pair<std::string, std::string>>& corpus, std::size_t size) {
            return CharVocab::build(corpus, size);
          },
          py::arg("corpus"), py::arg("size") = kDefaultVocabSize)
      .def("encode", &CharVocab::encode, py::arg("text"), py::arg("cap") = kDefaultTextCap)
      .def("decode", [](const CharVocab& v, const std::vector<int>& ids) { return v.decode(ids); })
      .def_property_readonly("size", &CharVocab::size)
      .def_property_readonly("used", &CharVocab::used);

  m.def(
      "pretrain",
      [](const std::string& config_text, const std::string& variant, std::uint64_t seed, std::size_t steps) {
        auto e = experiment_config_from(Config::parse(config_text, "<python>"));
        e.pretrain_steps = steps;
        const auto corpus = build_corpus(e, seed);
        std::vector<StepLosses> hist;
        py::gil_scoped_release release;
        pretrain(e, corpus, parse_variant(variant), seed, &hist);
        std::vector<double> trace;
        for (const auto& s : hist) trace.push_back(s.total);
        return trace;
      },
      py::arg("config") = "", py::arg("variant") = "mslam-ctc", py::arg("seed") = 1, py::arg("steps") = 10,
      "Pre-trains one desk variant and returns the per-step total loss.");
  m.def(
      "grad_check_step",
      [](const std::string& config_text, std::size_t n_params, std::uint64_t seed) {
        auto e = experiment_config_from(Config::parse(config_text, "<python>"));
        const auto corpus = build_corpus(e, seed);
        ModelConfig mc = e.model;
        mc.frame_dim = e.synth.frame_dim;
        Model model(mc, seed);
        TrainConfig tc = e.train;
        tc.quantizer_mode = QuantizerMode::kSoft;
        tc.seed = seed;
        Trainer trainer(model, corpus.vocab, corpus.data, tc);
        const auto batch = trainer.next_batch();
        std::mt19937_64 rng(seed);
        const auto tensors = model.params().tensors();
        std::vector<Coordinate> coords;
        for (std::size_t i = 0; i < n_params; ++i) {
          const auto& t = tensors[uniform_index(rng, tensors.size())];
          coords.push_back({t, uniform_index(rng, t.numel())});
        }
        return grad_check_coordinates([&] { return trainer.build_step(batch, 1).total; }, coords).max_rel_error;
      },
      py::arg("config") = "", py::arg("params") = 10, py::arg("seed") = 1,
      "Max relative finite-difference error of one desk pretraining step.");
}
