// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "asrcl/cli.hpp"
#include "asrcl/errors.hpp"
#include "asrcl/losses.hpp"

namespace py = pybind11;
using namespace asrcl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  Tensor t({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))});
  std::copy(a.data(), a.data() + a.size(), t.values.begin());
  return t;
}

Array to_array(const Tensor& t) {
  Array a({t.rows(), t.cols()});
  std::copy(t.values.begin(), t.values.end(), a.mutable_data());
  return a;
}

/// Evaluates a loss of one differentiable input; returns the value, or
/// (value, gradient) when asked.
py::object run_loss(const Array& x, bool with_grad, const std::function<Var(const Var&)>& fn) {
  Tape tape;
  const Var in = tape.input(to_tensor(x));
  const Var loss = fn(in);
  if (!with_grad) return py::float_(loss.item());
  tape.backward(loss);
  return py::make_tuple(loss.item(), to_array(in.grad()));
}

py::dict example_to_dict(const PairedExample& e) {
  py::dict d;
  d["id"] = e.id;
  d["clean"] = e.clean;
  d["asr"] = e.asr;
  d["label"] = e.label;
  d["scenario"] = e.scenario;
  d["action"] = e.action;
  d["wer"] = e.wer;
  return d;
}

}  // namespace

PYBIND11_MODULE(_asrcl, m) {
  m.doc() = "Contrastive pre-training and self-distilled fine-tuning for noisy transcripts.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  m.def("wer", &wer, py::arg("reference"), py::arg("hypothesis"));
  m.def(
      "align_words",
      [](const std::string& ref, const std::string& hyp) {
        const EditCounts c = align_words(ref, hyp);
        py::dict d;
        d["substitutions"] = c.substitutions;
        d["deletions"] = c.deletions;
        d["insertions"] = c.insertions;
        d["reference_length"] = c.reference_length;
        return d;
      },
      py::arg("reference"), py::arg("hypothesis"));
  m.def(
      "bucket_name",
      [](double w, const std::string& scheme) {
        const WerBuckets b = WerBuckets::named(scheme, {});
        return b.intervals()[b.index_of(w)].name;
      },
      py::arg("wer"), py::arg("scheme") = "google", "Bucket of a WER value under 'google' or 'wav2vec' intervals.");

  m.def(
      "toy_corpus",
      [](std::size_t size, std::uint64_t seed, double noise_median, double label_noise) {
        const auto ex = noisy_toy_corpus({size, seed, label_noise}, noise_median);
        py::list out;
        for (const auto& e : ex) out.append(example_to_dict(e));
        return out;
      },
      py::arg("size") = 1000, py::arg("seed") = 7, py::arg("noise_median") = 0.25, py::arg("label_noise") = 0.0);

  m.def(
      "add_noise",
      [](const std::vector<std::string>& sentences, double target_wer, double spread, std::uint64_t seed) {
        NoiseConfig cfg;
        cfg.target_wer_median = target_wer;
        cfg.wer_spread = spread;
        cfg.seed = seed;
        const NoiseChannel ch(sentences, cfg);
        Rng rng(seed);
        std::vector<std::string> out;
        for (const auto& s : sentences) out.push_back(ch.apply(s, rng));
        return out;
      },
      py::arg("sentences"), py::arg("target_wer") = 0.25, py::arg("spread") = 1.0, py::arg("seed") = 1,
      "Runs every sentence through a noise channel built from the sentences themselves.");

  m.def(
      "pair_contrastive_loss",
      [](const Array& clean, const Array& asr, double tau) {
        Tape tape;
        return pair_contrastive_loss({tape.constant(to_tensor(clean)), tape.constant(to_tensor(asr))}, tau).item();
      },
      py::arg("clean"), py::arg("asr"), py::arg("tau") = 0.2);
  m.def(
      "hard_contrastive_loss",
      [](const Array& reps, const std::vector<int>& labels, double tau, bool with_grad) {
        return run_loss(reps, with_grad, [&](const Var& x) { return hard_contrastive_loss(x, labels, tau); });
      },
      py::arg("reps"), py::arg("labels"), py::arg("tau") = 0.2, py::arg("with_grad") = false);
  m.def(
      "soft_contrastive_loss",
      [](const Array& reps, const Array& probs, double tau, bool with_grad) {
        const Tensor p = to_tensor(probs);
        return run_loss(reps, with_grad, [&](const Var& x) { return soft_contrastive_loss(x, p, tau); });
      },
      py::arg("reps"), py::arg("prev_probs"), py::arg("tau") = 0.2, py::arg("with_grad") = false);
  m.def(
      "distill_loss",
      [](const Array& logits, const Array& probs, double tau, bool with_grad) {
        const Tensor p = to_tensor(probs);
        return run_loss(logits, with_grad, [&](const Var& x) { return distill_loss(x, p, tau); });
      },
      py::arg("logits"), py::arg("prev_probs"), py::arg("tau") = 5.0, py::arg("with_grad") = false);
  m.def(
      "mlm_loss",
      [](const Array& logits, const std::vector<int>& targets, bool with_grad) {
        return run_loss(logits, with_grad, [&](const Var& x) { return mlm_loss(x, targets); });
      },
      py::arg("logits"), py::arg("targets"), py::arg("with_grad") = false);
  m.def(
      "finetune_loss",
      [](double l_ce, double l_d, double l_hard, double l_soft, double lambda_sc, double lambda_d) {
        Tape t;
        LossWeights w;
        w.lambda_sc = lambda_sc;
        w.lambda_d = lambda_d;
        auto s = [&](double v) { return t.constant(Tensor::scalar(v)); };
        return finetune_loss(s(l_ce), s(l_d), s(l_hard), s(l_soft), w).item();
      },
      py::arg("l_ce"), py::arg("l_d"), py::arg("l_hard"), py::arg("l_soft"), py::arg("lambda_sc") = 0.1,
      py::arg("lambda_d") = 10.0);

  m.def("config_keys", &TrainingConfig::keys);
  m.def("ablation_names", &ablation_names);
  m.def(
      "default_config",
      [] {
        const TrainingConfig cfg;
        py::dict d;
        for (const auto& k : TrainingConfig::keys()) d[py::str(k)] = cfg.get(k);
        return d;
      },
      "Every configuration key with its default value, as text.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit_code, stdout, stderr).");
}
