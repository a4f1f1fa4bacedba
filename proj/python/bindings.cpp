#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rain/checkpoint.hpp"
#include "rain/config.hpp"
#include "rain/datagen.hpp"
#include "rain/eval.hpp"
#include "rain/losses.hpp"
#include "rain/pipeline.hpp"

namespace py = pybind11;
using namespace rain;

namespace {

// JSON crosses the boundary as text; the Python side wraps it with json.loads/dumps.
ExperimentSpec spec_from_text(const std::string& text) { return parse_experiment(Json::parse(text)); }

py::array_t<double> image_to_array(const Image& img) {
  py::array_t<double> out({img.height, img.width, 3});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

Image array_to_image(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("expected an (H, W, 3) array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

}  // namespace

PYBIND11_MODULE(_rain, m) {
  m.doc() = "Native core of the rain package";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_ValueError);
  py::register_exception<TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);
  py::register_exception<CheckpointMismatch>(m, "CheckpointMismatch", PyExc_ValueError);

  m.def("validate_spec", [](const std::string& text) { return to_json(spec_from_text(text)).dump(); },
        py::arg("spec_json"), "Validate a spec and return it with defaults filled in.");
  m.def("fingerprint", [](const std::string& text) { return fingerprint(Json::parse(text)); });

  m.def(
      "run_experiment",
      [](const std::string& text, const std::string& out_dir, int workers, std::optional<std::uint64_t> seed) {
        RunOptions o;
        o.out_dir = out_dir;
        o.workers = workers;
        o.seed = seed;
        py::gil_scoped_release release;
        return run_experiment(spec_from_text(text), o).dump();
      },
      py::arg("spec_json"), py::arg("out_dir") = "", py::arg("workers") = 1, py::arg("seed") = py::none());

  m.def(
      "dataset_summary",
      [](const std::string& text) {
        const MlrDataset ds = build_dataset(spec_from_text(text).dataset);
        return py::dict(py::arg("train") = ds.train.size(), py::arg("query") = ds.query.size(),
                        py::arg("gallery") = ds.gallery.size(), py::arg("num_identities") = ds.num_identities,
                        py::arg("rates_used") = ds.rates_used);
      },
      py::arg("spec_json"));

  m.def("toy_images",
        [](int identities, int per_identity, int side, std::uint64_t seed) {
          py::list out;
          for (const auto& r : make_toy_corpus(identities, per_identity, side, seed))
            out.append(py::make_tuple(image_to_array(r.pixels), r.identity, r.camera));
          return out;
        },
        py::arg("num_identities"), py::arg("images_per_identity"), py::arg("side"), py::arg("seed"));
  m.def("downsample_upsample",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a, int rate) {
          return image_to_array(downsample_upsample(array_to_image(a), rate));
        },
        py::arg("image"), py::arg("rate"));

  m.def("distance_matrix", &distance_matrix, py::arg("query"), py::arg("gallery"));
  m.def(
      "cmc",
      [](const Matrix& dist, const std::vector<int>& q, const std::vector<int>& g, const std::vector<int>& ranks) {
        return cmc(dist, q, g, ranks);
      },
      py::arg("dist"), py::arg("query_ids"), py::arg("gallery_ids"), py::arg("ranks") = std::vector<int>{1, 5, 10, 20});
  m.def(
      "mean_ap", [](const Matrix& dist, const std::vector<int>& q, const std::vector<int>& g) { return map_score(dist, q, g); },
      py::arg("dist"), py::arg("query_ids"), py::arg("gallery_ids"));

  m.def("adversarial_loss", [](const std::vector<double>& hr, const std::vector<double>& lr) {
    return adversarial_loss(hr, lr);
  });
  m.def("triplet_loss", [](double d_pos, double d_neg, double margin) {
    const PairDistances p{d_pos, d_neg};
    return triplet_loss(std::span<const PairDistances>(&p, 1), margin);
  }, py::arg("d_pos"), py::arg("d_neg"), py::arg("margin") = 0.3);
  m.def("classification_loss", &classification_loss, py::arg("probs_hr"), py::arg("onehot_hr"), py::arg("probs_lr"),
        py::arg("onehot_lr"));
  m.def("reconstruction_loss", [](const std::vector<double>& rh, const std::vector<double>& th,
                                  const std::vector<double>& rl, const std::vector<double>& tl) {
    return reconstruction_loss(rh, th, rl, tl);
  });

  m.def(
      "embed",
      [](const std::string& checkpoint, const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& imgs,
         bool normalize) {
        const LoadedCheckpoint ck = load_checkpoint(checkpoint);
        std::vector<ImageRecord> recs(imgs.size());
        for (std::size_t i = 0; i < imgs.size(); ++i) recs[i].pixels = array_to_image(imgs[i]);
        return embed_set(ck.model, recs, normalize);
      },
      py::arg("checkpoint"), py::arg("images"), py::arg("normalize") = true);
}
