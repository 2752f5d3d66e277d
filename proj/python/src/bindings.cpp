#include "facecycle/baselines.hpp"
#include "facecycle/data_pipeline.hpp"
#include "facecycle/metrics.hpp"
#include "facecycle/runner.hpp"
#include "facecycle/spectral_norm.hpp"
#include "facecycle/train_engine.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

namespace py = pybind11;
using namespace facecycle;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Arrays cross the boundary by copy; the core never sees numpy memory.
torch::Tensor to_tensor(const DoubleArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kDouble).clone();
}

py::array_t<double> to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous().cpu();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * static_cast<size_t>(c.numel()));
  return out;
}

TrainSchedule schedule_for(int64_t total_iters, double ttur_phase_frac, int ttur_ratio, double lr0) {
  TrainSchedule s;
  s.total_iters = total_iters;
  s.ttur_phase_frac = ttur_phase_frac;
  s.ttur_ratio = ttur_ratio;
  s.lr0 = lr0;
  s.validate();
  return s;
}

py::object json_to_python(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.attr("__version__") = "0.1.0";

  // Translators run newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "estimate_sigma", [](const DoubleArray& w, int iters, uint64_t seed) { return estimate_sigma(to_tensor(w), iters, seed); },
      py::arg("weight"), py::arg("iters") = 100, py::arg("seed") = 0,
      "Largest singular value of a matrix (or conv kernel) by power iteration.");
  m.def(
      "normalize_weight", [](const DoubleArray& w, double sigma) { return to_array(normalize_weight(to_tensor(w), sigma)); },
      py::arg("weight"), py::arg("sigma"));

  m.def(
      "frechet_distance",
      [](const DoubleArray& mu1, const DoubleArray& cov1, const DoubleArray& mu2, const DoubleArray& cov2) {
        return frechet_distance(to_tensor(mu1), to_tensor(cov1), to_tensor(mu2), to_tensor(cov2));
      },
      py::arg("mu1"), py::arg("cov1"), py::arg("mu2"), py::arg("cov2"));
  m.def(
      "psnr", [](const DoubleArray& a, const DoubleArray& b) { return psnr(to_tensor(a), to_tensor(b)); }, py::arg("a"),
      py::arg("b"), "Images in [0, 1]; identical inputs return the 99 dB cap.");
  m.def(
      "ssim", [](const DoubleArray& a, const DoubleArray& b) { return ssim(to_tensor(a), to_tensor(b)); }, py::arg("a"),
      py::arg("b"), "Images shaped [..., C, H, W] in [0, 1].");
  m.def(
      "landmark_nme",
      [](const DoubleArray& pred, const DoubleArray& truth, std::array<int, 2> eyes) {
        auto r = landmark_nme(to_tensor(pred), to_tensor(truth), eyes);
        py::dict d;
        d["nme"] = r.nme;
        d["counted"] = r.counted;
        d["skipped"] = r.skipped;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("eye_indices") = std::array<int, 2>{0, 1});
  m.def(
      "kl_divergence",
      [](const DoubleArray& mu, const DoubleArray& sigma) {
        return kl_divergence(to_tensor(mu), to_tensor(sigma)).item<double>();
      },
      py::arg("mu"), py::arg("sigma"), "KL(N(mu, sigma^2) || N(0, I)), summed over dims, mean over rows.");

  m.def(
      "ttur_steps",
      [](int64_t iter, int64_t total_iters, double phase_frac, int ratio) {
        return ttur_steps(iter, schedule_for(total_iters, phase_frac, ratio, 2e-4));
      },
      py::arg("iter"), py::arg("total_iters"), py::arg("phase_frac") = 0.25, py::arg("ratio") = 2,
      "(discriminator steps, generator steps) at one iteration.");
  m.def(
      "learning_rate",
      [](int64_t iter, int64_t total_iters, double lr0) { return learning_rate(iter, schedule_for(total_iters, 0.25, 2, lr0)); },
      py::arg("iter"), py::arg("total_iters"), py::arg("lr0") = 2e-4);

  m.def(
      "make_toy_domains",
      [](const std::filesystem::path& out, int n, int resolution, uint64_t seed, int per_identity) {
        auto d = make_toy_domains(out, n, resolution, seed, per_identity);
        return py::make_tuple(d.dir_x, d.dir_y);
      },
      py::arg("out"), py::arg("n_per_domain"), py::arg("resolution") = 64, py::arg("seed") = 0,
      py::arg("images_per_identity") = 10);

  m.def(
      "load_run_config",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        return json_to_python(load_run_config(path, overrides).to_json());
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{}, "Validated run config as a dict.");
  m.def(
      "train",
      [](const std::filesystem::path& path, const std::vector<std::string>& overrides) {
        auto cfg = load_run_config(path, overrides);
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = cmd_train(cfg);
        }
        py::dict d;
        d["run_dir"] = r.run_dir;
        d["final_checkpoint"] = r.final_checkpoint;
        d["rows"] = r.rows;
        return d;
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{});
}
