#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "priorecon/kspace.hpp"
#include "priorecon/mask.hpp"
#include "priorecon/metrics.hpp"
#include "priorecon/pipeline.hpp"
#include "priorecon/registration.hpp"

namespace py = pybind11;
using namespace priorecon;

namespace {

using RealArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ComplexArray = py::array_t<cplx, py::array::c_style | py::array::forcecast>;

ImageSlice to_image(const RealArray &a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  const Dims d{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))};
  return ImageSlice(d, std::vector<double>(a.data(), a.data() + a.size()));
}

RealArray from_image(const ImageSlice &img) {
  RealArray out({img.ny(), img.nz()});
  std::copy(img.values().begin(), img.values().end(), out.mutable_data());
  return out;
}

template <class Grid> Grid to_grid(const ComplexArray &a) {
  if (a.ndim() != 3) throw py::value_error("expected a (coils, ny, nz) array");
  const Dims d{static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2))};
  return Grid(static_cast<int>(a.shape(0)), d, std::vector<cplx>(a.data(), a.data() + a.size()));
}

template <class Grid> ComplexArray from_grid(const Grid &g) {
  ComplexArray out({g.n_coils(), g.dims().ny, g.dims().nz});
  std::copy(g.values().begin(), g.values().end(), out.mutable_data());
  return out;
}

SamplingMask to_mask(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> &a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D mask");
  SamplingMask m;
  m.mask = Plane<std::uint8_t>({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))},
                               std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
  return m;
}

py::object to_python(const nlohmann::json &j) { return py::module_::import("json").attr("loads")(j.dump()); }

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prior-informed accelerated MRI reconstruction (C++ core).";

  py::register_exception<Error>(m, "PrioreconError", PyExc_RuntimeError);

  m.def("ifft2c", [](const ComplexArray &k) { return from_grid(inverse_transform(to_grid<KSpaceTensor>(k))); }, py::arg("kspace"),
        "Centered orthonormal inverse 2-D DFT per coil.");
  m.def("fft2c", [](const ComplexArray &x) { return from_grid(forward_transform(to_grid<CoilImages>(x))); }, py::arg("images"));
  m.def("rss", [](const ComplexArray &x) { return from_image(rss_combine(to_grid<CoilImages>(x))); }, py::arg("images"));
  m.def("zero_filled", [](const ComplexArray &k) { return from_image(zero_filled(to_grid<KSpaceTensor>(k))); }, py::arg("kspace"));
  m.def(
      "undersample",
      [](const ComplexArray &k, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> &mask) {
        return from_grid(undersample(to_grid<KSpaceTensor>(k), to_mask(mask)));
      },
      py::arg("kspace"), py::arg("mask"));

  m.def(
      "poisson_mask",
      [](int ny, int nz, double R, int center_radius, std::uint64_t seed) {
        const auto mask = R == 1.0 ? full_mask({ny, nz}) : generate_poisson_mask({ny, nz}, R, center_radius, seed);
        py::array_t<std::uint8_t> out({ny, nz});
        std::copy(mask.mask.values().begin(), mask.mask.values().end(), out.mutable_data());
        return out;
      },
      py::arg("ny"), py::arg("nz"), py::arg("R"), py::arg("center_radius") = 16, py::arg("seed") = 0);
  m.def("center_disc_count", [](int ny, int nz, int r) { return center_disc_count({ny, nz}, r); }, py::arg("ny"), py::arg("nz"),
        py::arg("radius"));

  m.def("ssim", [](const RealArray &a, const RealArray &b, double L) { return ssim(to_image(a), to_image(b), L); }, py::arg("a"),
        py::arg("b"), py::arg("data_range"));
  m.def("ssim_loss", [](const RealArray &a, const RealArray &b) { return ssim_loss(to_image(a), to_image(b)); }, py::arg("y_enh"),
        py::arg("y"));
  m.def("psnr", [](const RealArray &a, const RealArray &b, double L) { return psnr(to_image(a), to_image(b), L); }, py::arg("a"),
        py::arg("b"), py::arg("data_range"));
  m.def("nrmse", [](const RealArray &ref, const RealArray &b) { return nrmse(to_image(ref), to_image(b)); }, py::arg("reference"),
        py::arg("b"));
  m.def(
      "wilcoxon",
      [](const std::vector<double> &diffs, double alpha) {
        const auto r = wilcoxon_signed_rank(diffs, alpha);
        py::dict d;
        d["statistic"] = r.statistic;
        d["w_plus"] = r.w_plus;
        d["p_value"] = r.p_value;
        d["significant"] = r.significant;
        d["n_used"] = r.n_used;
        d["exact"] = r.exact;
        return d;
      },
      py::arg("diffs"), py::arg("alpha") = 0.05);

  m.def(
      "register",
      [](const RealArray &prior, const RealArray &target) {
        const auto r = register_prior(to_image(prior), to_image(target));
        py::array_t<double> affine({3, 3});
        std::copy(r.transform.affine.begin(), r.transform.affine.end(), affine.mutable_data());
        py::dict d;
        d["registered"] = from_image(r.registered);
        d["affine"] = affine;
        d["similarity_before"] = r.similarity_before;
        d["similarity_after"] = r.similarity_after;
        d["converged"] = r.converged;
        return d;
      },
      py::arg("prior"), py::arg("target"), "Affine NCC registration of prior (moving) to target (fixed).");

  m.def(
      "load_experiment", [](const std::string &path) { return to_python(nlohmann::json(load_experiment(path))); }, py::arg("path"),
      "Resolved experiment configuration as a dict.");
  m.def(
      "generate_dataset",
      [](const std::string &config_json) {
        auto cfg = nlohmann::json::parse(config_json).get<ExperimentConfig>();
        cfg.validate();
        return generate_dataset(cfg).subjects.size();
      },
      py::arg("config_json"));
  m.def(
      "run_experiment",
      [](const std::string &config_json) {
        auto cfg = nlohmann::json::parse(config_json).get<ExperimentConfig>();
        cfg.validate();
        py::gil_scoped_release release;
        train_recon_stage(cfg);
        train_enhance_stage(cfg);
        auto summary = evaluate_stage(cfg);
        py::gil_scoped_acquire acquire;
        return to_python(summary);
      },
      py::arg("config_json"), "Train both stages and evaluate; returns the evaluation summary.");
}
