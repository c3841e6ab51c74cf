#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "racmf/container.hpp"
#include "racmf/metrics.hpp"
#include "racmf/rl_trainer.hpp"

namespace py = pybind11;
using namespace racmf;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const FloatArray& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
    Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), img.data.begin());
    return img;
}

Mask to_mask(const ByteArray& a) {
    if (a.ndim() != 2) throw DimensionError("expected a 2-D mask, got " + std::to_string(a.ndim()) + "-D");
    Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

template <class T>
py::array_t<T> to_array(const Grid<T>& g) {
    py::array_t<T> out({g.rows, g.cols});
    std::copy(g.data.begin(), g.data.end(), out.mutable_data());
    return out;
}

py::dict pair_dict(const ImagePair& p) {
    py::dict d;
    d["pair_id"] = p.pair_id;
    d["source"] = to_array(p.source);
    d["target"] = to_array(p.target);
    d["body_mask"] = to_array(p.body_mask);
    d["lesion_mask"] = to_array(p.lesion_mask);
    return d;
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json py_to_json(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::unique_ptr<RefinementPolicy> make_policy(const std::string& name, const Controller* ctrl, const RolloutConfig& rc,
                                              int b_max) {
    if (name == "cmf") return nullptr;
    if (name == "zero") return std::make_unique<ZeroBudgetPolicy>();
    if (name == "uniform") return std::make_unique<UniformBudgetPolicy>(rc.m_max);
    if (name == "random") return std::make_unique<RandomPolicy>(rc.m_max, b_max);
    if (name == "controller") {
        if (!ctrl) throw SpecError("policy", "the controller policy needs a controller");
        return std::make_unique<ControllerPolicy>(*ctrl, DecodeMode::Greedy);
    }
    throw SpecError("policy", "unknown policy '" + name + "' (cmf, zero, uniform, random, controller)");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Region-adaptive conditional MeanFlow enhancement for synthetic CT phantoms.";

    auto base = py::register_exception<Error>(m, "RacmfError");
    py::register_exception<SpecError>(m, "SpecError", base);
    py::register_exception<DimensionError>(m, "DimensionError", base);
    py::register_exception<PreconditionError>(m, "PreconditionError", base);
    py::register_exception<FormatError>(m, "FormatError", base);
    py::register_exception<IoError>(m, "IoError", base);
    py::register_exception<NumericalError>(m, "NumericalError", base);
    py::register_exception<FeatureUndefinedError>(m, "FeatureUndefinedError", base);
    py::register_exception<ContractError>(m, "ContractError", base);

    m.def(
        "make_pair",
        [](std::uint64_t seed, int height, int width, int n_lesions, const std::string& mode) {
            PhantomSpec spec;
            spec.height = height;
            spec.width = width;
            spec.n_lesions = n_lesions;
            DegradationTemplate tmpl;
            tmpl.mode = mode;
            FieldInfo info;
            py::dict d = pair_dict(make_pair(spec, tmpl, seed, &info));
            d["quadrant"] = info.quadrant;
            return d;
        },
        py::arg("seed"), py::arg("height") = 32, py::arg("width") = 32, py::arg("n_lesions") = 2,
        py::arg("mode") = "quadrant", "Synthesizes one (degraded, clean) phantom pair from a seed.");
    m.def("read_pair", [](const std::filesystem::path& p) { return pair_dict(read_pair(p)); }, py::arg("path"));
    m.def(
        "load_manifest",
        [](const std::filesystem::path& p) {
            const Manifest man = load_manifest(p);
            py::list pairs;
            for (const auto& e : man.pairs) {
                py::dict d;
                d["pair_id"] = e.pair_id;
                d["path"] = man.resolve(e);
                d["split"] = e.split;
                d["seed"] = e.seed;
                d["quadrant"] = e.quadrant;
                pairs.append(d);
            }
            return pairs;
        },
        py::arg("path"), "Pairs listed in a dataset manifest, with paths resolved.");
    m.def(
        "read_enhanced",
        [](const std::filesystem::path& p) {
            const Container c = read_container(p);
            return to_array(c.get("x_enh").to_image());
        },
        py::arg("path"));

    m.def(
        "psnr", [](const FloatArray& x, const FloatArray& y, double max_value) { return psnr(to_image(x), to_image(y), max_value).db; },
        py::arg("x"), py::arg("y"), py::arg("max_value") = kNormalizedRange);
    m.def(
        "ssim",
        [](const FloatArray& x, const FloatArray& y, double dynamic_range) {
            return ssim(to_image(x), to_image(y), dynamic_range);
        },
        py::arg("x"), py::arg("y"), py::arg("dynamic_range") = 1.0);
    m.def("ccc", &ccc, py::arg("s"), py::arg("t"));
    m.def(
        "feature_vector",
        [](const FloatArray& image, const ByteArray& roi, int n_levels) {
            const auto fv = feature_vector(to_image(image), to_mask(roi), n_levels);
            py::dict d;
            for (size_t i = 0; i < fv.ids.size(); ++i) d[py::str(fv.ids[i])] = fv.values[i];
            return d;
        },
        py::arg("image"), py::arg("roi"), py::arg("n_levels") = 32, "The 24 texture features as an ordered dict.");
    m.def(
        "nps",
        [](const std::vector<FloatArray>& patches) {
            std::vector<Image> imgs;
            for (const auto& p : patches) imgs.push_back(to_image(p));
            const NPSProfile r = nps(imgs);
            py::dict d;
            d["spectrum"] = to_array(r.spectrum);
            d["bin_centers"] = r.bin_centers;
            d["profile"] = r.profile;
            d["n_patches"] = r.n_patches;
            return d;
        },
        py::arg("patches"));
    m.def("profile_distance", &profile_distance, py::arg("a"), py::arg("b"));

    py::class_<Controller>(m, "Controller")
        .def_static("load", &load_controller, py::arg("path"))
        .def_property_readonly("config", [](const Controller& c) { return json_to_py(c.config().to_json()); });

    py::class_<ConditionalUNet>(m, "Backbone")
        .def(py::init([](const py::dict& config) { return ConditionalUNet(BackboneConfig::from_json(py_to_json(config))); }),
             py::arg("config") = py::dict(), "Freshly initialized network; config keys as in the backbone section.")
        .def_static("load", &load_backbone, py::arg("path"))
        .def("save", [](const ConditionalUNet& n, const std::filesystem::path& p) { save_backbone(n, p, 0); },
             py::arg("path"))
        .def_property_readonly("config", [](const ConditionalUNet& n) { return json_to_py(n.config().to_json()); })
        .def(
            "forward",
            [](const ConditionalUNet& n, const FloatArray& x, const FloatArray& x_a, double r, double t) {
                return to_array(n.forward(to_image(x), to_image(x_a), r, t));
            },
            py::arg("x"), py::arg("x_a"), py::arg("r"), py::arg("t"))
        .def(
            "meanflow_target",
            [](const ConditionalUNet& n, const FloatArray& x_t, const FloatArray& x_a, double r, double t,
               const FloatArray& v) {
                return to_array(meanflow_target(n, to_image(x_t), to_image(x_a), {r, t}, to_image(v)));
            },
            py::arg("x_t"), py::arg("x_a"), py::arg("r"), py::arg("t"), py::arg("v"))
        .def(
            "enhance",
            [](const ConditionalUNet& n, const FloatArray& x_a, const py::dict& rollout, std::uint64_t seed,
               const std::string& policy, const Controller* controller) {
                const RolloutConfig rc = RolloutConfig::from_json(py_to_json(rollout));
                const int b_max = controller ? controller->config().b_max : ControllerConfig{}.b_max;
                auto pol = make_policy(policy, controller, rc, b_max);
                const Image src = to_image(x_a);
                Rng rng(seed);
                EnhanceResult r;
                {
                    py::gil_scoped_release release;
                    r = enhance(n, pol.get(), src, rc, rng);
                }
                return py::make_tuple(to_array(r.image), json_to_py(r.trace.to_json()));
            },
            py::arg("x_a"), py::arg("rollout") = py::dict(), py::arg("seed") = 0, py::arg("policy") = "cmf",
            py::arg("controller") = nullptr,
            "Progressive enhancement of one image. Returns (image, trace).");
}
