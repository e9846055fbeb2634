#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "gcut3r/errors.hpp"
#include "gcut3r/io.hpp"
#include "gcut3r/trainer.hpp"

namespace py = pybind11;
using namespace gcut3r;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Array& a) {
    std::vector<py::ssize_t> shape(a.shape.begin(), a.shape.end());
    py::array_t<double> out(shape);
    std::copy(a.data.begin(), a.data.end(), out.mutable_data());
    return out;
}

Array from_numpy(const NdArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    Array out(shape);
    std::copy(a.data(), a.data() + a.size(), out.data.begin());
    return out;
}

Vec3 vec3(const NdArray& a) {
    if (a.size() != 3) fail(Errc::shape, "expected 3 values, got " + std::to_string(a.size()));
    return {a.data()[0], a.data()[1], a.data()[2]};
}

Quat quat(const NdArray& a) {
    if (a.size() != 4) fail(Errc::shape, "expected a quaternion (w, x, y, z), got " + std::to_string(a.size()) + " values");
    return {a.data()[0], a.data()[1], a.data()[2], a.data()[3]};
}

PointCloud cloud(const NdArray& a) {
    if (a.ndim() != 2 || a.shape(1) != 3) fail(Errc::shape, "point clouds are N x 3 arrays");
    PointCloud c(static_cast<std::size_t>(a.shape(0)));
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = {a.at(i, 0), a.at(i, 1), a.at(i, 2)};
    return c;
}

py::array_t<double> from_vec(const Vec3& v) { return to_numpy(Array({3}, {v.x(), v.y(), v.z()})); }

py::array_t<double> from_mat(const Mat3& m) {
    Array a({3, 3});
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) a.at(i, j) = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    return to_numpy(a);
}

DepthRaster depth_raster(const NdArray& values, const NdArray& mask, double scale) {
    if (values.ndim() != 2 || mask.ndim() != 2 || values.shape(0) != mask.shape(0) || values.shape(1) != mask.shape(1)) {
        fail(Errc::shape, "depth and mask must be H x W arrays of the same shape");
    }
    DepthRaster d(static_cast<std::size_t>(values.shape(0)), static_cast<std::size_t>(values.shape(1)));
    for (std::size_t i = 0; i < d.values.size(); ++i) {
        d.mask[i] = mask.data()[i] != 0.0;
        d.values[i] = d.mask[i] ? values.data()[i] : 0.0;
    }
    d.scale = scale;
    return d;
}

py::dict loss_result(const Var& loss, std::initializer_list<std::pair<const char*, const Var*>> inputs, bool with_grad) {
    py::dict out;
    out["loss"] = loss.item();
    if (with_grad) {
        loss.backward();
        for (const auto& [name, v] : inputs) out[name] = to_numpy(v->grad());
    }
    return out;
}

py::dict frame_dict(const SampleFrame& f, const GuidanceSet& g) {
    py::dict d;
    d["image"] = to_numpy(f.image);
    Array depth({f.gt_depth.height, f.gt_depth.width});
    std::copy(f.gt_depth.values.begin(), f.gt_depth.values.end(), depth.data.begin());
    d["depth"] = to_numpy(depth);
    d["valid"] = to_numpy(f.valid);
    d["pointmap"] = to_numpy(f.gt_pointmap);
    d["intrinsics"] = f.intrinsics;
    d["pose"] = f.relative_pose;
    d["guidance_intrinsics"] = g.intrinsics;
    d["guidance_pose"] = g.pose;
    if (g.depth) {
        Array gd({g.depth->height, g.depth->width}), gm({g.depth->height, g.depth->width});
        for (std::size_t i = 0; i < gd.size(); ++i) {
            gd[i] = g.depth->values[i];
            gm[i] = g.depth->mask[i];
        }
        d["guidance_depth"] = to_numpy(gd);
        d["guidance_mask"] = to_numpy(gm);
    } else {
        d["guidance_depth"] = py::none();
        d["guidance_mask"] = py::none();
    }
    return d;
}

py::dict prediction_dict(const Prediction& p) {
    py::dict d;
    d["pointmap"] = to_numpy(p.pointmap.value());
    d["confidence"] = to_numpy(p.confidence.value());
    d["quat"] = to_numpy(p.quat.value());
    d["trans"] = to_numpy(p.trans.value());
    return d;
}

py::dict row_dict(const ReportRow& r) {
    py::dict d;
    d["acc_mean"] = r.acc.acc_mean;
    d["acc_median"] = r.acc.acc_median;
    d["comp_mean"] = r.acc.comp_mean;
    d["comp_median"] = r.acc.comp_median;
    d["nc_mean"] = r.nc.nc_mean;
    d["nc_median"] = r.nc.nc_median;
    d["abs_rel"] = r.depth.abs_rel;
    d["delta_125"] = r.depth.delta_125;
    d["ate"] = r.pose.ate;
    d["rpe_trans"] = r.pose.rpe_trans;
    d["rpe_rot_deg"] = r.pose.rpe_rot_deg;
    d["l2"] = r.l2;
    d["mean_l2"] = mean_l2(r);
    return d;
}

std::string config_text(const py::dict& cfg) {
    std::ostringstream text;
    for (const auto& [k, v] : cfg) text << py::str(k).cast<std::string>() << " = " << py::str(v).cast<std::string>() << '\n';
    return text.str();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Guided recurrent pointmap reconstruction: geometry, losses, synthetic data, metrics and the model.";

    static py::exception<Error> error_type(m, "Error", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object err = py::handle(error_type)(e.what());
            err.attr("code") = std::string(errc_name(e.code()));
            PyErr_SetObject(error_type.ptr(), err.ptr());
        }
    });

    m.attr("DEPTH_SCALE") = kDepthScale;
    m.attr("SEQUENCE_LENGTH") = kSequenceLength;

    // ---- geometry ----

    py::class_<Intrinsics>(m, "Intrinsics")
        .def(py::init<double, double, double, double>(), py::arg("fx"), py::arg("fy"), py::arg("cx"), py::arg("cy"))
        .def_readwrite("fx", &Intrinsics::fx)
        .def_readwrite("fy", &Intrinsics::fy)
        .def_readwrite("cx", &Intrinsics::cx)
        .def_readwrite("cy", &Intrinsics::cy)
        .def("matrix", [](const Intrinsics& k) { return from_mat(k.matrix()); })
        .def("__repr__", [](const Intrinsics& k) {
            std::ostringstream s;
            s << "Intrinsics(fx=" << k.fx << ", fy=" << k.fy << ", cx=" << k.cx << ", cy=" << k.cy << ")";
            return s.str();
        });

    py::class_<Pose>(m, "Pose")
        .def(py::init<>())
        .def(py::init([](const NdArray& q, const NdArray& t) { return Pose{quat(q), vec3(t)}; }), py::arg("quat"),
             py::arg("trans"))
        .def_static("from_rt", [](const NdArray& r, const NdArray& t) {
            if (r.ndim() != 2 || r.shape(0) != 3 || r.shape(1) != 3) fail(Errc::shape, "rotation must be 3 x 3");
            Mat3 m;
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) m(i, j) = r.at(i, j);
            }
            return Pose::from_rt(m, vec3(t));
        })
        .def_property_readonly("quat", [](const Pose& p) { return to_numpy(Array({4}, {p.q.w, p.q.x, p.q.y, p.q.z})); })
        .def_property_readonly("trans", [](const Pose& p) { return from_vec(p.t); })
        .def("rotation", [](const Pose& p) { return from_mat(p.rotation()); })
        .def("apply", [](const Pose& p, const NdArray& x) { return from_vec(p.apply(vec3(x))); })
        .def("inverse", &invert)
        .def("__matmul__", &compose)
        .def("__repr__", [](const Pose& p) {
            std::ostringstream s;
            s << "Pose(quat=[" << p.q.w << ", " << p.q.x << ", " << p.q.y << ", " << p.q.z << "], trans=[" << p.t.x()
              << ", " << p.t.y() << ", " << p.t.z() << "])";
            return s.str();
        });

    m.def("axis_angle", [](const NdArray& axis, double angle) {
        const Quat q = axis_angle(vec3(axis), angle);
        return to_numpy(Array({4}, {q.w, q.x, q.y, q.z}));
    }, py::arg("axis"), py::arg("angle"));
    m.def("quat_to_rot", [](const NdArray& q) { return from_mat(quat_to_rot(quat(q))); });
    m.def("relative", &relative, py::arg("pose_i"), py::arg("pose_j"));

    m.def(
        "encode_rays",
        [](const Intrinsics& k, const std::optional<Pose>& pose, std::size_t h, std::size_t w) {
            return to_numpy(encode_rays(k, pose, h, w));
        },
        py::arg("intrinsics"), py::arg("pose") = py::none(), py::arg("height"), py::arg("width"),
        "3 x H x W unit ray directions; rotated into the pose frame when a pose is given.");
    m.def("encode_pose_map", [](const Pose& p, std::size_t h, std::size_t w) { return to_numpy(encode_pose_map(p, h, w)); },
          py::arg("pose"), py::arg("height"), py::arg("width"));
    m.def(
        "encode_depth",
        [](const NdArray& depth, const NdArray& mask, double scale) {
            return to_numpy(encode_depth(depth_raster(depth, mask, scale)));
        },
        py::arg("depth"), py::arg("mask"), py::arg("scale") = kDepthScale,
        "2 x H x W: depth / scale (0 where masked) and the mask.");
    m.def(
        "unproject",
        [](const NdArray& depth, const NdArray& mask, const Intrinsics& k, const Pose& pose) {
            return to_numpy(unproject(depth_raster(depth, mask, 1.0), k, pose));
        },
        py::arg("depth"), py::arg("mask"), py::arg("intrinsics"), py::arg("pose") = Pose::identity());

    // ---- losses ----

    m.def(
        "pointmap_loss",
        [](const NdArray& pred, const NdArray& conf, const NdArray& gt, const NdArray& mask, double alpha, bool with_grad) {
            const Var p(from_numpy(pred), with_grad), c(from_numpy(conf), with_grad);
            const Var loss = pointmap_loss_frame(p, c, from_numpy(gt), from_numpy(mask), {alpha, 1.0});
            return loss_result(loss, {{"grad_pointmap", &p}, {"grad_confidence", &c}}, with_grad);
        },
        py::arg("pred"), py::arg("confidence"), py::arg("gt"), py::arg("mask"), py::arg("alpha") = 0.2,
        py::arg("with_grad") = false, "Confidence-weighted pointmap loss of one frame.");
    m.def(
        "pose_loss",
        [](const NdArray& q, const NdArray& t, const NdArray& gt_q, const NdArray& gt_t, bool with_grad) {
            const Var vq(from_numpy(q), with_grad), vt(from_numpy(t), with_grad);
            const Var loss = pose_loss(vq, vt, quat(gt_q), vec3(gt_t));
            return loss_result(loss, {{"grad_quat", &vq}, {"grad_trans", &vt}}, with_grad);
        },
        py::arg("quat"), py::arg("trans"), py::arg("gt_quat"), py::arg("gt_trans"), py::arg("with_grad") = false);

    // ---- synthetic data ----

    m.def(
        "gen_sequence",
        [](std::uint64_t seed, const std::string& profile, std::size_t image_size) {
            SceneConfig sc;
            sc.image_size = image_size;
            const SceneSample s = gen_sequence(seed, NoiseConfig::profile(profile), sc);
            py::list frames;
            for (std::size_t k = 0; k < s.frames.size(); ++k) frames.append(frame_dict(s.frames[k], s.guidance[k]));
            return frames;
        },
        py::arg("seed"), py::arg("profile") = "clean", py::arg("image_size") = 32,
        "Four-frame synthetic sequence as a list of dicts (image, depth, valid, pointmap, poses, priors).");
    m.def("generate_corpus",
          [](const std::filesystem::path& root, std::size_t count, std::uint64_t seed, const std::string& profile,
             double split_frac, std::size_t image_size) {
              return io::generate_corpus(root, count, seed, profile, split_frac, image_size).entries.size();
          },
          py::arg("root"), py::arg("count"), py::arg("seed"), py::arg("profile") = "clean",
          py::arg("split_frac") = 0.1, py::arg("image_size") = 32);

    // ---- metrics ----

    m.def("acc_comp", [](const NdArray& pred, const NdArray& gt) {
        const AccComp r = acc_comp(cloud(pred), cloud(gt));
        return py::dict(py::arg("acc_mean") = r.acc_mean, py::arg("acc_median") = r.acc_median,
                        py::arg("comp_mean") = r.comp_mean, py::arg("comp_median") = r.comp_median);
    }, py::arg("pred"), py::arg("gt"));
    m.def("normal_consistency", [](const NdArray& pred, const NdArray& gt, std::size_t k) {
        const NormalConsistency r = normal_consistency(cloud(pred), cloud(gt), k);
        return py::dict(py::arg("nc_mean") = r.nc_mean, py::arg("nc_median") = r.nc_median);
    }, py::arg("pred"), py::arg("gt"), py::arg("k") = 10);
    m.def("umeyama_sim3", [](const NdArray& src, const NdArray& dst, bool with_scale) {
        const Sim3 s = umeyama_sim3(cloud(src), cloud(dst), with_scale);
        return py::make_tuple(s.s, from_mat(s.r), from_vec(s.t));
    }, py::arg("src"), py::arg("dst"), py::arg("with_scale") = true, "Returns (s, R, t) with dst ~ s R src + t.");
    m.def("pose_metrics", [](const std::vector<Pose>& pred, const std::vector<Pose>& gt) {
        const PoseMetrics r = pose_metrics(pred, gt);
        return py::dict(py::arg("ate") = r.ate, py::arg("rpe_trans") = r.rpe_trans,
                        py::arg("rpe_rot_deg") = r.rpe_rot_deg, py::arg("degenerate") = r.degenerate);
    }, py::arg("pred"), py::arg("gt"));
    m.def("depth_metrics", [](const NdArray& pred, const NdArray& gt, const NdArray& mask, bool median_align) {
        if (pred.size() != gt.size() || pred.size() != mask.size()) fail(Errc::shape, "depth_metrics: size mismatch");
        std::vector<std::uint8_t> m(static_cast<std::size_t>(mask.size()));
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask.data()[i] != 0.0;
        const DepthMetrics r =
            depth_metrics({pred.data(), static_cast<std::size_t>(pred.size())}, {gt.data(), static_cast<std::size_t>(gt.size())},
                          m, median_align ? DepthAlign::median : DepthAlign::none);
        return py::dict(py::arg("abs_rel") = r.abs_rel, py::arg("delta_125") = r.delta_125);
    }, py::arg("pred"), py::arg("gt"), py::arg("mask"), py::arg("median_align") = false);

    // ---- model ----

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_static("tiny", &ModelConfig::tiny)
        .def_readwrite("image_size", &ModelConfig::image_size)
        .def_readwrite("patch", &ModelConfig::patch)
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("state_tokens", &ModelConfig::state_tokens)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_property("zero_init_fusion", [](const ModelConfig& c) { return c.fusion == nn::Init::zero; },
                      [](ModelConfig& c, bool z) { c.fusion = z ? nn::Init::zero : nn::Init::standard; });

    py::class_<Model, std::unique_ptr<Model>>(m, "Model")
        .def(py::init<const ModelConfig&>(), py::arg("config") = ModelConfig::tiny())
        .def_static("load", [](const std::filesystem::path& p) { return load_model(p); }, py::arg("path"))
        .def("save", [](const Model& self, const std::filesystem::path& p) { save_model(p, self); }, py::arg("path"))
        .def_property_readonly("config", &Model::config)
        .def_property_readonly("num_parameters", [](const Model& self) { return self.params().count(); })
        .def("fusion_parameter_names", &Model::fusion_param_names)
        .def(
            "infer",
            [](const Model& self, std::uint64_t seed, const std::string& profile, const std::string& guidance) {
                SceneConfig sc;
                sc.image_size = self.config().image_size;
                const SceneSample s = gen_sequence(seed, NoiseConfig::profile(profile), sc);
                ad::NoGradGuard guard;
                py::list out;
                for (const auto& p : self.forward_sequence(s.model_frames(ModalitySubset::parse(guidance))).predictions) {
                    out.append(prediction_dict(p));
                }
                return out;
            },
            py::arg("seed"), py::arg("profile") = "clean", py::arg("guidance") = "",
            "Runs the model on the synthetic sequence `seed` with the priors named by `guidance` (subset of 'KPD').")
        .def(
            "infer_images",
            [](const Model& self, const std::vector<NdArray>& images) {
                std::vector<Frame> frames;
                for (const auto& im : images) frames.push_back({from_numpy(im), {}});
                ad::NoGradGuard guard;
                py::list out;
                for (const auto& p : self.forward_sequence(frames).predictions) out.append(prediction_dict(p));
                return out;
            },
            py::arg("images"), "Unguided inference on a list of 3 x H x W images.")
        .def(
            "evaluate",
            [](const Model& self, std::uint64_t seed, const std::string& profile, const std::string& guidance) {
                SceneConfig sc;
                sc.image_size = self.config().image_size;
                const SceneSample s = gen_sequence(seed, NoiseConfig::profile(profile), sc);
                return row_dict(evaluate_sample(self, s, ModalitySubset::parse(guidance), std::to_string(seed)));
            },
            py::arg("seed"), py::arg("profile") = "clean", py::arg("guidance") = "");

    m.def(
        "train",
        [](const py::dict& config, const std::filesystem::path& data, const std::filesystem::path& out) {
            ModelConfig mc = ModelConfig::tiny();
            TrainConfig tc;
            apply_config(io::parse_config(config_text(config), "<dict>"), mc, tc, "<dict>");
            const io::Corpus corpus = io::load_corpus(data);
            auto model = std::make_unique<Model>(mc);
            {
                py::gil_scoped_release release;
                run(*model, corpus, tc, out);
            }
            return model;
        },
        py::arg("config"), py::arg("data"), py::arg("out"),
        "Trains on the corpus at `data` with `key = value` settings from `config`; resumes from `out` when possible.");
}
