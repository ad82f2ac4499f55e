#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cylseg/cli.hpp"
#include "cylseg/config.hpp"
#include "cylseg/metrics.hpp"
#include "cylseg/partition.hpp"
#include "cylseg/selftest.hpp"
#include "cylseg/sparse_tensor.hpp"
#include "cylseg/train.hpp"

namespace py = pybind11;
using namespace cylseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<int32_t, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> a({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), a.mutable_data());
  return a;
}

template <typename T>
py::array_t<T> to_numpy(const std::vector<T>& v) {
  py::array_t<T> a(v.size());
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

py::array_t<int32_t> coords_to_numpy(const std::vector<Coord3>& c) {
  py::array_t<int32_t> a({c.size(), std::size_t{3}});
  auto r = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) r(i, k) = c[i][k];
  }
  return a;
}

std::vector<Coord3> coords_from_numpy(const I32& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw ShapeError("coords must have shape (N, 3)");
  auto r = a.unchecked<2>();
  std::vector<Coord3> c(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) c[i] = {r(i, 0), r(i, 1), r(i, 2)};
  return c;
}

Matrix matrix_from_numpy(const F64& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

PointCloud make_cloud(const F64& xyz, std::optional<F64> intensity, std::optional<I32> labels) {
  if (xyz.ndim() != 2 || xyz.shape(1) != 3) throw ShapeError("xyz must have shape (N, 3)");
  const std::size_t n = xyz.shape(0);
  PointCloud c;
  auto r = xyz.unchecked<2>();
  for (std::size_t i = 0; i < n; ++i) c.xyz.push_back({r(i, 0), r(i, 1), r(i, 2)});
  if (intensity) {
    if (static_cast<std::size_t>(intensity->size()) != n) throw ShapeError("intensity length");
    c.intensity.assign(intensity->data(), intensity->data() + n);
  } else {
    c.intensity.assign(n, 0.0);
  }
  if (labels) {
    if (static_cast<std::size_t>(labels->size()) != n) throw ShapeError("labels length");
    c.labels = std::vector<int32_t>(labels->data(), labels->data() + n);
  }
  c.validate();
  return c;
}

py::dict loss_dict(const LossReport& r) {
  py::dict d;
  d["l_voxel_ce"] = r.l_voxel_ce;
  d["l_voxel_lovasz"] = r.l_voxel_lovasz;
  d["l_point_ce"] = r.l_point_ce;
  d["total"] = r.total;
  return d;
}

py::dict miou_dict(const MiouResult& r) {
  py::dict d;
  d["iou"] = r.iou;
  d["miou"] = r.miou;
  return d;
}

LabelEncoding encoding_from(const std::string& s) {
  if (s == "majority") return LabelEncoding::majority;
  if (s == "minority") return LabelEncoding::minority;
  throw ConfigError("encoding must be 'majority' or 'minority'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cylindrical-partition sparse 3D LiDAR segmentation";

  // Translators run newest first, so the base class goes first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  // --- point clouds ---------------------------------------------------------
  py::class_<PointCloud>(m, "PointCloud")
      .def(py::init(&make_cloud), py::arg("xyz"), py::arg("intensity") = py::none(),
           py::arg("labels") = py::none())
      .def("__len__", &PointCloud::size)
      .def_property_readonly("xyz",
                             [](const PointCloud& c) {
                               py::array_t<double> a({c.size(), std::size_t{3}});
                               auto r = a.mutable_unchecked<2>();
                               for (std::size_t i = 0; i < c.size(); ++i) {
                                 r(i, 0) = c.xyz[i].x;
                                 r(i, 1) = c.xyz[i].y;
                                 r(i, 2) = c.xyz[i].z;
                               }
                               return a;
                             })
      .def_property_readonly("intensity", [](const PointCloud& c) { return to_numpy(c.intensity); })
      .def_property_readonly(
          "labels", [](const PointCloud& c) -> std::optional<py::array_t<int32_t>> {
            if (!c.labels) return std::nullopt;
            return to_numpy(*c.labels);
          });

  py::class_<LabelMap>(m, "LabelMap")
      .def_static("identity", &LabelMap::identity, py::arg("num_classes"),
                  py::arg("ignore_id") = 255)
      .def_static("semantic_kitti", &LabelMap::semantic_kitti)
      .def_readonly("num_classes", &LabelMap::num_classes)
      .def_readonly("ignore_id", &LabelMap::ignore_id)
      .def("to_train", &LabelMap::to_train)
      .def("to_raw", &LabelMap::to_raw);

  m.def("read_kitti_bin", &read_kitti_bin, py::arg("path"));
  m.def("write_kitti_bin", &write_kitti_bin, py::arg("path"), py::arg("cloud"));
  m.def(
      "read_kitti_labels",
      [](const std::filesystem::path& p, const LabelMap& map) {
        return to_numpy(read_kitti_labels(p, map));
      },
      py::arg("path"), py::arg("label_map"));
  m.def(
      "write_kitti_labels",
      [](const std::filesystem::path& p, const I32& labels, const LabelMap& map) {
        write_kitti_labels(p, std::span<const int32_t>(labels.data(), labels.size()), map);
      },
      py::arg("path"), py::arg("labels"), py::arg("label_map"));
  m.def(
      "synthetic_scene",
      [](uint64_t seed, int num_points) {
        SyntheticSceneSpec s;
        s.seed = seed;
        s.num_points = num_points;
        return generate_synthetic_scene(s);
      },
      py::arg("seed") = 0, py::arg("num_points") = 6000);

  // --- partition ------------------------------------------------------------
  py::class_<CylGridSpec>(m, "CylGridSpec")
      .def(py::init<>())
      .def_readwrite("rho_min", &CylGridSpec::rho_min)
      .def_readwrite("rho_max", &CylGridSpec::rho_max)
      .def_readwrite("z_min", &CylGridSpec::z_min)
      .def_readwrite("z_max", &CylGridSpec::z_max)
      .def_readwrite("resolution", &CylGridSpec::resolution)
      .def("cell_size", &CylGridSpec::cell_size);

  py::class_<CubicGridSpec>(m, "CubicGridSpec")
      .def(py::init<>())
      .def_readwrite("x_min", &CubicGridSpec::x_min)
      .def_readwrite("x_max", &CubicGridSpec::x_max)
      .def_readwrite("y_min", &CubicGridSpec::y_min)
      .def_readwrite("y_max", &CubicGridSpec::y_max)
      .def_readwrite("z_min", &CubicGridSpec::z_min)
      .def_readwrite("z_max", &CubicGridSpec::z_max)
      .def_readwrite("resolution", &CubicGridSpec::resolution);

  m.def(
      "cart_to_cyl",
      [](const F64& xyz) {
        if (xyz.ndim() != 2 || xyz.shape(1) != 3) throw ShapeError("xyz must have shape (N, 3)");
        py::array_t<double> out({static_cast<std::size_t>(xyz.shape(0)), std::size_t{3}});
        auto in = xyz.unchecked<2>();
        auto o = out.mutable_unchecked<2>();
        for (py::ssize_t i = 0; i < xyz.shape(0); ++i) {
          const CylPoint p = cart_to_cyl(in(i, 0), in(i, 1), in(i, 2));
          o(i, 0) = p.rho;
          o(i, 1) = p.theta;
          o(i, 2) = p.z;
        }
        return out;
      },
      py::arg("xyz"), "Rows (x, y, z) to (rho, theta, z), theta in [-pi, pi).");
  m.def(
      "assign_cells",
      [](const PointCloud& c, const CylGridSpec& g) {
        const VoxelMapping vm = assign_cells(c, g);
        return py::make_tuple(to_numpy(vm.point_cell), coords_to_numpy(vm.cells));
      },
      py::arg("cloud"), py::arg("grid"), "Returns (point -> cell index, occupied cells).");
  m.def(
      "encoding_upper_bound_miou",
      [](const PointCloud& c, const CylGridSpec& g, const std::string& enc, int k,
         int32_t ignore) { return encoding_upper_bound_miou(c, g, encoding_from(enc), k, ignore); },
      py::arg("cloud"), py::arg("grid"), py::arg("encoding"), py::arg("num_classes"),
      py::arg("ignore_id") = 255);
  m.def(
      "occupancy_by_distance",
      [](const std::vector<PointCloud>& clouds, const CylGridSpec& cyl, const CubicGridSpec& cub,
         const std::vector<double>& edges) {
        py::list rows;
        for (const auto& r : occupancy_by_distance(clouds, cyl, cub, edges)) {
          rows.append(py::make_tuple(r.scheme, r.distance_lo, r.distance_hi,
                                     r.nonempty_proportion));
        }
        return rows;
      },
      py::arg("clouds"), py::arg("cyl_grid"), py::arg("cubic_grid"),
      py::arg("distance_edges") = std::vector<double>{0, 10, 20, 30, 40, 50});

  // --- sparse convolution ---------------------------------------------------
  m.def(
      "sparse_conv",
      [](const I32& coords, const F64& features, Shape3 shape, Shape3 kernel_size,
         const F64& weights, std::optional<F64> bias, Shape3 stride) {
        SparseTensor x{coords_from_numpy(coords), matrix_from_numpy(features), shape};
        x.validate();
        const bool strided = stride != Shape3{1, 1, 1};
        const KernelSpec spec = strided ? KernelSpec::strided(kernel_size, stride)
                                        : KernelSpec::submanifold(kernel_size);
        spec.validate();
        if (weights.ndim() != 3) throw ShapeError("weights must have shape (K, C_in, C_out)");
        ConvParams p(static_cast<int>(weights.shape(0)), static_cast<int>(weights.shape(1)),
                     static_cast<int>(weights.shape(2)), bias.has_value());
        std::copy(weights.data(), weights.data() + weights.size(), p.weights.begin());
        if (bias) {
          if (static_cast<std::size_t>(bias->size()) != p.bias.size()) {
            throw ShapeError("bias length");
          }
          std::copy(bias->data(), bias->data() + bias->size(), p.bias.begin());
        }
        const Rulebook rb = build_rulebook(x.coords, shape, spec);
        const SparseTensor y = sparse_conv_forward(x, p.view(), rb);
        return py::make_tuple(coords_to_numpy(y.coords), to_numpy(y.features), y.spatial_shape);
      },
      py::arg("coords"), py::arg("features"), py::arg("shape"), py::arg("kernel_size"),
      py::arg("weights"), py::arg("bias") = py::none(), py::arg("stride") = Shape3{1, 1, 1},
      "Submanifold (stride 1) or strided sparse convolution. Returns (coords, features, shape).");

  // --- network and training -------------------------------------------------
  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &NetworkConfig::num_classes)
      .def_readwrite("base_channels", &NetworkConfig::base_channels)
      .def_readwrite("num_stages", &NetworkConfig::num_stages)
      .def_readwrite("point_mlp_widths", &NetworkConfig::point_mlp_widths)
      .def_property(
          "block_variant", [](const NetworkConfig& c) { return to_string(c.block_variant); },
          [](NetworkConfig& c, const std::string& s) {
            c.block_variant = block_variant_from_string(s);
          })
      .def_readwrite("grid", &NetworkConfig::grid)
      .def_readwrite("leaky_slope", &NetworkConfig::leaky_slope)
      .def_readwrite("use_intensity", &NetworkConfig::use_intensity)
      .def("validate", &NetworkConfig::validate)
      .def("to_text", &NetworkConfig::to_text)
      .def_static("from_text", &NetworkConfig::from_text);

  py::class_<ModelParams>(m, "ModelParams")
      .def("__eq__", [](const ModelParams& a, const ModelParams& b) { return a == b; })
      .def("names", [](const ModelParams& p) {
        std::vector<std::string> n;
        for (const auto& [k, v] : p.weights) n.push_back(k);
        return n;
      })
      .def("num_weights", [](const ModelParams& p) {
        std::size_t n = 0;
        for (const auto& [k, v] : p.weights) n += v.size();
        return n;
      });

  py::class_<Network>(m, "Network")
      .def(py::init<NetworkConfig>(), py::arg("config"))
      .def_property_readonly("config", &Network::config)
      .def("init_params", &Network::init_params, py::arg("seed") = 0)
      .def("conv_weight_count", &Network::conv_weight_count)
      .def(
          "forward",
          [](const Network& net, const PointCloud& c, const ModelParams& p) {
            const ForwardResult r = net.forward(c, p, false);
            return py::make_tuple(coords_to_numpy(r.voxel_logits.coords),
                                  to_numpy(r.voxel_logits.features), to_numpy(r.point_logits));
          },
          py::arg("cloud"), py::arg("params"),
          "Inference forward. Returns (voxel coords, voxel logits, point logits).")
      .def(
          "predict",
          [](const Network& net, const PointCloud& c, const ModelParams& p) {
            return to_numpy(predict_points(net, p, c));
          },
          py::arg("cloud"), py::arg("params"));

  m.def(
      "train",
      [](const NetworkConfig& cfg, const std::vector<PointCloud>& train,
         const std::vector<PointCloud>& val, int epochs, uint64_t seed, int max_iterations,
         double lr) {
        TrainOptions o;
        o.epochs = epochs;
        o.seed = seed;
        o.max_iterations = max_iterations;
        o.adam.lr = lr;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_loop(cfg, train, val, o);
        }
        py::list losses, epochs_out;
        for (const auto& l : r.iteration_losses) losses.append(loss_dict(l));
        for (const auto& e : r.epochs) {
          py::dict d = loss_dict(e.mean_loss);
          d["epoch"] = e.epoch;
          d["val_miou"] = e.val_miou;
          epochs_out.append(d);
        }
        py::dict out;
        out["params"] = r.params;
        out["class_weights"] = r.class_weights;
        out["iteration_losses"] = losses;
        out["epochs"] = epochs_out;
        return out;
      },
      py::arg("config"), py::arg("train"), py::arg("validation") = std::vector<PointCloud>{},
      py::arg("epochs") = 10, py::arg("seed") = 0, py::arg("max_iterations") = 0,
      py::arg("lr") = 1e-3);

  m.def(
      "save_checkpoint",
      [](const std::filesystem::path& p, const NetworkConfig& c, const ModelParams& params) {
        save_checkpoint(p, {c, params});
      },
      py::arg("path"), py::arg("config"), py::arg("params"));
  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& p) {
        Checkpoint ck = load_checkpoint(p);
        return py::make_tuple(ck.config, ck.params);
      },
      py::arg("path"));

  // --- metrics and tools ----------------------------------------------------
  m.def(
      "evaluate",
      [](const Network& net, const ModelParams& p, const std::vector<PointCloud>& clouds,
         int32_t ignore) { return miou_dict(compute_miou(evaluate(net, p, clouds, ignore))); },
      py::arg("network"), py::arg("params"), py::arg("clouds"), py::arg("ignore_id") = 255);
  m.def(
      "miou",
      [](const I32& truth, const I32& pred, int k, int32_t ignore) {
        ConfusionMatrix cm(k, ignore);
        cm.update(std::span<const int32_t>(truth.data(), truth.size()),
                  std::span<const int32_t>(pred.data(), pred.size()));
        return miou_dict(compute_miou(cm));
      },
      py::arg("truth"), py::arg("pred"), py::arg("num_classes"), py::arg("ignore_id") = 255);
  m.def(
      "selftest",
      [](uint64_t seed) {
        std::ostringstream out;
        const bool ok = run_selftest(out, seed);
        return py::make_tuple(ok, out.str());
      },
      py::arg("seed") = 0);
  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli_main(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation; returns (exit code, stdout, stderr).");
}
