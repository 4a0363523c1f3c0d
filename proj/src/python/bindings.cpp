#include "mtcr/aggregator.hpp"
#include "mtcr/evaluation.hpp"
#include "mtcr/pipeline.hpp"
#include "mtcr/synth_city.hpp"
#include "mtcr/tcn_autoencoder.hpp"
#include "mtcr/traffic.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace mtcr;

namespace {

WeightedClustering make_clustering(const std::vector<int>& labels, std::optional<std::vector<double>> weights) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < labels.size(); ++i) ids.push_back(std::to_string(i));
  auto c = WeightedClustering::uniform(std::move(ids), labels);
  if (weights) c.weights = *weights;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Region embeddings from mobile traffic";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), (std::string(to_string(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "downsample_sum",
      [](const std::vector<double>& values, std::int64_t step, std::int64_t target_step, std::int64_t start) {
        return downsample_sum({0, "series", start, step, values}, target_step).values;
      },
      py::arg("values"), py::arg("step"), py::arg("target_step"), py::arg("start") = 0);

  m.def(
      "synthesize_city",
      [](const std::filesystem::path& dir, std::uint64_t seed, int days, int rows, int cols, int regions,
         bool slot_dependent) {
        CitySpec spec;
        spec.seed = seed;
        spec.days = days;
        spec.n_rows = rows;
        spec.n_cols = cols;
        spec.n_regions = regions;
        spec.slot_dependent = slot_dependent;
        return export_city(generate_city(spec), dir);
      },
      py::arg("dir"), py::arg("seed") = 1, py::arg("days") = 14, py::arg("rows") = 16, py::arg("cols") = 16,
      py::arg("regions") = 32, py::arg("slot_dependent") = false,
      "Writes a synthetic city to `dir`; returns file name -> sha256.");

  py::class_<TcnAutoencoder>(m, "TcnAutoencoder")
      .def(py::init([](int input_channels, int length, std::vector<int> channels, std::vector<int> dilations,
                       int kernel_size, int pool, int bottleneck, const std::string& activation, std::uint64_t seed) {
             TcnConfig c;
             c.input_channels = input_channels;
             c.length = length;
             c.channels = std::move(channels);
             c.dilations = std::move(dilations);
             c.kernel_size = kernel_size;
             c.pool = pool;
             c.bottleneck = bottleneck;
             c.activation = parse_activation(activation);
             c.seed = seed;
             return TcnAutoencoder(c);
           }),
           py::arg("input_channels") = 4, py::arg("length") = 336, py::arg("channels") = std::vector<int>{32, 32, 32},
           py::arg("dilations") = std::vector<int>{1, 2, 4}, py::arg("kernel_size") = 3, py::arg("pool") = 8,
           py::arg("bottleneck") = 44, py::arg("activation") = "relu", py::arg("seed") = 0)
      .def_property_readonly("receptive_field", [](const TcnAutoencoder& a) { return a.config().receptive_field(); })
      .def("encode", py::overload_cast<const Eigen::MatrixXd&>(&TcnAutoencoder::encode, py::const_), py::arg("x"))
      .def("decode", &TcnAutoencoder::decode, py::arg("z"))
      .def("reconstruct", &TcnAutoencoder::reconstruct, py::arg("x"));

  py::class_<AggregatorModel>(m, "Aggregator")
      .def(py::init([](const std::string& kind, int input_dim, int output_dim, int cap, std::uint64_t seed) {
             AggregatorConfig c;
             c.kind = parse_aggregator_kind(kind);
             c.input_dim = input_dim;
             c.output_dim = output_dim;
             c.cap = cap;
             c.seed = seed;
             c.validate();
             return AggregatorModel(c);
           }),
           py::arg("kind") = "transformer", py::arg("input_dim") = 44, py::arg("output_dim") = 64,
           py::arg("cap") = 300, py::arg("seed") = 0)
      .def_property_readonly("kind", [](const AggregatorModel& a) { return std::string(to_string(a.kind())); })
      .def("aggregate", &AggregatorModel::aggregate_rows, py::arg("rows"),
           "Region embedding of a (count x input_dim) set of cell embeddings.");

  m.def("triplet_loss", &triplet_loss, py::arg("anchor"), py::arg("positive"), py::arg("negative"),
        py::arg("margin") = 1.0);

  m.def(
      "weighted_entropy",
      [](const std::vector<int>& labels, std::optional<std::vector<double>> weights) {
        return weighted_entropy(make_clustering(labels, std::move(weights)));
      },
      py::arg("labels"), py::arg("weights") = py::none());
  m.def(
      "weighted_mutual_information",
      [](const std::vector<int>& u, const std::vector<int>& v, std::optional<std::vector<double>> weights) {
        return weighted_mutual_information(make_clustering(u, weights), make_clustering(v, weights));
      },
      py::arg("u"), py::arg("v"), py::arg("weights") = py::none());
  m.def(
      "adjusted_mutual_information",
      [](const std::vector<int>& u, const std::vector<int>& v, std::optional<std::vector<double>> weights,
         const std::string& mode, int n_perm, std::uint64_t seed) {
        return adjusted_mutual_information(make_clustering(u, weights), make_clustering(v, weights),
                                           {parse_ami_mode(mode), n_perm, seed});
      },
      py::arg("u"), py::arg("v"), py::arg("weights") = py::none(), py::arg("mode") = "auto",
      py::arg("n_perm") = 200, py::arg("seed") = 0);

  m.def(
      "ward_cluster",
      [](const Eigen::MatrixXd& x, int k) {
        std::vector<std::string> ids;
        for (Eigen::Index i = 0; i < x.rows(); ++i) ids.push_back(std::to_string(i));
        return ward_cluster(ids, x, k).labels;
      },
      py::arg("x"), py::arg("k"));

  m.def("pipeline_stages", &pipeline_stages);
  m.def(
      "run_pipeline",
      [](const std::filesystem::path& config, const std::string& stage, std::optional<std::string> slot,
         const std::map<std::string, std::string>& overrides) {
        auto c = PipelineConfig::load(config);
        for (const auto& [k, v] : overrides) c.set(k, v);
        std::optional<TimeSlot> only;
        if (slot) only = parse_time_slot(*slot);
        py::list out;
        for (const auto& o : Pipeline(c).run(stage, only)) {
          py::dict d;
          d["stage"] = o.stage;
          d["slot"] = o.slot ? py::object(py::str(std::string(to_string(*o.slot)))) : py::object(py::none());
          d["skipped"] = o.skipped;
          d["outputs"] = o.outputs;
          out.append(d);
        }
        return out;
      },
      py::arg("config"), py::arg("stage") = "all", py::arg("slot") = py::none(),
      py::arg("overrides") = std::map<std::string, std::string>{});
}
