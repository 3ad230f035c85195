#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <optional>
#include <sstream>

#include "flashblock/analysis.hpp"
#include "flashblock/attention.hpp"
#include "flashblock/bench.hpp"
#include "flashblock/errors.hpp"
#include "flashblock/kv_cache.hpp"
#include "flashblock/linalg.hpp"
#include "flashblock/model.hpp"
#include "flashblock/reuse_policy.hpp"
#include "flashblock/sim.hpp"
#include "flashblock/sparse.hpp"
#include "flashblock/verify.hpp"

namespace py = pybind11;
namespace fb = flashblock;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

fb::Tensor2D to_tensor(const Array& a) {
  if (a.ndim() != 2) throw fb::ShapeError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  std::vector<double> data(a.data(), a.data() + rows * cols);
  return fb::Tensor2D(rows, cols, std::move(data));
}

Array to_array(const fb::Tensor2D& t) {
  Array a({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

py::tuple partial_tuple(const fb::AttnPartial<double>& p) {
  return py::make_tuple(to_array(p.out), py::array_t<double>(p.lognorm.size(), p.lognorm.data()));
}

fb::AttnPartial<double> tuple_partial(const Array& out, const std::vector<double>& lognorm) {
  return {to_tensor(out), lognorm};
}

py::dict trace_dict(const fb::StepTrace& t) {
  py::dict d;
  d["block_id"] = t.block_id;
  d["step"] = t.step_index;
  d["decision"] = std::string(fb::to_string(t.decision));
  d["M"] = t.updated_tokens;
  d["keys_attended"] = t.keys_attended;
  d["kv_rows_read"] = t.kv_rows_read;
  d["external_rows_read"] = t.external_rows_read;
  d["cache_hits"] = t.cache_hits;
  d["checksum"] = t.output_checksum;
  d["linf_gap"] = t.linf_gap ? py::object(py::float_(*t.linf_gap)) : py::object(py::none());
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Block-attention decomposition, reuse policy and simulator";

  py::register_exception<fb::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<fb::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<fb::DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<fb::BoundsError>(m, "BoundsError", PyExc_IndexError);
  py::register_exception<fb::ReusePreconditionError>(m, "ReusePreconditionError",
                                                     PyExc_RuntimeError);
  py::register_exception<fb::StalenessError>(m, "StalenessError", PyExc_RuntimeError);
  py::register_exception<fb::CalibrationError>(m, "CalibrationError", PyExc_RuntimeError);

  // kernels
  m.def("softmax_rows", [](const Array& x) { return to_array(fb::softmax_rows(to_tensor(x))); });
  m.def(
      "attention_dense",
      [](const Array& q, const Array& k, const Array& v, std::optional<double> scale) {
        const auto qt = to_tensor(q);
        return to_array(fb::attention_dense(qt, to_tensor(k), to_tensor(v),
                                            scale.value_or(fb::default_scale(qt.cols()))));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("scale") = py::none());
  m.def(
      "attention_streamed",
      [](const Array& q, const Array& k, const Array& v, std::size_t boundary,
         std::optional<double> scale, std::size_t tile_size) {
        const auto qt = to_tensor(q), kt = to_tensor(k), vt = to_tensor(v);
        fb::TensorKvSource<double> src(kt, vt);
        auto parts = fb::attention_streamed(qt, src, scale.value_or(fb::default_scale(qt.cols())),
                                            boundary, {tile_size, 0.0});
        return py::make_tuple(partial_tuple(parts.external), partial_tuple(parts.internal));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("boundary"),
      py::arg("scale") = py::none(), py::arg("tile_size") = 64,
      "Returns ((external_out, external_lognorm), (internal_out, internal_lognorm)).");
  m.def(
      "merge_partials",
      [](const Array& out_a, const std::vector<double>& l_a, const Array& out_b,
         const std::vector<double>& l_b) {
        return to_array(fb::merge_partials(tuple_partial(out_a, l_a), tuple_partial(out_b, l_b)));
      },
      py::arg("out_a"), py::arg("lognorm_a"), py::arg("out_b"), py::arg("lognorm_b"));

  // kv cache
  py::class_<fb::AccessCounters>(m, "AccessCounters")
      .def_readonly("key_rows_read", &fb::AccessCounters::key_rows_read)
      .def_readonly("value_rows_read", &fb::AccessCounters::value_rows_read)
      .def_readonly("rows_appended", &fb::AccessCounters::rows_appended)
      .def_readonly("cache_bytes_resident", &fb::AccessCounters::cache_bytes_resident);
  py::class_<fb::KvCache>(m, "KvCache")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("num_layers"),
           py::arg("num_heads"), py::arg("head_dim"))
      .def("commit_block",
           [](fb::KvCache& kv, std::size_t l, std::size_t h, const Array& k, const Array& v) {
             return kv.commit_block(l, h, to_tensor(k), to_tensor(v));
           })
      .def("read_range",
           [](fb::KvCache& kv, std::size_t l, std::size_t h, std::size_t a, std::size_t b) {
             const auto s = kv.read_range(l, h, a, b);
             return py::make_tuple(to_array(s.keys), to_array(s.values));
           })
      .def("committed_tokens", &fb::KvCache::committed_tokens)
      .def("block_boundaries", &fb::KvCache::block_boundaries)
      .def("counters", &fb::KvCache::snapshot_counters);

  // reuse policy
  py::enum_<fb::ReuseMode>(m, "ReuseMode")
      .value("TOKEN_THRESHOLD", fb::ReuseMode::TokenThreshold)
      .value("HEAD_GATED", fb::ReuseMode::HeadGated)
      .value("ALWAYS_RECOMPUTE", fb::ReuseMode::AlwaysRecompute)
      .value("ALWAYS_REUSE", fb::ReuseMode::AlwaysReuse);
  py::class_<fb::ReuseConfig>(m, "ReuseConfig")
      .def(py::init([](std::size_t tau, double gamma, fb::ReuseMode mode) {
             fb::ReuseConfig c{tau, gamma, mode};
             c.validate();
             return c;
           }),
           py::arg("tau") = 2, py::arg("gamma") = 0.9,
           py::arg("mode") = fb::ReuseMode::TokenThreshold)
      .def_readwrite("tau", &fb::ReuseConfig::tau)
      .def_readwrite("gamma", &fb::ReuseConfig::gamma)
      .def_readwrite("mode", &fb::ReuseConfig::mode);
  m.def(
      "decide",
      [](const fb::ReuseConfig& c, bool cache_valid, bool first_visit, std::size_t updated,
         bool head_gate) {
        return fb::decide(c, cache_valid, first_visit, updated, head_gate) ==
                       fb::ReuseDecision::Reuse
                   ? "reuse"
                   : "recompute";
      },
      py::arg("config"), py::arg("cache_valid"), py::arg("first_visit"),
      py::arg("updated_tokens"), py::arg("head_gate") = true);
  m.def("count_updated_tokens",
        [](const std::vector<fb::TokenId>& a, const std::vector<fb::TokenId>& b) {
          return fb::count_updated_tokens(a, b);
        });

  // model + simulator
  py::class_<fb::ModelConfig>(m, "ModelConfig")
      .def(py::init([](std::size_t vocab, std::size_t layers, std::size_t heads, std::size_t dim,
                       std::uint64_t seed, bool positional) {
             fb::ModelConfig c;
             c.vocab_size = vocab;
             c.num_layers = layers;
             c.num_heads = heads;
             c.head_dim = dim;
             c.seed = seed;
             c.positional = positional;
             c.validate();
             return c;
           }),
           py::arg("vocab_size") = 256, py::arg("num_layers") = 4, py::arg("num_heads") = 4,
           py::arg("head_dim") = 16, py::arg("seed") = 0, py::arg("positional") = true)
      .def_readonly("vocab_size", &fb::ModelConfig::vocab_size)
      .def_readonly("num_layers", &fb::ModelConfig::num_layers)
      .def_readonly("num_heads", &fb::ModelConfig::num_heads)
      .def_readonly("head_dim", &fb::ModelConfig::head_dim);
  py::class_<fb::SyntheticModel>(m, "SyntheticModel")
      .def(py::init<fb::ModelConfig>())
      .def_property_readonly("config", &fb::SyntheticModel::config)
      .def_property_readonly("mask_token", &fb::SyntheticModel::mask_token)
      .def(
          "set_head_fixture",
          [](fb::SyntheticModel& model, std::size_t l, std::size_t h, bool constant_values,
             double query_noise, double block_value_noise) {
            model.set_head_fixture(l, h, {constant_values, query_noise, block_value_noise});
          },
          py::arg("layer"), py::arg("head"), py::arg("constant_values") = false,
          py::arg("query_noise") = 0.0, py::arg("block_value_noise") = 0.0);

  m.def(
      "run_sequence",
      [](const fb::SyntheticModel& model, std::size_t prompt_len, std::size_t num_blocks,
         std::size_t block_size, const fb::ReuseConfig& policy, bool verify, std::uint64_t seed,
         double confidence_threshold) {
        fb::RunConfig run;
        run.prompt_len = prompt_len;
        run.num_blocks = num_blocks;
        run.sim.block_size = block_size;
        run.sim.confidence_threshold = confidence_threshold;
        const auto r = fb::run_sequence(model, run, policy, verify, seed);
        py::list traces;
        for (const auto& t : r.traces) traces.append(trace_dict(t));
        py::dict out;
        out["traces"] = traces;
        out["token_ids"] = r.token_ids;
        out["key_rows_read"] = r.counters.key_rows_read;
        return out;
      },
      py::arg("model"), py::arg("prompt_len") = 32, py::arg("num_blocks") = 2,
      py::arg("block_size") = 8, py::arg("policy") = fb::ReuseConfig{}, py::arg("verify") = false,
      py::arg("seed") = 0, py::arg("confidence_threshold") = 0.0);

  m.def(
      "quality_probe",
      [](const fb::SyntheticModel& model, const fb::ReuseConfig& a, const fb::ReuseConfig& b,
         std::size_t seeds, std::size_t prompt_len, std::size_t num_blocks,
         double confidence_threshold) {
        fb::ProbeConfig cfg;
        cfg.num_seeds = seeds;
        cfg.run.prompt_len = prompt_len;
        cfg.run.num_blocks = num_blocks;
        cfg.run.sim.confidence_threshold = confidence_threshold;
        const auto rep = fb::quality_probe(model, a, b, cfg);
        py::dict out;
        out["match_rate"] = rep.match_rate;
        out["exact_matches"] = rep.exact_matches;
        out["mean_linf_gap"] = rep.mean_linf_gap;
        out["max_linf_gap"] = rep.max_linf_gap;
        out["m_histogram"] = rep.m_histogram;
        return out;
      },
      py::arg("model"), py::arg("policy_a"), py::arg("policy_b"), py::arg("seeds") = 16,
      py::arg("prompt_len") = 32, py::arg("num_blocks") = 2,
      py::arg("confidence_threshold") = 0.0);

  // sparse
  m.def(
      "select_key_blocks",
      [](const Array& q, const Array& keys, std::size_t context_len, double density,
         std::size_t key_block_size, std::optional<double> scale) {
        const auto qt = to_tensor(q);
        return fb::select_key_blocks(qt, to_tensor(keys), context_len, density, key_block_size,
                                     scale.value_or(fb::default_scale(qt.cols())));
      },
      py::arg("q"), py::arg("keys"), py::arg("context_len"), py::arg("density"),
      py::arg("key_block_size") = 16, py::arg("scale") = py::none());
  m.def(
      "measure_sparse_gap",
      [](const fb::SyntheticModel& model, const std::vector<double>& densities,
         std::size_t seeds, std::size_t prompt_len, std::uint64_t first_seed) {
        fb::SparseGapConfig cfg;
        cfg.num_seeds = seeds;
        cfg.prompt_len = prompt_len;
        cfg.first_seed = first_seed;
        py::list rows;
        for (const auto& r : fb::measure_sparse_gap(model, densities, cfg)) {
          rows.append(py::dict(py::arg("density") = r.density,
                               py::arg("l1_sparse_only") = r.l1_sparse_only,
                               py::arg("l1_with_residual") = r.l1_with_residual,
                               py::arg("seed") = r.seed));
        }
        return rows;
      },
      py::arg("model"), py::arg("densities"), py::arg("seeds") = 1, py::arg("prompt_len") = 256,
      py::arg("first_seed") = 0);

  // analysis
  m.def("pairwise_step_similarity", [](const Array& a, const Array& b) {
    return to_array(fb::pairwise_step_similarity(to_tensor(a), to_tensor(b)));
  });
  m.def(
      "stability_study",
      [](const fb::SyntheticModel& model, std::size_t steps, std::size_t prompt_len,
         std::uint64_t seed) {
        fb::StabilityConfig cfg;
        cfg.steps = steps;
        cfg.prompt_len = prompt_len;
        cfg.seed = seed;
        const auto study = fb::stability_study(model, cfg);
        py::list rows;
        for (const auto& r : study.summary) {
          rows.append(py::dict(py::arg("layer") = r.layer, py::arg("head") = r.head,
                               py::arg("step") = r.step,
                               py::arg("mean_diag_out") = r.mean_diag_out,
                               py::arg("mean_diag_in") = r.mean_diag_in));
        }
        return rows;
      },
      py::arg("model"), py::arg("steps") = 8, py::arg("prompt_len") = 64, py::arg("seed") = 0);
  m.def(
      "calibrate_head_gates",
      [](const fb::SyntheticModel& model, std::size_t samples, double gamma,
         std::size_t prompt_len, std::uint64_t seed) {
        fb::CalibrationOptions opts;
        opts.samples = samples;
        opts.gamma = gamma;
        opts.prompt_len = prompt_len;
        opts.seed = seed;
        return fb::calibrate_head_gates(model, opts).to_json().dump();
      },
      py::arg("model"), py::arg("samples") = 4, py::arg("gamma") = 0.9,
      py::arg("prompt_len") = 64, py::arg("seed") = 0, "Returns the gate table as JSON text.");

  // bench
  m.def(
      "sweep_context",
      [](const fb::SyntheticModel& model, const std::vector<std::size_t>& contexts,
         const std::vector<std::size_t>& taus, std::uint64_t seed) {
        fb::SweepConfig cfg;
        cfg.contexts = contexts;
        cfg.taus = taus;
        cfg.seed = seed;
        std::ostringstream os;
        fb::write_sweep_csv(os, fb::sweep_context(model, cfg));
        return os.str();
      },
      py::arg("model"), py::arg("contexts"), py::arg("taus") = std::vector<std::size_t>{2},
      py::arg("seed") = 0, "Returns the sweep as CSV text.");
}
