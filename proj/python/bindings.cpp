// Python extension. Configs and summaries cross the boundary as JSON text;
// the pure-Python wrapper in pfeed/__init__.py turns them into dicts.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"
#include "pfeed/autodiff.hpp"
#include "pfeed/encoder.hpp"
#include "pfeed/errors.hpp"
#include "pfeed/eval.hpp"
#include "pfeed/feed_engine.hpp"
#include "pfeed/feed_server.hpp"
#include "pfeed/pipeline.hpp"
#include "pfeed/similarity_store.hpp"
#include "pfeed/tokenizer.hpp"
#include "pfeed/trainer.hpp"
#include "pfeed/vector_index.hpp"

namespace py = pybind11;
namespace pp = pfeed::pipeline;
using nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

pp::PipelineConfig config_of(const std::string& text) {
  return pp::config_from_json(text.empty() ? json::object() : json::parse(text));
}

FloatArray to_array(const std::vector<float>& v) {
  FloatArray out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

pfeed::ad::Tensor<double> tensor_of(const DoubleArray& a) {
  if (a.ndim() != 2) throw pfeed::DimensionError("expected a 2-d array");
  const auto* p = a.data();
  return pfeed::ad::Tensor<double>::from({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                                         std::vector<double>(p, p + a.size()));
}

py::dict embeddings_dict(const pfeed::model::ItemEmbeddings& e) {
  py::dict d;
  d["item_id"] = e.item_id;
  d["q_view"] = to_array(e.q_view);
  d["q_buy"] = to_array(e.q_buy);
  d["target"] = to_array(e.target);
  return d;
}

}  // namespace

PYBIND11_MODULE(_pfeed, m) {
  m.doc() = "Personalized feeds from precomputed item-to-item similarities";

  py::register_exception<pfeed::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<pfeed::InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<pfeed::DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<pfeed::DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<pfeed::ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<pfeed::NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // Pipeline stages.
  m.def("default_config", [] { return pp::to_json(pp::PipelineConfig{}).dump(); });
  m.def("normalize_config", [](const std::string& text) { return pp::to_json(config_of(text)).dump(); });
  m.def("derive_seed", &pp::derive_seed, py::arg("root"), py::arg("stage"));

  using Stage = json (*)(const pp::PipelineConfig&);
  const std::pair<const char*, Stage> stages[] = {
      {"run_synth", &pp::run_synth},   {"run_mine", &pp::run_mine},     {"run_tokenizer_train", &pp::run_tokenizer_train},
      {"run_embed", &pp::run_embed},   {"run_index", &pp::run_index},   {"run_precompute", &pp::run_precompute},
  };
  for (const auto& [name, fn] : stages) {
    m.def(name, [fn = fn](const std::string& config) {
      py::gil_scoped_release release;
      return fn(config_of(config)).dump();
    });
  }
  m.def("run_train", [](const std::string& config) {
    py::gil_scoped_release release;
    return pp::run_train(config_of(config)).dump();
  });
  m.def("run_feed", [](const std::string& config, const std::string& customer) {
    return pp::run_feed(config_of(config), customer).dump();
  });
  m.def("run_refresh", [](const std::string& config, const std::string& mode, const std::string& active) {
    py::gil_scoped_release release;
    return pp::run_refresh(config_of(config), mode, active).dump();
  });
  m.def("run_eval", [](const std::string& config, bool untrained) {
    py::gil_scoped_release release;
    return pp::run_eval(config_of(config), untrained).dump();
  });

  // Tokenizer.
  py::class_<pfeed::tok::Vocabulary>(m, "Vocabulary")
      .def_static(
          "train",
          [](const std::vector<std::string>& corpus, std::size_t size) {
            return pfeed::tok::Vocabulary::train(corpus, size);
          },
          py::arg("corpus"), py::arg("size") = pfeed::tok::kDefaultVocabSize)
      .def_static("load", &pfeed::tok::Vocabulary::load)
      .def("save", &pfeed::tok::Vocabulary::save)
      .def("encode", &pfeed::tok::Vocabulary::encode, py::arg("text"), py::arg("max_len") = pfeed::tok::kDefaultMaxLen)
      .def("detokenize", [](const pfeed::tok::Vocabulary& v, const std::vector<int>& ids) { return v.detokenize(ids); })
      .def("token", &pfeed::tok::Vocabulary::token)
      .def("id", &pfeed::tok::Vocabulary::id)
      .def_property_readonly("tokens", &pfeed::tok::Vocabulary::tokens)
      .def("__len__", &pfeed::tok::Vocabulary::size);

  // Encoder.
  py::class_<pfeed::model::EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def_readwrite("layers", &pfeed::model::EncoderConfig::layers)
      .def_readwrite("heads", &pfeed::model::EncoderConfig::heads)
      .def_readwrite("hidden_dim", &pfeed::model::EncoderConfig::hidden_dim)
      .def_readwrite("ffn_dim", &pfeed::model::EncoderConfig::ffn_dim)
      .def_readwrite("max_seq", &pfeed::model::EncoderConfig::max_seq)
      .def_readwrite("vocab_size", &pfeed::model::EncoderConfig::vocab_size)
      .def_property(
          "mode", [](const pfeed::model::EncoderConfig& c) { return std::string(pfeed::model::to_string(c.mode)); },
          [](pfeed::model::EncoderConfig& c, const std::string& s) { c.mode = pfeed::model::parse_encoder_mode(s); })
      .def("parameter_count", &pfeed::model::EncoderConfig::closed_form_parameter_count);

  using Encoder = pfeed::model::Encoder<float>;
  py::class_<Encoder>(m, "Encoder")
      .def(py::init<pfeed::model::EncoderConfig, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &Encoder::load)
      .def("save", &Encoder::save)
      .def_property_readonly("config", &Encoder::config)
      .def("parameter_count", &Encoder::parameter_count)
      .def("forward_simo", [](const Encoder& e, const std::vector<int>& ids) { return embeddings_dict(e.forward_simo(ids)); })
      .def("forward_siso",
           [](const Encoder& e, const std::vector<int>& ids, const std::string& role) {
             const auto r = role == "view"  ? pfeed::model::Role::view_query
                            : role == "buy" ? pfeed::model::Role::buy_query
                            : role == "target"
                                ? pfeed::model::Role::target
                                : throw pfeed::InputError("role must be view, buy or target");
             return to_array(e.forward_siso(ids, r));
           })
      .def("embed_items",
           [](const Encoder& e, const std::vector<pfeed::tok::TokenIds>& items, const std::vector<std::string>& ids) {
             std::vector<pfeed::model::ItemEmbeddings> out;
             {
               py::gil_scoped_release release;
               out = e.embed_items(items, ids);
             }
             py::list l;
             for (const auto& x : out) l.append(embeddings_dict(x));
             return l;
           });

  // Losses on plain arrays of unit rows.
  m.def(
      "loss_query_to_target",
      [](const DoubleArray& q, const DoubleArray& t, std::optional<DoubleArray> neg, double beta, bool in_batch) {
        auto n = neg ? tensor_of(*neg) : pfeed::ad::Tensor<double>{};
        return pfeed::train::loss_query_to_target(tensor_of(q), tensor_of(t), n,
                                                  pfeed::ad::Tensor<double>::scalar(beta), in_batch)
            .item();
      },
      py::arg("q"), py::arg("t"), py::arg("t_neg") = py::none(), py::arg("beta") = 10.0, py::arg("in_batch") = true);
  m.def(
      "loss_target_to_query",
      [](const DoubleArray& q, const DoubleArray& t, std::optional<DoubleArray> neg, double beta, bool in_batch) {
        auto n = neg ? tensor_of(*neg) : pfeed::ad::Tensor<double>{};
        return pfeed::train::loss_target_to_query(tensor_of(q), tensor_of(t), n,
                                                  pfeed::ad::Tensor<double>::scalar(beta), in_batch)
            .item();
      },
      py::arg("q"), py::arg("t"), py::arg("q_neg") = py::none(), py::arg("beta") = 10.0, py::arg("in_batch") = true);

  // Index.
  py::class_<pfeed::index::VectorIndex>(m, "VectorIndex")
      .def_static(
          "build",
          [](std::vector<std::string> ids, const FloatArray& vectors, const std::string& variant, std::size_t clusters,
             std::size_t nprobe, std::uint64_t seed) {
            if (vectors.ndim() != 2) throw pfeed::DimensionError("vectors must be 2-d");
            pfeed::index::BuildParams p;
            p.variant = pfeed::index::parse_variant(variant);
            p.clusters = clusters;
            p.nprobe = nprobe;
            p.seed = seed;
            const auto* d = vectors.data();
            py::gil_scoped_release release;
            return pfeed::index::VectorIndex::build(std::move(ids), std::vector<float>(d, d + vectors.size()),
                                                    static_cast<std::size_t>(vectors.shape(1)), p);
          },
          py::arg("ids"), py::arg("vectors"), py::arg("variant") = "exact", py::arg("clusters") = 1,
          py::arg("nprobe") = 1, py::arg("seed") = 0)
      .def_static("load", &pfeed::index::VectorIndex::load)
      .def("save", &pfeed::index::VectorIndex::save)
      .def("__len__", &pfeed::index::VectorIndex::size)
      .def_property_readonly("dim", &pfeed::index::VectorIndex::dim)
      .def("search",
           [](const pfeed::index::VectorIndex& idx, const FloatArray& q, std::size_t m) {
             std::vector<std::pair<std::string, float>> out;
             for (auto& h : idx.search(std::span<const float>(q.data(), q.size()), m)) out.emplace_back(h.id, h.score);
             return out;
           },
           py::arg("query"), py::arg("m") = 10);

  // Store.
  py::class_<pfeed::store::SimilarityStore>(m, "SimilarityStore")
      .def_static("load", &pfeed::store::SimilarityStore::load)
      .def_property_readonly("tau", &pfeed::store::SimilarityStore::tau)
      .def("__len__", &pfeed::store::SimilarityStore::size)
      .def("result_count", &pfeed::store::SimilarityStore::result_count)
      .def("lookup", [](const pfeed::store::SimilarityStore& s, const std::string& item, const std::string& relation) {
        std::vector<std::pair<std::string, double>> out;
        for (const auto& r : s.lookup(item, pfeed::parse_relation(relation))) out.emplace_back(r.target_id, r.score);
        return out;
      });
  m.def("nearest_rank_percentile", &pfeed::store::nearest_rank_percentile, py::arg("values"), py::arg("percentile"));

  // Feeds.
  py::class_<pfeed::feed::FeedService, std::shared_ptr<pfeed::feed::FeedService>>(m, "FeedService")
      .def_static("from_config", [](const std::string& config) {
        py::gil_scoped_release release;
        return pp::make_feed_service(config_of(config));
      })
      .def("ingest",
           [](pfeed::feed::FeedService& s, const std::string& event_json) {
             return s.ingest(pfeed::feed::event_from_json(json::parse(event_json)));
           })
      .def("refresh_all", &pfeed::feed::FeedService::refresh_all, py::call_guard<py::gil_scoped_release>())
      .def("refresh_active", &pfeed::feed::FeedService::refresh_active, py::call_guard<py::gil_scoped_release>())
      .def("customers", &pfeed::feed::FeedService::customers)
      .def(
          "feed",
          [](pfeed::feed::FeedService& s, const std::string& customer, const std::string& surface,
             std::size_t size) -> std::optional<std::string> {
            auto f = s.feed(customer, pfeed::feed::parse_surface(surface), size);
            if (!f) return std::nullopt;
            return pfeed::feed::to_json(std::span<const pfeed::feed::FeedItem>(*f)).dump();
          },
          py::arg("customer"), py::arg("surface") = "all", py::arg("size") = 0);

  // Evaluation helpers.
  m.def("random_baseline", &pfeed::eval::random_baseline, py::arg("k"), py::arg("distractors"));
  m.def("baseline_sigma", &pfeed::eval::baseline_sigma, py::arg("k"), py::arg("distractors"), py::arg("n"));
}
