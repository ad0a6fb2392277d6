#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "voxrep/heads.hpp"
#include "voxrep/ingest.hpp"
#include "voxrep/lstm.hpp"
#include "voxrep/metrics.hpp"
#include "voxrep/nifti.hpp"
#include "voxrep/pca.hpp"
#include "voxrep/synth.hpp"
#include "voxrep/vae.hpp"

namespace py = pybind11;
using namespace voxrep;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

TensorF tensor_from(const FloatArray& arr) {
    Shape shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
    TensorF t(shape);
    std::copy_n(arr.data(), t.numel(), t.v.data());
    return t;
}

FloatArray array_from(const TensorF& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    FloatArray arr(shape);
    std::copy_n(t.v.data(), t.numel(), arr.mutable_data());
    return arr;
}

Eigen::MatrixXd matrix_from(const DoubleArray& arr) {
    if (arr.ndim() != 2) throw ShapeError("expected a 2-d array");
    Eigen::MatrixXd m(arr.shape(0), arr.shape(1));
    for (py::ssize_t r = 0; r < arr.shape(0); ++r)
        for (py::ssize_t c = 0; c < arr.shape(1); ++c) m(r, c) = arr.at(r, c);
    return m;
}

DoubleArray array_from_matrix(const Eigen::MatrixXd& m) {
    DoubleArray arr({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
    for (py::ssize_t r = 0; r < m.rows(); ++r)
        for (py::ssize_t c = 0; c < m.cols(); ++c) arr.mutable_at(r, c) = m(r, c);
    return arr;
}

ingest::VolumeSeries series_from(const FloatArray& arr, float tr, bool normalized) {
    if (arr.ndim() != 4) throw ShapeError("expected a [T, X, Y, Z] array");
    ingest::VolumeSeries v;
    v.subject_id = "array";
    v.data = tensor_from(arr);
    v.tr_seconds = tr;
    v.normalized = normalized;
    return v;
}

vae::VaeSpec spec_of(int64_t latent_dim, std::array<int64_t, 3> spatial,
                     std::vector<int64_t> channels) {
    vae::VaeSpec spec;
    spec.latent_dim = latent_dim;
    spec.input_spatial = spatial;
    if (!channels.empty()) spec.encoder_channels = std::move(channels);
    return spec;
}

class PyVae {
public:
    PyVae(int64_t latent_dim, std::array<int64_t, 3> spatial, uint64_t seed,
          std::vector<int64_t> channels)
        : model_(spec_of(latent_dim, spatial, std::move(channels)), seed) {}
    explicit PyVae(const vae::VaeCheckpoint& ckpt) : model_(ckpt), ckpt_(ckpt) {}

    py::tuple encode(const FloatArray& volumes) {
        TensorF vols = tensor_from(volumes);
        if (vols.rank() != 4) throw ShapeError("encode expects [N, X, Y, Z]");
        tc::NoGradGuard eval;
        const auto& sp = model_.spec().input_spatial;
        TensorF batch({vols.shape[0], 1, sp[0], sp[1], sp[2]});
        if (batch.numel() != vols.numel())
            throw ShapeError("encode: volume grid does not match the model");
        std::copy_n(vols.v.data(), vols.numel(), batch.v.data());
        auto d = model_.encode(vae::VarF::constant(std::move(batch)));
        TensorF mu(d.mu.tensor()), lv(d.log_var.tensor());
        return py::make_tuple(array_from(mu), array_from(lv));
    }

    FloatArray decode(const FloatArray& z) {
        TensorF zt = tensor_from(z);
        if (zt.rank() != 2) throw ShapeError("decode expects [N, L]");
        tc::NoGradGuard eval;
        auto out = model_.decode(vae::VarF::constant(std::move(zt)));
        const auto& sp = model_.spec().input_spatial;
        TensorF vols({out.shape()[0], sp[0], sp[1], sp[2]}, out.value());
        return array_from(vols);
    }

    FloatArray infer_latents(const FloatArray& series, int64_t batch_size) {
        return array_from(model_.infer_mu(tensor_from(series), batch_size));
    }

    std::vector<std::map<std::string, double>> train(const FloatArray& train_volumes,
                                                     const FloatArray& val_volumes,
                                                     int64_t epochs, double lr,
                                                     int64_t batch_size, int64_t patience,
                                                     double kl_weight, uint64_t seed) {
        vae::TrainData data;
        auto split_rows = [](const FloatArray& arr, std::vector<TensorF>& out) {
            TensorF all = tensor_from(arr);
            if (all.rank() != 4) throw ShapeError("train expects [N, X, Y, Z] stacks");
            const int64_t vox = all.numel() / all.shape[0];
            for (int64_t i = 0; i < all.shape[0]; ++i) {
                TensorF s({all.shape[1], all.shape[2], all.shape[3]});
                std::copy_n(all.v.data() + i * vox, vox, s.v.data());
                out.push_back(std::move(s));
            }
        };
        split_rows(train_volumes, data.train);
        split_rows(val_volumes, data.val);
        vae::TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.batch_size = batch_size;
        cfg.patience = std::min(patience, epochs);
        cfg.kl_weight = kl_weight;
        cfg.seed = seed;
        ckpt_ = vae::train(model_.spec(), data, cfg);
        model_.restore_values(*ckpt_);
        std::vector<std::map<std::string, double>> history;
        for (const auto& h : ckpt_->history)
            history.push_back({{"epoch", double(h.epoch)},
                               {"train_total", h.train_total},
                               {"train_recon", h.train_recon},
                               {"train_kl", h.train_kl},
                               {"val_total", h.val_total},
                               {"val_recon", h.val_recon},
                               {"val_kl", h.val_kl}});
        return history;
    }

    FloatArray group_difference(const std::vector<FloatArray>& latents_a,
                                const std::vector<FloatArray>& latents_b, double quantile) {
        std::vector<TensorF> a, b;
        for (const auto& arr : latents_a) a.push_back(tensor_from(arr));
        for (const auto& arr : latents_b) b.push_back(tensor_from(arr));
        return array_from(vae::group_difference(model_, a, b, quantile));
    }

    void save(const std::string& path) {
        auto snap = model_.snapshot(ckpt_ ? ckpt_->epoch : 0,
                                    ckpt_ ? ckpt_->stop_reason : "initialized",
                                    ckpt_ ? ckpt_->history : std::vector<vae::EpochStats>{},
                                    nullptr);
        snap.save(path);
    }

    static PyVae load(const std::string& path) {
        return PyVae(vae::VaeCheckpoint::load(path));
    }

    int64_t latent_dim() const { return model_.spec().latent_dim; }
    std::array<int64_t, 3> input_spatial() const { return model_.spec().input_spatial; }
    int64_t bottleneck_features() const { return model_.spec().bottleneck_features(); }

private:
    vae::Vae model_;
    std::optional<vae::VaeCheckpoint> ckpt_;
};

class PyLstmHead {
public:
    PyLstmHead(int64_t input_dim, int64_t timesteps, bool classification, uint64_t seed)
        : head_(input_dim, timesteps, classification, seed) {}

    std::vector<std::pair<double, double>> fit(const FloatArray& x, const DoubleArray& y,
                                               int64_t epochs, double lr, int64_t patience,
                                               double dropout, uint64_t seed) {
        TensorData<float> xt = tensor_from(x);
        std::vector<float> yt(y.data(), y.data() + y.size());
        heads::LstmTrainConfig cfg;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.patience = patience;
        cfg.dropout = dropout;
        cfg.seed = seed;
        return head_.fit(xt, yt, TensorData<float>(), {}, cfg);
    }

    DoubleArray predict(const FloatArray& x) {
        auto out = head_.predict(tensor_from(x));
        DoubleArray arr(static_cast<py::ssize_t>(out.size()));
        for (size_t i = 0; i < out.size(); ++i) arr.mutable_at(i) = out[i];
        return arr;
    }

private:
    heads::LstmHead<float> head_;
};

}  // namespace

PYBIND11_MODULE(_voxrep, m) {
    m.doc() = "Volumetric representation learning: 3D residual VAE, incremental PCA, "
              "downstream heads, and the supporting pipeline kernels.";

    py::register_exception<Error>(m, "VoxrepError");

    // ingest
    m.def(
        "load_nifti",
        [](const std::string& path) {
            auto v = read_nifti(path);
            return py::make_tuple(array_from(v.data), v.tr_seconds);
        },
        py::arg("path"), "Read a NIfTI-1 volume; returns ([T,X,Y,Z] float32, tr_seconds).");
    m.def(
        "save_nifti",
        [](const std::string& path, const FloatArray& data, float tr) {
            write_nifti(path, tensor_from(data), tr);
        },
        py::arg("path"), py::arg("data"), py::arg("tr_seconds") = 1.0f);
    m.def(
        "paa",
        [](const FloatArray& data, int64_t window) {
            auto out = ingest::paa(series_from(data, 1.0f, false), window);
            return array_from(out.data);
        },
        py::arg("data"), py::arg("window"),
        "Piecewise aggregate approximation over the leading time axis.");
    m.def(
        "rescale_and_threshold",
        [](const FloatArray& data) {
            auto out = ingest::rescale_and_threshold(series_from(data, 1.0f, false));
            return array_from(out.data);
        },
        py::arg("data"),
        "Per-timepoint min-max rescale to [0,1], then zero values below 0.05.");

    // metrics
    m.def("mae", &metrics::mae, py::arg("pred"), py::arg("truth"));
    m.def("r2", &metrics::r2, py::arg("pred"), py::arg("truth"));
    m.def("pearson", &metrics::pearson, py::arg("pred"), py::arg("truth"));
    m.def("roc_auc", &metrics::roc_auc, py::arg("scores"), py::arg("labels"));

    // vae pieces
    m.def("kl_divergence", &vae::kl_divergence, py::arg("mu"), py::arg("log_var"),
          "Closed-form KL(N(mu, exp(log_var)) || N(0, I)).");

    py::class_<PyVae>(m, "Vae")
        .def(py::init<int64_t, std::array<int64_t, 3>, uint64_t, std::vector<int64_t>>(),
             py::arg("latent_dim"), py::arg("input_spatial"), py::arg("seed") = 0,
             py::arg("encoder_channels") = std::vector<int64_t>{})
        .def("encode", &PyVae::encode, py::arg("volumes"),
             "Posterior parameters for [N,X,Y,Z] volumes; returns (mu, log_var).")
        .def("decode", &PyVae::decode, py::arg("z"))
        .def("infer_latents", &PyVae::infer_latents, py::arg("series"),
             py::arg("batch_size") = 16)
        .def("train", &PyVae::train, py::arg("train_volumes"), py::arg("val_volumes"),
             py::arg("epochs") = 100, py::arg("lr") = 5e-4, py::arg("batch_size") = 16,
             py::arg("patience") = 20, py::arg("kl_weight") = 1.0, py::arg("seed") = 0)
        .def("group_difference", &PyVae::group_difference, py::arg("latents_a"),
             py::arg("latents_b"), py::arg("quantile") = 0.8)
        .def("save", &PyVae::save, py::arg("path"))
        .def_static("load", &PyVae::load, py::arg("path"))
        .def_property_readonly("latent_dim", &PyVae::latent_dim)
        .def_property_readonly("input_spatial", &PyVae::input_spatial)
        .def_property_readonly("bottleneck_features", &PyVae::bottleneck_features);

    // pca
    py::class_<pca::IncrementalPca>(m, "IncrementalPca")
        .def(py::init<int64_t>(), py::arg("n_components"))
        .def("partial_fit",
             [](pca::IncrementalPca& self, const DoubleArray& batch) {
                 self.partial_fit(matrix_from(batch));
             })
        .def("transform_whitened",
             [](const pca::IncrementalPca& self, const DoubleArray& rows) {
                 return array_from_matrix(self.transform_whitened(matrix_from(rows)));
             })
        .def("save", &pca::IncrementalPca::save, py::arg("path"))
        .def_static("load", &pca::IncrementalPca::load, py::arg("path"))
        .def_property_readonly("n_components", &pca::IncrementalPca::n_components)
        .def_property_readonly("n_samples_seen", &pca::IncrementalPca::n_samples_seen)
        .def_property_readonly("components",
                               [](const pca::IncrementalPca& self) {
                                   return array_from_matrix(self.components());
                               })
        .def_property_readonly("mean", [](const pca::IncrementalPca& self) {
            return array_from_matrix(self.mean().transpose());
        });

    // heads
    py::class_<heads::LinearModel>(m, "LinearModel")
        .def("decision",
             [](const heads::LinearModel& self, const DoubleArray& rows) {
                 auto scores = self.decision_rows(matrix_from(rows));
                 DoubleArray arr(static_cast<py::ssize_t>(scores.size()));
                 for (size_t i = 0; i < scores.size(); ++i) arr.mutable_at(i) = scores[i];
                 return arr;
             })
        .def_property_readonly("weights", [](const heads::LinearModel& self) {
            return array_from_matrix(self.w.transpose());
        });
    m.def(
        "train_linear_svm",
        [](const DoubleArray& x, const std::vector<int>& y, double c) {
            return heads::train_linear_svm(matrix_from(x), y, c);
        },
        py::arg("x"), py::arg("y"), py::arg("c") = 1.0);
    m.def(
        "train_linear_svr",
        [](const DoubleArray& x, const std::vector<double>& y, double c, double epsilon) {
            return heads::train_linear_svr(matrix_from(x), y, c, epsilon);
        },
        py::arg("x"), py::arg("y"), py::arg("c") = 1.0, py::arg("epsilon") = 0.1);
    m.def(
        "knn_predict",
        [](const DoubleArray& train_x, const std::vector<double>& train_y,
           const DoubleArray& query, int64_t k, const std::string& task) {
            Eigen::MatrixXd q = matrix_from(query);
            if (q.rows() != 1) throw ShapeError("knn_predict expects a single query row");
            auto res = heads::knn_predict(matrix_from(train_x), train_y,
                                          Eigen::VectorXd(q.row(0)), k,
                                          task == "classify" ? heads::KnnTask::kClassify
                                                             : heads::KnnTask::kRegress);
            return py::make_tuple(res.prediction, res.positive_fraction);
        },
        py::arg("train_x"), py::arg("train_y"), py::arg("query"), py::arg("k") = 5,
        py::arg("task") = "classify");

    py::class_<PyLstmHead>(m, "LstmHead")
        .def(py::init<int64_t, int64_t, bool, uint64_t>(), py::arg("input_dim"),
             py::arg("timesteps"), py::arg("classification") = true, py::arg("seed") = 0)
        .def("fit", &PyLstmHead::fit, py::arg("x"), py::arg("y"), py::arg("epochs") = 200,
             py::arg("lr") = 1e-3, py::arg("patience") = 20, py::arg("dropout") = 0.5,
             py::arg("seed") = 0)
        .def("predict", &PyLstmHead::predict, py::arg("x"));

    // synth
    m.def(
        "generate_cohort",
        [](const std::string& out_dir, int64_t n_subjects, std::array<int64_t, 3> grid,
           int64_t timepoints, double noise_sigma, uint64_t seed) {
            synth::SynthConfig cfg;
            cfg.n_subjects = n_subjects;
            cfg.grid = grid;
            cfg.timepoints = timepoints;
            cfg.noise_sigma = noise_sigma;
            cfg.seed = seed;
            synth::generate_cohort(out_dir, cfg);
            return out_dir + "/manifest.csv";
        },
        py::arg("out_dir"), py::arg("n_subjects") = 60,
        py::arg("grid") = std::array<int64_t, 3>{16, 16, 16}, py::arg("timepoints") = 30,
        py::arg("noise_sigma") = 0.01, py::arg("seed") = 0,
        "Write a synthetic cohort with known factors; returns the manifest path.");
}
