#include "mmlora/synthdata.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmlora/rng.hpp"

namespace mmlora::synth {

void SynthConfig::validate() const {
    if (classes < 2) throw ConfigError("data.classes: must be >= 2");
    if (dim < 2 * classes) {
        throw ConfigError("data.dim: must be >= 2*classes to fit the unique and paired blocks (" +
                          std::to_string(dim) + " < " + std::to_string(2 * classes) + ")");
    }
    if (modalities < 1) throw ConfigError("data.modalities: must be >= 1");
    if (n_train < 1 || n_val < 1 || n_test < 1) {
        throw ConfigError("data.n_train/n_val/n_test: split sizes must be positive");
    }
    if (static_cast<int>(unique_strength.size()) != modalities) {
        throw ConfigError("data.unique_strength: needs one entry per modality");
    }
    for (double s : unique_strength) {
        if (s < 0) throw ConfigError("data.unique_strength: must be >= 0");
    }
    if (paired_strength < 0 || nuisance_scale < 0 || noise_scale < 0) {
        throw ConfigError("data strengths must be >= 0");
    }
}

SynthConfig preset(const std::string& name) {
    SynthConfig c;
    if (name == "laziness") {
        return c;  // the defaults are the laziness preset
    }
    if (name == "balanced") {
        c.unique_strength = {1.0, 1.0};
        return c;
    }
    throw ConfigError("data.preset: unknown preset '" + name + "'");
}

namespace {

// random unit vector of the given dimension
std::vector<double> unit_vector(int dim, Rng& rng) {
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& x : v) {
            x = rng.gauss();
            norm += x * x;
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

}  // namespace

Splits generate(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int C = cfg.classes;
    const int D = cfg.dim;
    const int M = cfg.modalities;

    // class templates: unique per (modality, class), paired per class
    std::vector<std::vector<std::vector<double>>> unique_tpl(M);
    for (int m = 0; m < M; ++m) {
        unique_tpl[m].reserve(C);
        for (int c = 0; c < C; ++c) unique_tpl[m].push_back(unit_vector(C, rng));
    }
    std::vector<std::vector<double>> paired_tpl;
    paired_tpl.reserve(C);
    for (int c = 0; c < C; ++c) paired_tpl.push_back(unit_vector(C, rng));

    auto fill_split = [&](int n, const char* tag) {
        MultiModalDataset ds;
        ds.split = tag;
        ds.y.resize(n);
        for (int m = 0; m < M; ++m) ds.x.emplace_back(n, D);
        std::vector<double> eta(C);
        for (int i = 0; i < n; ++i) {
            const int c = static_cast<int>(rng.integer(C));
            ds.y[i] = c;
            for (int j = 0; j < C; ++j) eta[j] = rng.gauss(0.0, cfg.nuisance_scale);
            for (int m = 0; m < M; ++m) {
                Matrix& X = ds.x[m];
                for (int j = 0; j < C; ++j) {
                    X(i, j) = cfg.unique_strength[m] * unique_tpl[m][c][j];
                }
                // the nuisance is added on modality 1 and subtracted on the rest
                const double sign = m == 0 ? 1.0 : -1.0;
                for (int j = 0; j < C; ++j) {
                    X(i, C + j) = 0.5 * cfg.paired_strength * paired_tpl[c][j] + sign * eta[j];
                }
                for (int j = 0; j < D; ++j) {
                    X(i, j) += rng.gauss(0.0, cfg.noise_scale);
                }
            }
        }
        return ds;
    };

    Splits out;
    out.config = cfg;
    out.train = fill_split(cfg.n_train, "train");
    out.val = fill_split(cfg.n_val, "val");
    out.test = fill_split(cfg.n_test, "test");
    return out;
}

namespace {

// hand-rolled multinomial logistic regression, full batch, momentum GD;
// deliberately independent of the autodiff engine
double probe_accuracy(const Matrix& Xtr, const std::vector<int>& ytr, const Matrix& Xte,
                      const std::vector<int>& yte, int classes) {
    const int n = Xtr.rows();
    const int d = Xtr.cols() + 1;  // bias column
    const int C = classes;

    std::vector<double> w(static_cast<std::size_t>(C) * d, 0.0);
    std::vector<double> mom(w.size(), 0.0);

    double mean_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double s = 1.0;
        for (int j = 0; j < Xtr.cols(); ++j) s += Xtr(i, j) * Xtr(i, j);
        mean_sq += s;
    }
    mean_sq /= n;
    const double lr = 2.0 / (1.0 + mean_sq);
    const double ridge = 1e-6;
    const int iters = 800;

    std::vector<double> logits(C), probs(C), grad(w.size());
    for (int it = 0; it < iters; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c) {
                double z = w[static_cast<std::size_t>(c) * d + (d - 1)];
                for (int j = 0; j < Xtr.cols(); ++j) z += w[static_cast<std::size_t>(c) * d + j] * Xtr(i, j);
                logits[c] = z;
                mx = std::max(mx, z);
            }
            double zsum = 0.0;
            for (int c = 0; c < C; ++c) {
                probs[c] = std::exp(logits[c] - mx);
                zsum += probs[c];
            }
            for (int c = 0; c < C; ++c) {
                const double r = probs[c] / zsum - (ytr[i] == c ? 1.0 : 0.0);
                double* g = grad.data() + static_cast<std::size_t>(c) * d;
                for (int j = 0; j < Xtr.cols(); ++j) g[j] += r * Xtr(i, j);
                g[d - 1] += r;
            }
        }
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double g = grad[k] / n + ridge * w[k];
            mom[k] = 0.9 * mom[k] - lr * g;
            w[k] += mom[k];
        }
    }

    int hits = 0;
    for (int i = 0; i < Xte.rows(); ++i) {
        int best = 0;
        double bestz = -1e300;
        for (int c = 0; c < C; ++c) {
            double z = w[static_cast<std::size_t>(c) * d + (d - 1)];
            for (int j = 0; j < Xte.cols(); ++j) z += w[static_cast<std::size_t>(c) * d + j] * Xte(i, j);
            if (z > bestz) {
                bestz = z;
                best = c;
            }
        }
        if (best == yte[i]) ++hits;
    }
    return static_cast<double>(hits) / Xte.rows();
}

Matrix concat_modalities(const MultiModalDataset& ds, const std::vector<int>& subset) {
    Matrix out;
    bool first = true;
    for (int id : subset) {
        if (id < 1 || id > ds.modality_count()) {
            throw ConfigError("bayes_probe: modality id " + std::to_string(id) + " out of range");
        }
        out = first ? ds.x[id - 1] : concat_cols(out, ds.x[id - 1]);
        first = false;
    }
    return out;
}

}  // namespace

double bayes_probe(const Splits& data, const std::vector<int>& modality_subset) {
    if (modality_subset.empty()) throw ConfigError("bayes_probe: empty modality subset");
    Matrix Xtr = concat_modalities(data.train, modality_subset);
    Matrix Xte = concat_modalities(data.test, modality_subset);
    return probe_accuracy(Xtr, data.train.y, Xte, data.test.y, data.config.classes);
}

double bayes_probe(const SynthConfig& cfg, const std::vector<int>& modality_subset) {
    return bayes_probe(generate(cfg), modality_subset);
}

std::vector<MiniBatch> batch_iter(const MultiModalDataset& ds, int batch_size,
                                  std::uint64_t epoch_seed) {
    if (batch_size < 1) throw ConfigError("batch_iter: batch_size must be >= 1");
    if (ds.size() == 0) throw ConfigError("batch_iter: empty dataset");
    std::vector<int> order(ds.size());
    for (int i = 0; i < ds.size(); ++i) order[i] = i;
    Rng rng(epoch_seed);
    rng.shuffle(order);

    std::vector<MiniBatch> out;
    for (int start = 0; start < ds.size(); start += batch_size) {
        const int end = std::min(start + batch_size, ds.size());
        MiniBatch b;
        b.indices.assign(order.begin() + start, order.begin() + end);
        b.y.reserve(end - start);
        for (int idx : b.indices) b.y.push_back(ds.y[idx]);
        for (const Matrix& X : ds.x) b.x.push_back(take_rows(X, b.indices));
        out.push_back(std::move(b));
    }
    return out;
}

void export_csv(const MultiModalDataset& ds, const std::string& directory, const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    char buf[40];
    for (int m = 0; m < ds.modality_count(); ++m) {
        std::ofstream f(fs::path(directory) / (stem + ".m" + std::to_string(m + 1) + ".csv"));
        if (!f) throw std::runtime_error("export_csv: cannot write in " + directory);
        const Matrix& X = ds.x[m];
        for (int j = 0; j < X.cols(); ++j) f << (j ? "," : "") << "f" << j;
        f << "\n";
        for (int i = 0; i < X.rows(); ++i) {
            for (int j = 0; j < X.cols(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.17g", X(i, j));
                f << (j ? "," : "") << buf;
            }
            f << "\n";
        }
    }
    std::ofstream f(fs::path(directory) / (stem + ".labels.csv"));
    if (!f) throw std::runtime_error("export_csv: cannot write in " + directory);
    f << "label\n";
    for (int y : ds.y) f << y << "\n";
}

}  // namespace mmlora::synth
