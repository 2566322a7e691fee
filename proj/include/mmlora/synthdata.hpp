// Seeded synthetic multi-modal classification data.
//
// Feature layout per modality (dimension D, C classes, D >= 2C):
//   [0, C)    unique block: strength[m] * class template, visible to one
//             modality alone
//   [C, 2C)   paired block: half the paired class signal plus a per-sample
//             nuisance vector added to modality 1 and subtracted from
//             modality 2, so the signal survives only when the modalities
//             are combined and the nuisance cancels
//   [2C, D)   pure noise
// Independent Gaussian noise is added to every coordinate.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmlora/errors.hpp"
#include "mmlora/matrix.hpp"

namespace mmlora::synth {

struct SynthConfig {
    int classes = 8;
    int dim = 32;            // per-modality feature dimension
    int modalities = 2;
    int n_train = 2000;
    int n_val = 500;
    int n_test = 1000;
    std::vector<double> unique_strength = {2.0, 0.7};  // one entry per modality
    double paired_strength = 1.0;
    double nuisance_scale = 1.0;   // scale of the sign-split paired nuisance
    double noise_scale = 0.5;      // independent noise everywhere
    std::uint64_t seed = 7;

    void validate() const;
};

// the two shipped presets; margins in the acceptance suite refer to these
SynthConfig preset(const std::string& name);  // "laziness" | "balanced"

struct MultiModalDataset {
    std::vector<Matrix> x;   // one [N x D] matrix per modality, row-aligned
    std::vector<int> y;      // labels in [0, classes)
    std::string split;

    int size() const { return static_cast<int>(y.size()); }
    int modality_count() const { return static_cast<int>(x.size()); }
};

struct Splits {
    MultiModalDataset train;
    MultiModalDataset val;
    MultiModalDataset test;
    SynthConfig config;
};

Splits generate(const SynthConfig& cfg);

// Plain softmax-regression probe on raw inputs of the given modalities
// (1-based ids), trained by full-batch convex optimization. Independent of
// the autodiff engine; bounds what trained encoders should achieve.
double bayes_probe(const Splits& data, const std::vector<int>& modality_subset);
double bayes_probe(const SynthConfig& cfg, const std::vector<int>& modality_subset);

struct MiniBatch {
    std::vector<Matrix> x;   // per modality, rows aligned
    std::vector<int> y;
    std::vector<int> indices;
};

// Seeded shuffle into batches; the last partial batch is kept.
std::vector<MiniBatch> batch_iter(const MultiModalDataset& ds, int batch_size,
                                  std::uint64_t epoch_seed);

// CSV export: one features file per modality plus a labels file, 17
// significant digits, header row naming columns.
void export_csv(const MultiModalDataset& ds, const std::string& directory,
                const std::string& stem);

}  // namespace mmlora::synth
