// Training and evaluation procedures: per-modality fine-tuning, the
// late-fusion baseline, linear evaluation, prediction averaging, low-rank
// joint adaptation, and full joint fine-tuning.
//
// Every procedure is a pure function of (inputs, config, seeds): batch order
// comes from seeded shuffles, parameter updates are per-parameter
// arithmetic, and the model returned is the best-validation-accuracy
// snapshot seen during the run (the pre-training state counts as the first
// candidate; ties keep the earlier epoch).
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmlora/nn.hpp"
#include "mmlora/synthdata.hpp"

namespace mmlora::train {

enum class OptKind : std::uint8_t { sgd = 0, adam = 1, adamw = 2 };
OptKind opt_kind_from_name(const std::string& s);
const char* opt_kind_name(OptKind k);

struct OptimizerConfig {
    OptKind kind = OptKind::adamw;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int epochs = 50;
    int batch_size = 64;
    std::uint64_t seed = 1;

    void validate() const;
};

enum class Stage : std::uint8_t {
    pretrained_analog = 0,
    umft = 1,
    mmlora = 2,
    joint_baseline = 3,
    joint_full_ft = 4,
};
const char* stage_name(Stage s);
Stage stage_from_name(const std::string& s);

struct Provenance {
    std::uint64_t config_hash = 0;
    std::vector<std::uint64_t> seeds;
    std::string note;
};

struct FusionHead {
    nn::Param w;  // classes x sum of encoder feature widths
    nn::Param b;
};

struct TrainedBundle {
    std::vector<std::unique_ptr<nn::ModalityModel>> models;
    std::unique_ptr<FusionHead> fusion;
    Stage stage = Stage::pretrained_analog;
    Provenance provenance;
    // hash of every Param value at the previous stage boundary, keyed by
    // "m<id>/<name>"; verified after adapter training
    std::map<std::string, std::uint64_t> stage_hashes;

    TrainedBundle() = default;
    TrainedBundle clone() const;
    std::vector<nn::ModalityModel*> model_ptrs() const;
    std::vector<const nn::ModalityModel*> const_model_ptrs() const;
    void refresh_stage_hashes();
};

// randomly initialized per-modality models (the pre-trained stand-in)
TrainedBundle fresh_bundle(const std::vector<nn::ModelConfig>& cfgs, std::uint64_t seed);
void attach_fusion_head(TrainedBundle& b, std::uint64_t seed);

struct EvalReport {
    double top1 = 0.0;
    int sample_count = 0;
};

// batched predictor: per-modality inputs -> one distribution row per sample
using ProbFn = std::function<Matrix(const std::vector<Matrix>&)>;

// top-1 accuracy; argmax ties resolve to the lowest class index
EvalReport evaluate(const ProbFn& predictor, const synth::MultiModalDataset& test);

// arithmetic mean of the per-modality predictive distributions
Matrix ume_probs(const std::vector<const nn::ModalityModel*>& models, const std::vector<Matrix>& xs);
// the joint objective: mean over the batch of -log(mean_m P_m(y|x))
autodiff::Node* ensemble_nll_loss(autodiff::Tape& t, const std::vector<nn::ModalityModel*>& models,
                                  const std::vector<Matrix>& xb, const std::vector<int>& yb);
Matrix fusion_probs(const TrainedBundle& b, const std::vector<Matrix>& xs);
// distribution-producing closure for any bundle (fusion head when present
// and the stage is joint_baseline, prediction averaging otherwise)
ProbFn bundle_predictor(const TrainedBundle& b);

// ---- training procedures ---------------------------------------------------

// full fine-tuning of one model on its own modality
void train_umft(nn::ModalityModel& model, const synth::Splits& data, int modality,
                const OptimizerConfig& opt);

// fresh models + umft for every modality; per-modality seeds derive from run_seed
TrainedBundle umft_bundle(const std::vector<nn::ModelConfig>& cfgs, const synth::Splits& data,
                          const OptimizerConfig& opt, std::uint64_t run_seed);

// end-to-end joint training of all encoders plus the fusion head
void train_late_fusion(TrainedBundle& b, const synth::Splits& data, const OptimizerConfig& opt);

// trains a fresh linear head on frozen features; the encoder is untouched
double linear_eval(const nn::ModalityModel& model, const synth::Splits& data, int modality,
                   const OptimizerConfig& opt);

// attaches adapters per selection, freezes everything else, then minimizes
// -log(mean_m P_m(y|x)) over the adapter parameters only
TrainedBundle mmlora_train(const TrainedBundle& base, const nn::LoRASelection& sel, int rank,
                           const synth::Splits& data, const OptimizerConfig& opt,
                           const nn::LoraAttachOptions& attach_opts = {});

// same objective with every parameter trainable and no adapters
TrainedBundle joint_full_finetune(const TrainedBundle& base, const synth::Splits& data,
                                  const OptimizerConfig& opt);

std::int64_t trainable_scalar_count(const TrainedBundle& b);
std::int64_t total_scalar_count(const TrainedBundle& b);

}  // namespace mmlora::train
