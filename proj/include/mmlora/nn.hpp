// Parameters, encoders and the low-rank adapter mechanism.
//
// A ModalityModel is an encoder (two-layer MLP, or a single self-attention
// block with a feed-forward) plus a linear head. Adapters reparameterize a
// named base matrix W as W + B*A with B zero-initialized, so attaching them
// leaves the forward pass bit-identical until the first optimizer step.
#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "mmlora/autodiff.hpp"
#include "mmlora/errors.hpp"
#include "mmlora/matrix.hpp"

namespace mmlora::nn {

struct Param {
    std::string name;
    Matrix value;
    bool frozen = false;
};

struct LoRAAdapter {
    std::string base_name;  // the adapted Param, shape d x k
    int rank = 1;
    double delta_scale = 1.0;  // multiplier on B*A; 1 reproduces the plain update
    Param A;                   // rank x k, Gaussian at creation
    Param B;                   // d x rank, exactly zero at creation
};

enum class Placement : std::uint8_t { encoder_only = 0, head_only = 1, encoder_and_head = 2 };

const char* placement_name(Placement p);
Placement placement_from_name(const std::string& s);

struct LoRASelection {
    std::vector<int> modalities;  // modality ids receiving adapters, 1-based
    Placement placement = Placement::encoder_only;
};

enum class EncoderKind : std::uint8_t { mlp = 0, tiny_transformer = 1 };

struct ModelConfig {
    EncoderKind kind = EncoderKind::mlp;
    int input_dim = 0;
    int classes = 0;
    int hidden = 64;      // mlp width
    int tokens = 2;       // transformer rows per sample; tokens * token_width == input_dim
    int token_width = 16;
    int ff_dim = 64;      // transformer feed-forward width
};

struct AttentionWeights {
    const Param* wq;
    const Param* wk;
    const Param* wv;
    const Param* wo;
    const LoRAAdapter* aq = nullptr;
    const LoRAAdapter* ak = nullptr;
    const LoRAAdapter* av = nullptr;
};

class ModalityModel {
  public:
    ModalityModel(int modality_id, const ModelConfig& cfg, std::uint64_t init_seed);

    int modality_id() const { return modality_id_; }
    const ModelConfig& config() const { return cfg_; }
    bool is_mlp() const { return cfg_.kind == EncoderKind::mlp; }
    int feature_dim() const { return is_mlp() ? cfg_.hidden : cfg_.token_width; }

    Param& param(const std::string& name);
    const Param& param(const std::string& name) const;
    std::vector<Param*> params();
    std::vector<const Param*> params() const;

    std::deque<LoRAAdapter>& adapters() { return adapters_; }
    const std::deque<LoRAAdapter>& adapters() const { return adapters_; }
    LoRAAdapter* adapter_for(const std::string& base_name);
    const LoRAAdapter* adapter_for(const std::string& base_name) const;

    void freeze_all();
    void unfreeze_all();

    // graph forward over sample rows; transformer encoders accept a single row
    autodiff::Node* features_graph(autodiff::Tape& t, autodiff::Node* x) const;
    autodiff::Node* logits_graph(autodiff::Tape& t, autodiff::Node* x) const;

    // tape-free forward using the same kernels in the same order
    Matrix features_eval(const Matrix& x) const;
    Matrix logits_eval(const Matrix& x) const;
    Matrix probs_eval(const Matrix& x) const;

  private:
    Param& add_param(std::string name, Matrix value);
    AttentionWeights attention_weights() const;

    int modality_id_ = 0;
    ModelConfig cfg_;
    std::deque<Param> params_;
    std::deque<LoRAAdapter> adapters_;
};

// ---- spec-level single-sample ops (column-vector convention) --------------

// y = W x + b for x of shape k x 1
autodiff::Node* linear_forward(autodiff::Tape& t, const Param& w, const Param& bias, autodiff::Node* x);
// y = W0 x + B (A x), gradients reach A and B only when W0 is frozen
autodiff::Node* lora_forward(autodiff::Tape& t, const Param& base, const LoRAAdapter& ad, autodiff::Node* x);
// returns W0 + delta_scale * B A without touching W0
Matrix merge_lora(const Param& base, const LoRAAdapter& ad);

// single-head scaled dot-product attention with residual, x is tokens x width
autodiff::Node* attention_forward(autodiff::Tape& t, const AttentionWeights& w, autodiff::Node* x);
Matrix attention_forward_eval(const AttentionWeights& w, const Matrix& x);

// x [n x k] -> x W^T (+ low-rank delta) (+ 1 b^T); the batched row-major
// affine used by every layer, with its tape-free kernel twin
autodiff::Node* affine_rows(autodiff::Tape& t, autodiff::Node* x, const Param& w,
                            const Param* bias = nullptr, const LoRAAdapter* ad = nullptr);
Matrix affine_rows_eval(const Matrix& x, const Param& w, const Param* bias = nullptr,
                        const LoRAAdapter* ad = nullptr);

// ---- adapter management ----------------------------------------------------

struct LoraAttachOptions {
    double init_std = 0.02;    // Gaussian std for A
    double delta_scale = 1.0;
    bool clamp_rank = false;   // cap rank at min(d,k) per matrix instead of failing
};

// Base matrices targeted by a placement, in deterministic order.
std::vector<std::string> lora_target_names(const ModalityModel& m, Placement p);

// Attaches adapters to every target, flips every base Param to frozen, and
// leaves the adapter Params as the only trainables.
void lora_attach(ModalityModel& m, Placement p, int rank, std::uint64_t seed,
                 const LoraAttachOptions& opts = {});

// All non-frozen Params (base and adapter) of the given models, ordered by
// modality-prefixed name. Throws ConfigError when the result is empty.
std::vector<Param*> trainable_params(const std::vector<ModalityModel*>& models);
// Adapter Params of the modalities in the selection only.
std::vector<Param*> trainable_params(const std::vector<ModalityModel*>& models,
                                     const LoRASelection& sel);

std::int64_t param_scalar_count(const ModalityModel& m);          // base params only
std::int64_t adapter_scalar_count(const ModalityModel& m);

// snapshots for best-validation bookkeeping
struct ModelState {
    std::vector<Matrix> base;
    std::vector<Matrix> adapter_a;
    std::vector<Matrix> adapter_b;
};
ModelState capture_state(const ModalityModel& m);
void restore_state(ModalityModel& m, const ModelState& s);

// hash of each frozen Param, keyed by "m<id>/<name>"
std::map<std::string, std::uint64_t> frozen_param_hashes(const std::vector<const ModalityModel*>& models);

}  // namespace mmlora::nn
