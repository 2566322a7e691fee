#include "mmlora/training.hpp"

#include <algorithm>
#include <cmath>

#include "mmlora/rng.hpp"

namespace mmlora::train {

using autodiff::Node;
using autodiff::Tape;
using nn::ModalityModel;
using nn::Param;

OptKind opt_kind_from_name(const std::string& s) {
    if (s == "sgd") return OptKind::sgd;
    if (s == "adam") return OptKind::adam;
    if (s == "adamw") return OptKind::adamw;
    throw ConfigError("optimizer.kind: unknown '" + s + "'");
}

const char* opt_kind_name(OptKind k) {
    switch (k) {
        case OptKind::sgd: return "sgd";
        case OptKind::adam: return "adam";
        case OptKind::adamw: return "adamw";
    }
    return "?";
}

void OptimizerConfig::validate() const {
    if (learning_rate < 0) throw ConfigError("optimizer.learning_rate: must be >= 0");
    if (epochs < 1) throw ConfigError("optimizer.epochs: must be >= 1");
    if (batch_size < 1) throw ConfigError("optimizer.batch_size: must be >= 1");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
        throw ConfigError("optimizer.betas: must lie in [0, 1)");
    }
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrained_analog: return "pretrained-analog";
        case Stage::umft: return "umft";
        case Stage::mmlora: return "mmlora";
        case Stage::joint_baseline: return "joint-baseline";
        case Stage::joint_full_ft: return "joint-full-ft";
    }
    return "?";
}

Stage stage_from_name(const std::string& s) {
    for (Stage st : {Stage::pretrained_analog, Stage::umft, Stage::mmlora, Stage::joint_baseline,
                     Stage::joint_full_ft}) {
        if (s == stage_name(st)) return st;
    }
    throw ConfigError("unknown stage '" + s + "'");
}

TrainedBundle TrainedBundle::clone() const {
    TrainedBundle out;
    for (const auto& m : models) out.models.push_back(std::make_unique<ModalityModel>(*m));
    if (fusion) out.fusion = std::make_unique<FusionHead>(*fusion);
    out.stage = stage;
    out.provenance = provenance;
    out.stage_hashes = stage_hashes;
    return out;
}

std::vector<ModalityModel*> TrainedBundle::model_ptrs() const {
    std::vector<ModalityModel*> out;
    for (const auto& m : models) out.push_back(m.get());
    return out;
}

std::vector<const ModalityModel*> TrainedBundle::const_model_ptrs() const {
    std::vector<const ModalityModel*> out;
    for (const auto& m : models) out.push_back(m.get());
    return out;
}

void TrainedBundle::refresh_stage_hashes() {
    stage_hashes.clear();
    for (const auto& m : models) {
        for (const Param* p : static_cast<const ModalityModel&>(*m).params()) {
            stage_hashes["m" + std::to_string(m->modality_id()) + "/" + p->name] =
                matrix_hash(p->value);
        }
    }
}

TrainedBundle fresh_bundle(const std::vector<nn::ModelConfig>& cfgs, std::uint64_t seed) {
    if (cfgs.empty()) throw ConfigError("fresh_bundle: no model configs");
    TrainedBundle b;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        b.models.push_back(
            std::make_unique<ModalityModel>(id, cfgs[i], derive_seed(seed, "init/m", id)));
    }
    b.stage = Stage::pretrained_analog;
    b.provenance.seeds = {seed};
    b.refresh_stage_hashes();
    return b;
}

void attach_fusion_head(TrainedBundle& b, std::uint64_t seed) {
    int width = 0;
    for (const auto& m : b.models) width += m->feature_dim();
    const int classes = b.models.front()->config().classes;
    Rng rng(derive_seed(seed, "fusion_head"));
    Matrix w(classes, width);
    const double std = std::sqrt(1.0 / width);
    for (auto& v : w.values()) v = rng.gauss(0.0, std);
    b.fusion = std::make_unique<FusionHead>();
    b.fusion->w = Param{"fusion/w", std::move(w), false};
    b.fusion->b = Param{"fusion/b", Matrix(classes, 1), false};
}

EvalReport evaluate(const ProbFn& predictor, const synth::MultiModalDataset& test) {
    if (test.size() == 0) throw ConfigError("evaluate: empty test set");
    Matrix probs = predictor(test.x);
    if (probs.rows() != test.size()) {
        throw ShapeError("evaluate: predictor returned " + probs.shape_str() + " for " +
                         std::to_string(test.size()) + " samples");
    }
    int hits = 0;
    for (int i = 0; i < probs.rows(); ++i) {
        if (argmax_row(probs, i) == test.y[i]) ++hits;
    }
    return EvalReport{static_cast<double>(hits) / test.size(), test.size()};
}

Matrix ume_probs(const std::vector<const ModalityModel*>& models, const std::vector<Matrix>& xs) {
    if (models.empty()) throw ConfigError("ume_probs: no models");
    if (xs.size() != models.size()) {
        throw ShapeError("ume_probs: " + std::to_string(xs.size()) + " inputs for " +
                         std::to_string(models.size()) + " models");
    }
    const int classes = models[0]->config().classes;
    for (const ModalityModel* m : models) {
        if (m->config().classes != classes) {
            throw ConfigError("ume_probs: class-count mismatch between modality models");
        }
    }
    Matrix acc = models[0]->probs_eval(xs[0]);
    for (std::size_t m = 1; m < models.size(); ++m) {
        acc = add(acc, models[m]->probs_eval(xs[m]));
    }
    return scale(acc, 1.0 / static_cast<double>(models.size()));
}

Matrix fusion_probs(const TrainedBundle& b, const std::vector<Matrix>& xs) {
    if (!b.fusion) throw ConfigError("fusion_probs: bundle has no fusion head");
    Matrix feats = b.models[0]->features_eval(xs[0]);
    for (std::size_t m = 1; m < b.models.size(); ++m) {
        feats = concat_cols(feats, b.models[m]->features_eval(xs[m]));
    }
    return softmax_rows(affine_rows_eval(feats, b.fusion->w, &b.fusion->b));
}

ProbFn bundle_predictor(const TrainedBundle& b) {
    if (b.stage == Stage::joint_baseline) {
        return [&b](const std::vector<Matrix>& xs) { return fusion_probs(b, xs); };
    }
    return [&b](const std::vector<Matrix>& xs) { return ume_probs(b.const_model_ptrs(), xs); };
}

// ---- optimizer --------------------------------------------------------------

namespace {

class Optimizer {
  public:
    Optimizer(const OptimizerConfig& cfg, std::vector<Param*> targets)
        : cfg_(cfg), targets_(std::move(targets)) {
        m_.reserve(targets_.size());
        v_.reserve(targets_.size());
        for (Param* p : targets_) {
            m_.emplace_back(p->value.rows(), p->value.cols());
            v_.emplace_back(p->value.rows(), p->value.cols());
        }
    }

    const std::vector<Param*>& targets() const { return targets_; }

    void step(const std::vector<Matrix>& grads) {
        ++t_;
        const double lr = cfg_.learning_rate;
        for (std::size_t i = 0; i < targets_.size(); ++i) {
            Matrix& w = targets_[i]->value;
            const Matrix& g = grads[i];
            switch (cfg_.kind) {
                case OptKind::sgd: {
                    for (std::size_t k = 0; k < w.size(); ++k) {
                        w.values()[k] -= lr * (g.values()[k] + cfg_.weight_decay * w.values()[k]);
                    }
                    break;
                }
                case OptKind::adam:
                case OptKind::adamw: {
                    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
                    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
                    for (std::size_t k = 0; k < w.size(); ++k) {
                        double gk = g.values()[k];
                        if (cfg_.kind == OptKind::adam) gk += cfg_.weight_decay * w.values()[k];
                        double& mk = m_[i].values()[k];
                        double& vk = v_[i].values()[k];
                        mk = cfg_.beta1 * mk + (1.0 - cfg_.beta1) * gk;
                        vk = cfg_.beta2 * vk + (1.0 - cfg_.beta2) * gk * gk;
                        const double mhat = mk / bc1;
                        const double vhat = vk / bc2;
                        double update = mhat / (std::sqrt(vhat) + cfg_.eps);
                        if (cfg_.kind == OptKind::adamw) update += cfg_.weight_decay * w.values()[k];
                        w.values()[k] -= lr * update;
                    }
                    break;
                }
            }
        }
    }

  private:
    OptimizerConfig cfg_;
    std::vector<Param*> targets_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

using LossBuilder = std::function<Node*(Tape&, const synth::MiniBatch&)>;
using ValFn = std::function<double()>;

// epoch/step loop with best-validation snapshotting over the optimizer's
// targets (only they can change)
void run_training(const OptimizerConfig& opt, const synth::MultiModalDataset& train_ds,
                  Optimizer& optimizer, const LossBuilder& build_loss, const ValFn& val_accuracy) {
    opt.validate();
    const auto& targets = optimizer.targets();

    auto snapshot = [&] {
        std::vector<Matrix> s;
        s.reserve(targets.size());
        for (Param* p : targets) s.push_back(p->value);
        return s;
    };

    double best_val = val_accuracy();
    std::vector<Matrix> best = snapshot();

    long step = 0;
    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        for (const synth::MiniBatch& batch :
             synth::batch_iter(train_ds, opt.batch_size, derive_seed(opt.seed, "epoch", epoch))) {
            Tape tape;
            Node* loss = build_loss(tape, batch);
            ++step;
            if (!std::isfinite(loss->value(0, 0))) {
                throw TrainFault("training diverged: non-finite loss at step " +
                                 std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
            }
            tape.backward(loss);
            std::vector<Matrix> grads;
            grads.reserve(targets.size());
            for (Param* p : targets) {
                Node* n = tape.watched(p->value);
                grads.push_back(n != nullptr ? n->grad : Matrix(p->value.rows(), p->value.cols()));
            }
            optimizer.step(grads);
        }
        const double v = val_accuracy();
        if (v > best_val) {
            best_val = v;
            best = snapshot();
        }
    }

    for (std::size_t i = 0; i < targets.size(); ++i) targets[i]->value = best[i];
}

// mean fused cross entropy of one model on one modality's batch
Node* model_ce_loss(Tape& t, const ModalityModel& m, const Matrix& xb, const std::vector<int>& yb) {
    if (m.is_mlp()) {
        return t.ce_mean(m.logits_graph(t, t.leaf(xb)), yb);
    }
    Node* acc = nullptr;
    for (int i = 0; i < xb.rows(); ++i) {
        Matrix row = take_rows(xb, {i});
        Node* li = t.ce_mean(m.logits_graph(t, t.leaf(row)), {yb[i]});
        acc = acc == nullptr ? li : t.add(acc, li);
    }
    return t.scale(acc, 1.0 / xb.rows());
}

bool all_mlp(const std::vector<ModalityModel*>& models) {
    return std::all_of(models.begin(), models.end(), [](ModalityModel* m) { return m->is_mlp(); });
}

}  // namespace

// mean of -log(mean_m P_m(y|x)) over the batch
Node* ensemble_nll_loss(Tape& t, const std::vector<ModalityModel*>& models,
                        const std::vector<Matrix>& xb, const std::vector<int>& yb) {
    const double inv_m = 1.0 / static_cast<double>(models.size());
    if (all_mlp(models)) {
        Node* acc = nullptr;
        for (std::size_t m = 0; m < models.size(); ++m) {
            Node* p = t.softmax(models[m]->logits_graph(t, t.leaf(xb[m])));
            acc = acc == nullptr ? p : t.add(acc, p);
        }
        return t.nll_mean(t.scale(acc, inv_m), yb);
    }
    Node* total = nullptr;
    const int rows = xb[0].rows();
    for (int i = 0; i < rows; ++i) {
        Node* acc = nullptr;
        for (std::size_t m = 0; m < models.size(); ++m) {
            Node* p = t.softmax(models[m]->logits_graph(t, t.leaf(take_rows(xb[m], {i}))));
            acc = acc == nullptr ? p : t.add(acc, p);
        }
        Node* li = t.nll(t.scale(acc, inv_m), yb[i]);
        total = total == nullptr ? li : t.add(total, li);
    }
    return t.scale(total, 1.0 / rows);
}

namespace {

Node* fusion_ce_loss(Tape& t, const std::vector<ModalityModel*>& models, FusionHead& head,
                     const std::vector<Matrix>& xb, const std::vector<int>& yb) {
    if (all_mlp(models)) {
        Node* feats = nullptr;
        for (std::size_t m = 0; m < models.size(); ++m) {
            Node* f = models[m]->features_graph(t, t.leaf(xb[m]));
            feats = feats == nullptr ? f : t.concat_cols(feats, f);
        }
        return t.ce_mean(nn::affine_rows(t, feats, head.w, &head.b), yb);
    }
    Node* total = nullptr;
    const int rows = xb[0].rows();
    for (int i = 0; i < rows; ++i) {
        Node* feats = nullptr;
        for (std::size_t m = 0; m < models.size(); ++m) {
            Node* f = models[m]->features_graph(t, t.leaf(take_rows(xb[m], {i})));
            feats = feats == nullptr ? f : t.concat_cols(feats, f);
        }
        Node* li = t.ce_mean(nn::affine_rows(t, feats, head.w, &head.b), {yb[i]});
        total = total == nullptr ? li : t.add(total, li);
    }
    return t.scale(total, 1.0 / rows);
}

double dataset_accuracy(const ProbFn& predictor, const synth::MultiModalDataset& ds) {
    return evaluate(predictor, ds).top1;
}

}  // namespace

// ---- procedures -------------------------------------------------------------

void train_umft(ModalityModel& model, const synth::Splits& data, int modality,
                const OptimizerConfig& opt) {
    opt.validate();
    const int mi = modality - 1;
    if (mi < 0 || mi >= data.train.modality_count()) {
        throw ConfigError("train_umft: modality " + std::to_string(modality) + " out of range");
    }
    std::vector<ModalityModel*> ms{&model};
    Optimizer optimizer(opt, nn::trainable_params(ms));
    // single-modality view of the training split for the shuffler
    synth::MultiModalDataset view;
    view.x = {data.train.x[mi]};
    view.y = data.train.y;
    view.split = "train";
    run_training(
        opt, view, optimizer,
        [&](Tape& t, const synth::MiniBatch& b) { return model_ce_loss(t, model, b.x[0], b.y); },
        [&] {
            return dataset_accuracy(
                [&](const std::vector<Matrix>& xs) { return model.probs_eval(xs[mi]); }, data.val);
        });
}

TrainedBundle umft_bundle(const std::vector<nn::ModelConfig>& cfgs, const synth::Splits& data,
                          const OptimizerConfig& opt, std::uint64_t run_seed) {
    if (static_cast<int>(cfgs.size()) != data.train.modality_count()) {
        throw ConfigError("umft_bundle: " + std::to_string(cfgs.size()) + " model configs for " +
                          std::to_string(data.train.modality_count()) + " modalities");
    }
    TrainedBundle b = fresh_bundle(cfgs, run_seed);
    for (std::size_t i = 0; i < b.models.size(); ++i) {
        OptimizerConfig o = opt;
        o.seed = derive_seed(run_seed, "umft/m", i + 1);
        train_umft(*b.models[i], data, static_cast<int>(i) + 1, o);
    }
    b.stage = Stage::umft;
    b.refresh_stage_hashes();
    return b;
}

void train_late_fusion(TrainedBundle& b, const synth::Splits& data, const OptimizerConfig& opt) {
    opt.validate();
    if (b.stage != Stage::pretrained_analog) {
        throw ConfigError("train_late_fusion: expected a pretrained-analog bundle, got stage " +
                          std::string(stage_name(b.stage)));
    }
    if (!b.fusion) throw ConfigError("train_late_fusion: bundle has no fusion head");
    auto models = b.model_ptrs();
    std::vector<Param*> targets = nn::trainable_params(models);
    targets.push_back(&b.fusion->w);
    targets.push_back(&b.fusion->b);
    Optimizer optimizer(opt, std::move(targets));
    run_training(
        opt, data.train, optimizer,
        [&](Tape& t, const synth::MiniBatch& batch) {
            return fusion_ce_loss(t, models, *b.fusion, batch.x, batch.y);
        },
        [&] { return dataset_accuracy([&](const std::vector<Matrix>& xs) { return fusion_probs(b, xs); },
                                      data.val); });
    b.stage = Stage::joint_baseline;
    b.refresh_stage_hashes();
}

double linear_eval(const ModalityModel& model, const synth::Splits& data, int modality,
                   const OptimizerConfig& opt) {
    opt.validate();
    const int mi = modality - 1;
    if (mi < 0 || mi >= data.train.modality_count()) {
        throw ConfigError("linear_eval: modality " + std::to_string(modality) + " out of range");
    }
    // frozen encoder: features are fixed, extract each split once
    Matrix ftr = model.features_eval(data.train.x[mi]);
    Matrix fval = model.features_eval(data.val.x[mi]);
    Matrix fte = model.features_eval(data.test.x[mi]);

    const int classes = model.config().classes;
    const int width = ftr.cols();
    Rng rng(derive_seed(opt.seed, "linear_eval_head"));
    Matrix w0(classes, width);
    const double std = std::sqrt(1.0 / width);
    for (auto& v : w0.values()) v = rng.gauss(0.0, std);
    Param head_w{"linear_eval/w", std::move(w0), false};
    Param head_b{"linear_eval/b", Matrix(classes, 1), false};

    synth::MultiModalDataset feat_train;
    feat_train.x = {ftr};
    feat_train.y = data.train.y;
    feat_train.split = "train";

    Optimizer optimizer(opt, {&head_w, &head_b});
    run_training(
        opt, feat_train, optimizer,
        [&](Tape& t, const synth::MiniBatch& batch) {
            return t.ce_mean(nn::affine_rows(t, t.leaf(batch.x[0]), head_w, &head_b), batch.y);
        },
        [&] {
            Matrix probs = softmax_rows(affine_rows_eval(fval, head_w, &head_b));
            int hits = 0;
            for (int i = 0; i < probs.rows(); ++i) {
                if (argmax_row(probs, i) == data.val.y[i]) ++hits;
            }
            return static_cast<double>(hits) / probs.rows();
        });

    Matrix probs = softmax_rows(affine_rows_eval(fte, head_w, &head_b));
    int hits = 0;
    for (int i = 0; i < probs.rows(); ++i) {
        if (argmax_row(probs, i) == data.test.y[i]) ++hits;
    }
    return static_cast<double>(hits) / probs.rows();
}

TrainedBundle mmlora_train(const TrainedBundle& base, const nn::LoRASelection& sel, int rank,
                           const synth::Splits& data, const OptimizerConfig& opt,
                           const nn::LoraAttachOptions& attach_opts) {
    opt.validate();
    if (base.stage != Stage::umft && base.stage != Stage::pretrained_analog) {
        throw ConfigError("mmlora_train: expected a umft (or pretrained-analog) bundle, got stage " +
                          std::string(stage_name(base.stage)));
    }
    for (const auto& m : base.models) {
        if (!m->adapters().empty()) {
            throw ConfigError("mmlora_train: bundle already carries adapters");
        }
    }
    if (sel.modalities.empty()) throw ConfigError("mmlora.selection: must name at least one modality");

    TrainedBundle b = base.clone();
    auto models = b.model_ptrs();
    for (ModalityModel* m : models) m->freeze_all();
    for (int id : sel.modalities) {
        bool found = false;
        for (ModalityModel* m : models) {
            if (m->modality_id() == id) {
                nn::lora_attach(*m, sel.placement, rank, derive_seed(opt.seed, "lora/m", id),
                                attach_opts);
                found = true;
            }
        }
        if (!found) throw ConfigError("mmlora.selection: no modality with id " + std::to_string(id));
    }

    const auto frozen_before = nn::frozen_param_hashes(b.const_model_ptrs());
    Optimizer optimizer(opt, nn::trainable_params(models, sel));
    run_training(
        opt, data.train, optimizer,
        [&](Tape& t, const synth::MiniBatch& batch) {
            return ensemble_nll_loss(t, models, batch.x, batch.y);
        },
        [&] {
            return dataset_accuracy(
                [&](const std::vector<Matrix>& xs) { return ume_probs(b.const_model_ptrs(), xs); },
                data.val);
        });

    const auto frozen_after = nn::frozen_param_hashes(b.const_model_ptrs());
    if (frozen_before != frozen_after) {
        throw TrainFault("mmlora_train: frozen-weight mutation detected");
    }
    // the base stage values are what the frozen params must still equal
    for (const auto& [name, hash] : frozen_after) {
        auto it = base.stage_hashes.find(name);
        if (it != base.stage_hashes.end() && it->second != hash) {
            throw TrainFault("mmlora_train: frozen param '" + name +
                             "' differs from its base-stage snapshot");
        }
    }
    b.stage = Stage::mmlora;
    if (base.stage == Stage::pretrained_analog) b.provenance.note = "without-umft";
    return b;
}

TrainedBundle joint_full_finetune(const TrainedBundle& base, const synth::Splits& data,
                                  const OptimizerConfig& opt) {
    opt.validate();
    if (base.stage != Stage::umft) {
        throw ConfigError("joint_full_finetune: expected a umft bundle, got stage " +
                          std::string(stage_name(base.stage)));
    }
    TrainedBundle b = base.clone();
    auto models = b.model_ptrs();
    for (ModalityModel* m : models) m->unfreeze_all();
    Optimizer optimizer(opt, nn::trainable_params(models));
    run_training(
        opt, data.train, optimizer,
        [&](Tape& t, const synth::MiniBatch& batch) {
            return ensemble_nll_loss(t, models, batch.x, batch.y);
        },
        [&] {
            return dataset_accuracy(
                [&](const std::vector<Matrix>& xs) { return ume_probs(b.const_model_ptrs(), xs); },
                data.val);
        });
    b.stage = Stage::joint_full_ft;
    b.refresh_stage_hashes();
    return b;
}

std::int64_t trainable_scalar_count(const TrainedBundle& b) {
    std::int64_t n = 0;
    for (const auto& m : b.models) {
        for (const Param* p : static_cast<const ModalityModel&>(*m).params()) {
            if (!p->frozen) n += static_cast<std::int64_t>(p->value.size());
        }
        for (const nn::LoRAAdapter& a : m->adapters()) {
            if (!a.A.frozen) n += static_cast<std::int64_t>(a.A.value.size());
            if (!a.B.frozen) n += static_cast<std::int64_t>(a.B.value.size());
        }
    }
    if (b.fusion) {
        if (!b.fusion->w.frozen) n += static_cast<std::int64_t>(b.fusion->w.value.size());
        if (!b.fusion->b.frozen) n += static_cast<std::int64_t>(b.fusion->b.value.size());
    }
    return n;
}

std::int64_t total_scalar_count(const TrainedBundle& b) {
    std::int64_t n = 0;
    for (const auto& m : b.models) n += nn::param_scalar_count(*m) + nn::adapter_scalar_count(*m);
    if (b.fusion) {
        n += static_cast<std::int64_t>(b.fusion->w.value.size() + b.fusion->b.value.size());
    }
    return n;
}

}  // namespace mmlora::train
