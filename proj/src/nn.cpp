#include "mmlora/nn.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "mmlora/rng.hpp"

namespace mmlora::nn {

using autodiff::Node;
using autodiff::Tape;

const char* placement_name(Placement p) {
    switch (p) {
        case Placement::encoder_only: return "encoder_only";
        case Placement::head_only: return "head_only";
        case Placement::encoder_and_head: return "encoder_and_head";
    }
    return "?";
}

Placement placement_from_name(const std::string& s) {
    if (s == "encoder_only") return Placement::encoder_only;
    if (s == "head_only") return Placement::head_only;
    if (s == "encoder_and_head") return Placement::encoder_and_head;
    throw ConfigError("unknown placement '" + s + "'");
}

namespace {

Matrix gaussian_matrix(int rows, int cols, double std, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = rng.gauss(0.0, std);
    return m;
}

}  // namespace

// X [n x k] -> X W^T + delta + 1 b^T, all promotion explicit
Node* affine_rows(Tape& t, Node* x, const Param& w, const Param* bias, const LoRAAdapter* ad) {
    Node* out = t.matmul(x, t.transpose(t.watch(w.value, !w.frozen)));
    if (ad != nullptr) {
        Node* an = t.watch(ad->A.value, !ad->A.frozen);
        Node* bn = t.watch(ad->B.value, !ad->B.frozen);
        Node* delta = t.matmul(t.matmul(x, t.transpose(an)), t.transpose(bn));
        if (ad->delta_scale != 1.0) delta = t.scale(delta, ad->delta_scale);
        out = t.add(out, delta);
    }
    if (bias != nullptr) {
        Node* ones = t.leaf(Matrix::ones(x->value.rows(), 1));
        out = t.add(out, t.matmul(ones, t.transpose(t.watch(bias->value, !bias->frozen))));
    }
    return out;
}

// kernel twin of affine_rows, same operations in the same order
Matrix affine_rows_eval(const Matrix& x, const Param& w, const Param* bias, const LoRAAdapter* ad) {
    Matrix out = matmul(x, transpose(w.value));
    if (ad != nullptr) {
        Matrix delta = matmul(matmul(x, transpose(ad->A.value)), transpose(ad->B.value));
        if (ad->delta_scale != 1.0) delta = scale(delta, ad->delta_scale);
        out = add(out, delta);
    }
    if (bias != nullptr) {
        out = add(out, matmul(Matrix::ones(x.rows(), 1), transpose(bias->value)));
    }
    return out;
}

ModalityModel::ModalityModel(int modality_id, const ModelConfig& cfg, std::uint64_t init_seed)
    : modality_id_(modality_id), cfg_(cfg) {
    if (cfg.classes < 2) throw ConfigError("model: classes must be >= 2");
    if (cfg.input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
    Rng rng(init_seed);
    if (cfg.kind == EncoderKind::mlp) {
        if (cfg.hidden < 1) throw ConfigError("model: hidden must be >= 1");
        add_param("enc/w1", gaussian_matrix(cfg.hidden, cfg.input_dim, std::sqrt(2.0 / cfg.input_dim), rng));
        add_param("enc/b1", Matrix(cfg.hidden, 1));
        add_param("enc/w2", gaussian_matrix(cfg.hidden, cfg.hidden, std::sqrt(2.0 / cfg.hidden), rng));
        add_param("enc/b2", Matrix(cfg.hidden, 1));
        add_param("head/w", gaussian_matrix(cfg.classes, cfg.hidden, std::sqrt(1.0 / cfg.hidden), rng));
        add_param("head/b", Matrix(cfg.classes, 1));
    } else {
        if (cfg.tokens < 1 || cfg.token_width < 1 || cfg.tokens * cfg.token_width != cfg.input_dim) {
            throw ConfigError("model: tokens * token_width must equal input_dim (" +
                              std::to_string(cfg.tokens) + " * " + std::to_string(cfg.token_width) +
                              " != " + std::to_string(cfg.input_dim) + ")");
        }
        const int k = cfg.token_width;
        const double attn_std = std::sqrt(1.0 / k);
        add_param("enc/attn/wq", gaussian_matrix(k, k, attn_std, rng));
        add_param("enc/attn/wk", gaussian_matrix(k, k, attn_std, rng));
        add_param("enc/attn/wv", gaussian_matrix(k, k, attn_std, rng));
        add_param("enc/attn/wo", gaussian_matrix(k, k, attn_std, rng));
        add_param("enc/ff/w1", gaussian_matrix(cfg.ff_dim, k, std::sqrt(2.0 / k), rng));
        add_param("enc/ff/b1", Matrix(cfg.ff_dim, 1));
        add_param("enc/ff/w2", gaussian_matrix(k, cfg.ff_dim, std::sqrt(1.0 / cfg.ff_dim), rng));
        add_param("enc/ff/b2", Matrix(k, 1));
        add_param("head/w", gaussian_matrix(cfg.classes, k, std::sqrt(1.0 / k), rng));
        add_param("head/b", Matrix(cfg.classes, 1));
    }
}

Param& ModalityModel::add_param(std::string name, Matrix value) {
    for (const Param& p : params_) {
        if (p.name == name) throw ConfigError("duplicate param name '" + name + "'");
    }
    params_.push_back(Param{std::move(name), std::move(value), false});
    return params_.back();
}

Param& ModalityModel::param(const std::string& name) {
    for (Param& p : params_) {
        if (p.name == name) return p;
    }
    throw ConfigError("model m" + std::to_string(modality_id_) + " has no param '" + name + "'");
}

const Param& ModalityModel::param(const std::string& name) const {
    return const_cast<ModalityModel*>(this)->param(name);
}

std::vector<Param*> ModalityModel::params() {
    std::vector<Param*> out;
    for (Param& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Param*> ModalityModel::params() const {
    std::vector<const Param*> out;
    for (const Param& p : params_) out.push_back(&p);
    return out;
}

LoRAAdapter* ModalityModel::adapter_for(const std::string& base_name) {
    for (LoRAAdapter& a : adapters_) {
        if (a.base_name == base_name) return &a;
    }
    return nullptr;
}

const LoRAAdapter* ModalityModel::adapter_for(const std::string& base_name) const {
    return const_cast<ModalityModel*>(this)->adapter_for(base_name);
}

void ModalityModel::freeze_all() {
    for (Param& p : params_) p.frozen = true;
}

void ModalityModel::unfreeze_all() {
    for (Param& p : params_) p.frozen = false;
}

AttentionWeights ModalityModel::attention_weights() const {
    AttentionWeights w;
    w.wq = &param("enc/attn/wq");
    w.wk = &param("enc/attn/wk");
    w.wv = &param("enc/attn/wv");
    w.wo = &param("enc/attn/wo");
    w.aq = adapter_for("enc/attn/wq");
    w.ak = adapter_for("enc/attn/wk");
    w.av = adapter_for("enc/attn/wv");
    return w;
}

Node* ModalityModel::features_graph(Tape& t, Node* x) const {
    if (x->value.cols() != cfg_.input_dim) {
        throw ShapeError("encoder m" + std::to_string(modality_id_) + ": input width " +
                         std::to_string(x->value.cols()) + " != " + std::to_string(cfg_.input_dim));
    }
    if (cfg_.kind == EncoderKind::mlp) {
        Node* h = t.relu(affine_rows(t, x, param("enc/w1"), &param("enc/b1"), adapter_for("enc/w1")));
        return affine_rows(t, h, param("enc/w2"), &param("enc/b2"), adapter_for("enc/w2"));
    }
    if (x->value.rows() != 1) {
        throw ShapeError("tiny_transformer encoder takes one sample row at a time, got " +
                         x->value.shape_str());
    }
    Node* tokens = t.reshape(x, cfg_.tokens, cfg_.token_width);
    Node* attn = attention_forward(t, attention_weights(), tokens);
    Node* h = t.relu(affine_rows(t, attn, param("enc/ff/w1"), &param("enc/ff/b1"), nullptr));
    Node* ff = affine_rows(t, h, param("enc/ff/w2"), &param("enc/ff/b2"), nullptr);
    return t.mean_rows(t.add(attn, ff));
}

Node* ModalityModel::logits_graph(Tape& t, Node* x) const {
    Node* f = features_graph(t, x);
    return affine_rows(t, f, param("head/w"), &param("head/b"), adapter_for("head/w"));
}

Matrix ModalityModel::features_eval(const Matrix& x) const {
    if (x.cols() != cfg_.input_dim) {
        throw ShapeError("encoder m" + std::to_string(modality_id_) + ": input width " +
                         std::to_string(x.cols()) + " != " + std::to_string(cfg_.input_dim));
    }
    if (cfg_.kind == EncoderKind::mlp) {
        Matrix h = relu(affine_rows_eval(x, param("enc/w1"), &param("enc/b1"), adapter_for("enc/w1")));
        return affine_rows_eval(h, param("enc/w2"), &param("enc/b2"), adapter_for("enc/w2"));
    }
    Matrix out(x.rows(), cfg_.token_width);
    const AttentionWeights w = attention_weights();
    for (int i = 0; i < x.rows(); ++i) {
        Matrix row(1, x.cols());
        for (int j = 0; j < x.cols(); ++j) row(0, j) = x(i, j);
        Matrix tokens = reshape(row, cfg_.tokens, cfg_.token_width);
        Matrix attn = attention_forward_eval(w, tokens);
        Matrix h = relu(affine_rows_eval(attn, param("enc/ff/w1"), &param("enc/ff/b1"), nullptr));
        Matrix ff = affine_rows_eval(h, param("enc/ff/w2"), &param("enc/ff/b2"), nullptr);
        Matrix pooled = mean_rows(add(attn, ff));
        for (int j = 0; j < cfg_.token_width; ++j) out(i, j) = pooled(0, j);
    }
    return out;
}

Matrix ModalityModel::logits_eval(const Matrix& x) const {
    return affine_rows_eval(features_eval(x), param("head/w"), &param("head/b"), adapter_for("head/w"));
}

Matrix ModalityModel::probs_eval(const Matrix& x) const {
    return softmax_rows(logits_eval(x));
}

Node* linear_forward(Tape& t, const Param& w, const Param& bias, Node* x) {
    if (x->value.cols() != 1 || w.value.cols() != x->value.rows()) {
        throw ShapeError("linear_forward: W " + w.value.shape_str() + " does not accept x " +
                         x->value.shape_str());
    }
    if (bias.value.rows() != w.value.rows() || bias.value.cols() != 1) {
        throw ShapeError("linear_forward: bias " + bias.value.shape_str() + " does not match W " +
                         w.value.shape_str());
    }
    Node* wn = t.watch(w.value, !w.frozen);
    Node* bn = t.watch(bias.value, !bias.frozen);
    return t.add(t.matmul(wn, x), bn);
}

Node* lora_forward(Tape& t, const Param& base, const LoRAAdapter& ad, Node* x) {
    if (x->value.cols() != 1 || base.value.cols() != x->value.rows()) {
        throw ShapeError("lora_forward: W0 " + base.value.shape_str() + " does not accept x " +
                         x->value.shape_str());
    }
    Node* wn = t.watch(base.value, !base.frozen);
    Node* an = t.watch(ad.A.value, !ad.A.frozen);
    Node* bn = t.watch(ad.B.value, !ad.B.frozen);
    Node* delta = t.matmul(bn, t.matmul(an, x));
    if (ad.delta_scale != 1.0) delta = t.scale(delta, ad.delta_scale);
    return t.add(t.matmul(wn, x), delta);
}

Matrix merge_lora(const Param& base, const LoRAAdapter& ad) {
    Matrix delta = matmul(ad.B.value, ad.A.value);
    if (ad.delta_scale != 1.0) delta = scale(delta, ad.delta_scale);
    return add(base.value, delta);
}

Node* attention_forward(Tape& t, const AttentionWeights& w, Node* x) {
    const int width = x->value.cols();
    if (w.wq->value.rows() != width || w.wq->value.cols() != width) {
        throw ShapeError("attention: Wq " + w.wq->value.shape_str() + " does not match token width " +
                         std::to_string(width));
    }
    Node* q = affine_rows(t, x, *w.wq, nullptr, w.aq);
    Node* k = affine_rows(t, x, *w.wk, nullptr, w.ak);
    Node* v = affine_rows(t, x, *w.wv, nullptr, w.av);
    Node* scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(static_cast<double>(width)));
    Node* attn = t.softmax(scores);
    Node* proj = affine_rows(t, t.matmul(attn, v), *w.wo, nullptr, nullptr);
    return t.add(x, proj);
}

Matrix attention_forward_eval(const AttentionWeights& w, const Matrix& x) {
    const int width = x.cols();
    Matrix q = affine_rows_eval(x, *w.wq, nullptr, w.aq);
    Matrix k = affine_rows_eval(x, *w.wk, nullptr, w.ak);
    Matrix v = affine_rows_eval(x, *w.wv, nullptr, w.av);
    Matrix scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(width)));
    Matrix attn = softmax_rows(scores);
    Matrix proj = affine_rows_eval(matmul(attn, v), *w.wo, nullptr, nullptr);
    return add(x, proj);
}

std::vector<std::string> lora_target_names(const ModalityModel& m, Placement p) {
    std::vector<std::string> names;
    if (p == Placement::encoder_only || p == Placement::encoder_and_head) {
        if (m.config().kind == EncoderKind::mlp) {
            names.push_back("enc/w1");
            names.push_back("enc/w2");
        } else {
            names.push_back("enc/attn/wq");
            names.push_back("enc/attn/wk");
            names.push_back("enc/attn/wv");
        }
    }
    if (p == Placement::head_only || p == Placement::encoder_and_head) {
        names.push_back("head/w");
    }
    return names;
}

void lora_attach(ModalityModel& m, Placement p, int rank, std::uint64_t seed,
                 const LoraAttachOptions& opts) {
    if (rank < 1) throw ConfigError("lora_attach: rank must be >= 1, got " + std::to_string(rank));
    Rng rng(seed);
    for (const std::string& name : lora_target_names(m, p)) {
        if (m.adapter_for(name) != nullptr) {
            throw ConfigError("lora_attach: adapter already attached to '" + name + "'");
        }
        const Param& base = m.param(name);
        const int d = base.value.rows();
        const int k = base.value.cols();
        int r = rank;
        if (r > std::min(d, k)) {
            if (!opts.clamp_rank) {
                throw ConfigError("lora_attach: rank " + std::to_string(r) + " exceeds min(d,k)=" +
                                  std::to_string(std::min(d, k)) + " for '" + name + "' " +
                                  base.value.shape_str());
            }
            r = std::min(d, k);
            std::cerr << "warning: lora rank clamped to " << r << " for '" << name << "' "
                      << base.value.shape_str() << "\n";
        } else if (r > std::min(d, k) / 2) {
            std::cerr << "warning: lora rank " << r << " is above min(d,k)/2 for '" << name << "' "
                      << base.value.shape_str() << "\n";
        }
        LoRAAdapter ad;
        ad.base_name = name;
        ad.rank = r;
        ad.delta_scale = opts.delta_scale;
        ad.A = Param{name + "/lora_A", gaussian_matrix(r, k, opts.init_std, rng), false};
        ad.B = Param{name + "/lora_B", Matrix(d, r), false};
        m.adapters().push_back(std::move(ad));
    }
    m.freeze_all();
}

namespace {

void sort_by_qualified_name(std::vector<std::pair<std::string, Param*>>& items) {
    std::sort(items.begin(), items.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
}

std::vector<Param*> strip_names(std::vector<std::pair<std::string, Param*>>&& items) {
    std::vector<Param*> out;
    out.reserve(items.size());
    for (auto& [name, p] : items) out.push_back(p);
    return out;
}

std::string qualified(const ModalityModel& m, const Param& p) {
    return "m" + std::to_string(m.modality_id()) + "/" + p.name;
}

}  // namespace

std::vector<Param*> trainable_params(const std::vector<ModalityModel*>& models) {
    std::vector<std::pair<std::string, Param*>> items;
    for (ModalityModel* m : models) {
        for (Param* p : m->params()) {
            if (!p->frozen) items.emplace_back(qualified(*m, *p), p);
        }
        for (LoRAAdapter& a : m->adapters()) {
            if (!a.A.frozen) items.emplace_back(qualified(*m, a.A), &a.A);
            if (!a.B.frozen) items.emplace_back(qualified(*m, a.B), &a.B);
        }
    }
    if (items.empty()) throw ConfigError("trainable_params: selection yields no trainable params");
    sort_by_qualified_name(items);
    return strip_names(std::move(items));
}

std::vector<Param*> trainable_params(const std::vector<ModalityModel*>& models,
                                     const LoRASelection& sel) {
    if (sel.modalities.empty()) throw ConfigError("trainable_params: empty modality selection");
    std::vector<std::pair<std::string, Param*>> items;
    for (ModalityModel* m : models) {
        if (std::find(sel.modalities.begin(), sel.modalities.end(), m->modality_id()) ==
            sel.modalities.end()) {
            continue;
        }
        for (LoRAAdapter& a : m->adapters()) {
            if (!a.A.frozen) items.emplace_back(qualified(*m, a.A), &a.A);
            if (!a.B.frozen) items.emplace_back(qualified(*m, a.B), &a.B);
        }
    }
    if (items.empty()) throw ConfigError("trainable_params: selection yields no trainable params");
    sort_by_qualified_name(items);
    return strip_names(std::move(items));
}

std::int64_t param_scalar_count(const ModalityModel& m) {
    std::int64_t n = 0;
    for (const Param* p : m.params()) n += static_cast<std::int64_t>(p->value.size());
    return n;
}

std::int64_t adapter_scalar_count(const ModalityModel& m) {
    std::int64_t n = 0;
    for (const LoRAAdapter& a : m.adapters()) {
        n += static_cast<std::int64_t>(a.A.value.size() + a.B.value.size());
    }
    return n;
}

ModelState capture_state(const ModalityModel& m) {
    ModelState s;
    for (const Param* p : m.params()) s.base.push_back(p->value);
    for (const LoRAAdapter& a : m.adapters()) {
        s.adapter_a.push_back(a.A.value);
        s.adapter_b.push_back(a.B.value);
    }
    return s;
}

void restore_state(ModalityModel& m, const ModelState& s) {
    auto params = m.params();
    if (params.size() != s.base.size() || m.adapters().size() != s.adapter_a.size()) {
        throw ConfigError("restore_state: snapshot does not match the model layout");
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.base[i];
    std::size_t i = 0;
    for (LoRAAdapter& a : m.adapters()) {
        a.A.value = s.adapter_a[i];
        a.B.value = s.adapter_b[i];
        ++i;
    }
}

std::map<std::string, std::uint64_t> frozen_param_hashes(const std::vector<const ModalityModel*>& models) {
    std::map<std::string, std::uint64_t> out;
    for (const ModalityModel* m : models) {
        for (const Param* p : m->params()) {
            if (p->frozen) out[qualified(*m, *p)] = matrix_hash(p->value);
        }
    }
    return out;
}

}  // namespace mmlora::nn
