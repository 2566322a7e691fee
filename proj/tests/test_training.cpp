#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmlora/training.hpp"
#include "mmlora/rng.hpp"
#include "oracles.hpp"

using namespace mmlora;
using nn::ModalityModel;
using nn::ModelConfig;
using synth::Splits;
using synth::SynthConfig;
using train::OptimizerConfig;
using train::Stage;
using train::TrainedBundle;

namespace {

SynthConfig tiny_data(double noise = 0.0) {
    SynthConfig c;
    c.classes = 4;
    c.dim = 12;
    c.n_train = 160;
    c.n_val = 60;
    c.n_test = 120;
    c.unique_strength = {1.0, 1.0};
    c.paired_strength = 0.0;
    c.nuisance_scale = 0.0;
    c.noise_scale = noise;
    c.seed = 3;
    return c;
}

ModelConfig tiny_mlp(int dim = 12, int hidden = 16, int classes = 4) {
    ModelConfig m;
    m.kind = nn::EncoderKind::mlp;
    m.input_dim = dim;
    m.hidden = hidden;
    m.classes = classes;
    return m;
}

OptimizerConfig fast_opt(int epochs = 10, std::uint64_t seed = 5) {
    OptimizerConfig o;
    o.epochs = epochs;
    o.batch_size = 32;
    o.seed = seed;
    return o;
}

double train_accuracy(const ModalityModel& m, const Splits& s, int modality) {
    Matrix probs = m.probs_eval(s.train.x[modality - 1]);
    int hits = 0;
    for (int i = 0; i < probs.rows(); ++i) {
        if (argmax_row(probs, i) == s.train.y[i]) ++hits;
    }
    return static_cast<double>(hits) / probs.rows();
}

}  // namespace

TEST_CASE("train_umft") {
    SUBCASE("noiseless separable data reaches train accuracy 1.0 within 30 epochs") {
        Splits s = synth::generate(tiny_data());
        REQUIRE(synth::bayes_probe(s, {1}) == 1.0);  // separability oracle
        ModalityModel m(1, tiny_mlp(), 11);
        train::train_umft(m, s, 1, fast_opt(30));
        CHECK(train_accuracy(m, s, 1) == 1.0);
    }
    SUBCASE("zero learning rate leaves the weights bitwise unchanged") {
        Splits s = synth::generate(tiny_data(0.2));
        ModalityModel m(1, tiny_mlp(), 13);
        nn::ModelState before = nn::capture_state(m);
        OptimizerConfig o = fast_opt(3);
        o.learning_rate = 0.0;
        train::train_umft(m, s, 1, o);
        auto params = m.params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            CHECK(params[i]->value.bits_equal(before.base[i]));
        }
    }
    SUBCASE("the weak modality still trains above chance on the laziness preset") {
        SynthConfig c = synth::preset("laziness");
        c.n_train = 400;
        c.n_val = 150;
        c.n_test = 150;
        Splits s = synth::generate(c);
        ModalityModel m(2, tiny_mlp(32, 32, 8), 17);
        train::train_umft(m, s, 2, fast_opt(15));
        train::EvalReport r = train::evaluate(
            [&](const std::vector<Matrix>& xs) { return m.probs_eval(xs[1]); }, s.val);
        CHECK(r.top1 > 1.0 / 8.0);
    }
    SUBCASE("training is deterministic") {
        Splits s = synth::generate(tiny_data(0.3));
        ModalityModel a(1, tiny_mlp(), 19);
        ModalityModel b(1, tiny_mlp(), 19);
        train::train_umft(a, s, 1, fast_opt(5));
        train::train_umft(b, s, 1, fast_opt(5));
        auto pa = a.params();
        auto pb = b.params();
        for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.bits_equal(pb[i]->value));
    }
    SUBCASE("divergence aborts with the step index") {
        Splits s = synth::generate(tiny_data(0.3));
        ModalityModel m(1, tiny_mlp(), 23);
        OptimizerConfig o = fast_opt(3);
        o.kind = train::OptKind::sgd;
        o.learning_rate = 1e80;
        CHECK_THROWS_WITH_AS(train::train_umft(m, s, 1, o), doctest::Contains("step"), TrainFault);
    }
}

TEST_CASE("train_late_fusion") {
    SUBCASE("balanced noiseless data is solved exactly") {
        Splits s = synth::generate(tiny_data());
        TrainedBundle b = train::fresh_bundle({tiny_mlp(), tiny_mlp()}, 29);
        train::attach_fusion_head(b, 29);
        train::train_late_fusion(b, s, fast_opt(20));
        CHECK(b.stage == Stage::joint_baseline);
        train::EvalReport r = train::evaluate(train::bundle_predictor(b), s.test);
        CHECK(r.top1 == 1.0);
    }
    SUBCASE("zeroed second modality reduces to uni-modal training of the first branch") {
        Splits s = synth::generate(tiny_data(0.25));
        // kill modality 2's input
        Splits sz = s;
        for (synth::MultiModalDataset* ds : {&sz.train, &sz.val, &sz.test}) ds->x[1].fill(0.0);

        // reference: plain umft of modality 1
        ModalityModel ref(1, tiny_mlp(), 31);
        OptimizerConfig o = fast_opt(8, 77);
        train::train_umft(ref, s, 1, o);

        // fusion setup sharing the reference's initial weights, with the
        // modality-2 branch and fusion columns zeroed so it stays inert
        TrainedBundle b = train::fresh_bundle({tiny_mlp(), tiny_mlp()}, 31);
        {
            ModalityModel init(1, tiny_mlp(), 31);  // same init draw as ref had
            ModalityModel fresh(1, tiny_mlp(), derive_seed(31ull, "init/m", 1));
            // fresh_bundle derives its init seeds, so copy the reference start
        }
        ModalityModel start(1, tiny_mlp(), 31);
        for (nn::Param* p : b.models[0]->params()) p->value = start.param(p->name).value;
        b.models[1]->param("enc/b1").value.fill(0.0);
        b.models[1]->param("enc/b2").value.fill(0.0);
        train::attach_fusion_head(b, 31);
        // fusion head: [head/w of the reference | zeros], bias copied
        Matrix fw(4, 32);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 16; ++j) fw(i, j) = start.param("head/w").value(i, j);
        b.fusion->w.value = fw;
        b.fusion->b.value = start.param("head/b").value;

        ModalityModel ref2(1, tiny_mlp(), 31);  // same start as the fusion copy
        train::train_umft(ref2, s, 1, o);
        train::train_late_fusion(b, sz, o);

        for (const char* name : {"enc/w1", "enc/b1", "enc/w2", "enc/b2"}) {
            CHECK(b.models[0]->param(name).value.bits_equal(ref2.param(name).value));
        }
        // fusion columns for modality 1 equal the trained uni-modal head
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 16; ++j) {
                CHECK(b.fusion->w.value(i, j) == ref2.param("head/w").value(i, j));
            }
            for (int j = 16; j < 32; ++j) CHECK(b.fusion->w.value(i, j) == 0.0);
        }
        CHECK(b.fusion->b.value.bits_equal(ref2.param("head/b").value));
    }
    SUBCASE("stage and fusion-head preconditions") {
        Splits s = synth::generate(tiny_data());
        TrainedBundle b = train::fresh_bundle({tiny_mlp(), tiny_mlp()}, 37);
        CHECK_THROWS_AS(train::train_late_fusion(b, s, fast_opt(1)), ConfigError);  // no head
        train::attach_fusion_head(b, 37);
        train::train_late_fusion(b, s, fast_opt(1));
        CHECK_THROWS_AS(train::train_late_fusion(b, s, fast_opt(1)), ConfigError);  // wrong stage
    }
}

TEST_CASE("linear_eval") {
    SUBCASE("random frozen encoder on chance-structured data sits at chance") {
        SynthConfig c = tiny_data(0.5);
        c.unique_strength = {0.0, 0.0};  // nothing to learn
        Splits s = synth::generate(c);
        ModalityModel m(1, tiny_mlp(), 41);
        const double acc = train::linear_eval(m, s, 1, fast_opt(8));
        const double chance = 0.25;
        CHECK(std::abs(acc - chance) <= oracles::binomial_3sigma(chance, s.test.size()) + 0.05);
    }
    SUBCASE("identity encoder on noiseless separable data reaches 1.0") {
        SynthConfig c = tiny_data();
        Splits s = synth::generate(c);
        ModalityModel m(1, tiny_mlp(12, 12, 4), 43);
        m.param("enc/w1").value = Matrix::identity(12);
        m.param("enc/b1").value.fill(1.0);  // keep relu active on all coordinates
        m.param("enc/w2").value = Matrix::identity(12);
        m.param("enc/b2").value.fill(0.0);
        OptimizerConfig o = fast_opt(80);
        o.learning_rate = 0.01;
        o.weight_decay = 0.0;
        const double acc = train::linear_eval(m, s, 1, o);
        CHECK(acc == 1.0);
    }
    SUBCASE("the probed encoder is bit-identical before and after") {
        Splits s = synth::generate(tiny_data(0.2));
        ModalityModel m(1, tiny_mlp(), 47);
        std::vector<std::uint64_t> before;
        for (const nn::Param* p : static_cast<const ModalityModel&>(m).params()) {
            before.push_back(matrix_hash(p->value));
        }
        train::linear_eval(m, s, 1, fast_opt(5));
        std::size_t i = 0;
        for (const nn::Param* p : static_cast<const ModalityModel&>(m).params()) {
            CHECK(matrix_hash(p->value) == before[i++]);
        }
    }
}

TEST_CASE("ume_predict") {
    SUBCASE("opposing one-hot predictions average to uniform") {
        // two heads rigged to produce near-one-hot opposite distributions
        ModalityModel a(1, tiny_mlp(4, 4, 2), 51);
        ModalityModel b(2, tiny_mlp(4, 4, 2), 52);
        // logits via zeroed encoders and fixed biases
        for (ModalityModel* m : {&a, &b}) {
            m->param("enc/w1").value.fill(0.0);
            m->param("enc/w2").value.fill(0.0);
            m->param("head/w").value.fill(0.0);
        }
        a.param("head/b").value = Matrix::col_vector({60.0, -60.0});   // P1 = [1, 0]
        b.param("head/b").value = Matrix::col_vector({-60.0, 60.0});   // P2 = [0, 1]
        Matrix x(1, 4);
        Matrix p = train::ume_probs({&a, &b}, {x, x});
        CHECK(p(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("averaging identical models is the identity") {
        ModalityModel m(1, tiny_mlp(), 53);
        Rng rng(54);
        Matrix x(3, 12);
        for (auto& v : x.values()) v = rng.gauss();
        Matrix single = m.probs_eval(x);
        Matrix avg = train::ume_probs({&m, &m}, {x, x});
        for (std::size_t i = 0; i < single.size(); ++i) {
            CHECK(avg.values()[i] == doctest::Approx(single.values()[i]).epsilon(1e-15));
        }
    }
    SUBCASE("output rows are distributions within 1e-12") {
        ModalityModel a(1, tiny_mlp(), 55);
        ModalityModel b(2, tiny_mlp(), 56);
        Rng rng(57);
        Matrix x(8, 12);
        for (auto& v : x.values()) v = rng.gauss();
        Matrix p = train::ume_probs({&a, &b}, {x, x});
        for (int i = 0; i < p.rows(); ++i) {
            double sum = 0.0;
            for (int j = 0; j < p.cols(); ++j) {
                CHECK(p(i, j) >= 0.0);
                sum += p(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
    SUBCASE("class-count mismatch is rejected") {
        ModalityModel a(1, tiny_mlp(12, 16, 4), 58);
        ModalityModel b(2, tiny_mlp(12, 16, 3), 59);
        Matrix x(1, 12);
        CHECK_THROWS_AS(train::ume_probs({&a, &b}, {x, x}), ConfigError);
    }
}

TEST_CASE("mmlora_train") {
    SynthConfig c = tiny_data(0.4);
    c.unique_strength = {0.6, 0.6};
    c.paired_strength = 2.0;
    c.nuisance_scale = 1.2;
    Splits s = synth::generate(c);
    TrainedBundle umft = train::umft_bundle({tiny_mlp(), tiny_mlp()}, s, fast_opt(6), 61);

    SUBCASE("step-0 loss equals the averaged-prediction nll bitwise") {
        TrainedBundle b = umft.clone();
        for (ModalityModel* m : b.model_ptrs()) m->freeze_all();
        for (int id : {1, 2}) {
            nn::lora_attach(*b.models[id - 1], nn::Placement::encoder_only, 1,
                            derive_seed(99ull, "lora/m", id));
        }
        auto batch = synth::batch_iter(s.train, 32, 123).front();
        autodiff::Tape t;
        auto models = b.model_ptrs();
        autodiff::Node* loss = train::ensemble_nll_loss(t, models, batch.x, batch.y);

        // reference: kernel-path averaged probabilities of the unadapted bundle
        Matrix pu = train::ume_probs(umft.const_model_ptrs(), batch.x);
        double acc = 0.0;
        for (int i = 0; i < pu.rows(); ++i) acc += -std::log(pu(i, batch.y[i]));
        const double expect = acc / pu.rows();
        CHECK(loss->value(0, 0) == expect);
    }
    SUBCASE("zero-delta start: predictions equal the ensemble bitwise after attach") {
        OptimizerConfig o = fast_opt(1, 63);
        o.learning_rate = 0.0;  // keeps B at zero through the run
        nn::LoRASelection sel;
        sel.modalities = {1, 2};
        TrainedBundle adapted = train::mmlora_train(umft, sel, 1, s, o);
        Matrix p0 = train::ume_probs(umft.const_model_ptrs(), s.test.x);
        Matrix p1 = train::ume_probs(adapted.const_model_ptrs(), s.test.x);
        CHECK(p0.bits_equal(p1));
    }
    SUBCASE("adapter gradients match central differences below 1e-4") {
        TrainedBundle b = umft.clone();
        for (ModalityModel* m : b.model_ptrs()) m->freeze_all();
        Rng rng(67);
        for (int id : {1, 2}) {
            nn::lora_attach(*b.models[id - 1], nn::Placement::encoder_only, 1,
                            derive_seed(67ull, "lora/m", id));
            for (nn::LoRAAdapter& a : b.models[id - 1]->adapters()) {
                for (auto& v : a.B.value.values()) v = rng.gauss(0.0, 0.05);
            }
        }
        auto batch = synth::batch_iter(s.train, 8, 71).front();
        auto models = b.model_ptrs();
        std::vector<Matrix*> theta;
        for (ModalityModel* m : models) {
            for (nn::LoRAAdapter& a : m->adapters()) {
                theta.push_back(&a.A.value);
                theta.push_back(&a.B.value);
            }
        }
        const double err = autodiff::grad_check(
            [&](autodiff::Tape& t) { return train::ensemble_nll_loss(t, models, batch.x, batch.y); },
            theta, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("freeze integrity: every frozen param keeps its snapshot hash") {
        nn::LoRASelection sel;
        sel.modalities = {1, 2};
        TrainedBundle adapted = train::mmlora_train(umft, sel, 1, s, fast_opt(10, 73));
        CHECK(adapted.stage == Stage::mmlora);
        auto hashes = nn::frozen_param_hashes(adapted.const_model_ptrs());
        for (const auto& [name, hash] : hashes) {
            CHECK(umft.stage_hashes.at(name) == hash);
        }
        // adapters actually moved
        bool any_b_nonzero = false;
        for (const auto& m : adapted.models) {
            for (const nn::LoRAAdapter& a : m->adapters()) {
                for (double v : a.B.value.values()) any_b_nonzero |= (v != 0.0);
            }
        }
        CHECK(any_b_nonzero);
    }
    SUBCASE("single-modality selection trains only that modality's adapters") {
        nn::LoRASelection sel;
        sel.modalities = {2};
        TrainedBundle adapted = train::mmlora_train(umft, sel, 1, s, fast_opt(3, 79));
        CHECK(adapted.models[0]->adapters().empty());
        CHECK_FALSE(adapted.models[1]->adapters().empty());
    }
    SUBCASE("stage preconditions") {
        nn::LoRASelection sel;
        sel.modalities = {1, 2};
        TrainedBundle adapted = train::mmlora_train(umft, sel, 1, s, fast_opt(2, 83));
        CHECK_THROWS_AS(train::mmlora_train(adapted, sel, 1, s, fast_opt(2)), ConfigError);
        TrainedBundle fusion = train::fresh_bundle({tiny_mlp(), tiny_mlp()}, 85);
        train::attach_fusion_head(fusion, 85);
        train::train_late_fusion(fusion, s, fast_opt(1));
        CHECK_THROWS_AS(train::mmlora_train(fusion, sel, 1, s, fast_opt(2)), ConfigError);
    }
}

TEST_CASE("joint_full_finetune") {
    SynthConfig c = tiny_data(0.3);
    Splits s = synth::generate(c);
    TrainedBundle umft = train::umft_bundle({tiny_mlp(), tiny_mlp()}, s, fast_opt(5), 91);

    SUBCASE("zero learning rate reproduces the ensemble exactly") {
        OptimizerConfig o = fast_opt(2, 93);
        o.learning_rate = 0.0;
        TrainedBundle ft = train::joint_full_finetune(umft, s, o);
        CHECK(ft.stage == Stage::joint_full_ft);
        Matrix p0 = train::ume_probs(umft.const_model_ptrs(), s.test.x);
        Matrix p1 = train::ume_probs(ft.const_model_ptrs(), s.test.x);
        CHECK(p0.bits_equal(p1));
    }
    SUBCASE("trainable count vastly exceeds the adapter count") {
        TrainedBundle ft = train::joint_full_finetune(umft, s, fast_opt(1, 95));
        nn::LoRASelection sel;
        sel.modalities = {1, 2};
        TrainedBundle lo = train::mmlora_train(umft, sel, 1, s, fast_opt(1, 95));
        CHECK(train::trainable_scalar_count(ft) == train::total_scalar_count(umft));
        CHECK(train::trainable_scalar_count(lo) * 5 < train::trainable_scalar_count(ft));
    }
    SUBCASE("requires a umft bundle") {
        TrainedBundle fresh = train::fresh_bundle({tiny_mlp(), tiny_mlp()}, 97);
        CHECK_THROWS_AS(train::joint_full_finetune(fresh, s, fast_opt(1)), ConfigError);
    }
}

TEST_CASE("evaluate") {
    SynthConfig c = tiny_data(0.2);
    c.n_test = 97;
    Splits s = synth::generate(c);

    SUBCASE("perfect predictor scores 1.0") {
        train::EvalReport r = train::evaluate(
            [&](const std::vector<Matrix>&) {
                Matrix p(s.test.size(), 4);
                for (int i = 0; i < p.rows(); ++i) p(i, s.test.y[i]) = 1.0;
                return p;
            },
            s.test);
        CHECK(r.top1 == 1.0);
        CHECK(r.sample_count == 97);
    }
    SUBCASE("uniform predictor resolves every tie to class 0") {
        train::EvalReport r = train::evaluate(
            [&](const std::vector<Matrix>&) {
                Matrix p(s.test.size(), 4);
                p.fill(0.25);
                return p;
            },
            s.test);
        int zeros = 0;
        for (int y : s.test.y) zeros += (y == 0);
        CHECK(r.top1 == doctest::Approx(static_cast<double>(zeros) / s.test.size()));
    }
    SUBCASE("accuracy is invariant under positive rescaling per sample") {
        ModalityModel m(1, tiny_mlp(), 99);
        auto base = [&](const std::vector<Matrix>& xs) { return m.probs_eval(xs[0]); };
        auto scaled = [&](const std::vector<Matrix>& xs) {
            Matrix p = m.probs_eval(xs[0]);
            Rng rng(101);
            for (int i = 0; i < p.rows(); ++i) {
                const double f = 0.1 + 3.0 * rng.uniform();
                for (int j = 0; j < p.cols(); ++j) p(i, j) *= f;
            }
            return p;
        };
        CHECK(train::evaluate(base, s.test).top1 == train::evaluate(scaled, s.test).top1);
    }
    SUBCASE("empty test set is rejected") {
        synth::MultiModalDataset empty;
        CHECK_THROWS_AS(train::evaluate([](const std::vector<Matrix>&) { return Matrix(); }, empty),
                        ConfigError);
    }
}
