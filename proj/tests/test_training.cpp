#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "jem/training.hpp"

using namespace jem;

namespace {

struct Fixture {
    SyntheticData data;
    ModelParams params;
    CenterBank bank;       // matches `quantized`
    TripletBatch batch;
    LossConfig cfg;
};

Fixture make_fixture(std::uint64_t seed, bool quantized,
                     std::size_t batch_size = 4) {
    Fixture f;
    SyntheticSpec spec;
    spec.n_concepts = 3;
    spec.subsets_per_concept = 2;
    spec.feat_dim = 6;
    spec.vocab_size = 40;
    spec.tokens_per_caption = 4;
    spec.captions_per_subset = 2;
    spec.noise_sigma = 0.2;
    spec.seed = seed;
    f.data = synth_dataset(spec);

    ModelDims dims;
    dims.feat_dim = spec.feat_dim;
    dims.word_dim = 8;
    dims.embed_dim = 4;
    dims.n_subsets = f.data.dataset.size();
    dims.n_quant = 2;
    dims.vocab_size = spec.vocab_size;
    f.params = init_params(dims, seed);

    std::mt19937_64 rng(seed + 17);
    std::normal_distribution<double> gauss(0.0, 0.5);
    f.bank.quantized = quantized;
    f.bank.centers =
        Mat(quantized ? dims.n_quant : dims.n_subsets, dims.embed_dim);
    for (double& x : f.bank.centers.data) x = gauss(rng);

    BatchSampler sampler(f.data.dataset, batch_size, seed + 3);
    REQUIRE(sampler.next_batch(f.batch, SamplingMode::Random, rng));
    return f;
}

}  // namespace

TEST_CASE("gradients match finite differences, phase-1 loss") {
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        Fixture f = make_fixture(seed, false);
        auto report = grad_check(f.params, f.bank, f.batch, f.cfg, 0.2, 0.2,
                                 false, 1e-6, seed);
        for (auto& e : report) {
            INFO("tensor " << e.tensor << " seed " << seed);
            CHECK(e.max_rel_err <= 1e-4);
        }
    }
}

TEST_CASE("gradients match finite differences, quantized loss") {
    for (std::uint64_t seed : {11, 12, 13, 14, 15}) {
        Fixture f = make_fixture(seed, true);
        auto report = grad_check(f.params, f.bank, f.batch, f.cfg, 0.2, 0.2,
                                 true, 1e-6, seed);
        for (auto& e : report) {
            INFO("tensor " << e.tensor << " seed " << seed);
            CHECK(e.max_rel_err <= 1e-4);
        }
    }
}

TEST_CASE("all-inactive batch gives zero loss-term gradients") {
    // a huge delta puts every center hinge past any plausible squared
    // distance, margins are hugely negative, so only CE is active.
    Fixture f = make_fixture(21, false);
    f.cfg.delta = 100.0;
    Gradients g;
    BatchResult r = backward_total(f.params, f.bank, f.batch, f.cfg, -10.0,
                                   -10.0, false, g);
    CHECK(r.loss.l_center == 0.0);
    CHECK(r.loss.l_triplet == 0.0);
    for (double x : g.centers.data) CHECK(x == 0.0);
}

TEST_CASE("single-sample center gradient is -2(x - c) per active term") {
    ModelDims dims;
    dims.feat_dim = 2;
    dims.word_dim = 4;
    dims.embed_dim = 2;
    dims.n_subsets = 2;
    dims.n_quant = 0;
    dims.vocab_size = 10;
    ModelParams params = init_params(dims, 1);
    CenterBank bank;
    bank.centers = Mat(2, 2);
    bank.centers.set_row(0, {0.1, 0.3});

    TripletBatch batch;
    batch.anchor_img_feats = {{3.0, 4.0}};
    batch.neg_img_feats = {{1.0, 0.0}};
    batch.pos_captions = {{1, 2}};
    batch.neg_captions = {{3}};
    batch.subset_labels = {0};
    batch.neg_subset_labels = {1};

    LossConfig cfg;
    cfg.delta = 0.0;
    Gradients g;
    // margins far negative so the triplet is inactive; CE contributes
    // nothing to centers anyway.
    backward_total(params, bank, batch, cfg, -10.0, -10.0, false, g);

    Vec x = embed_image(params, batch.anchor_img_feats[0]);
    Vec y = embed_caption(params, batch.pos_captions[0]);
    Vec c = bank.centers.row_vec(0);
    for (std::size_t j = 0; j < 2; ++j) {
        double expect = -2.0 * (x[j] - c[j]) - 2.0 * (y[j] - c[j]);
        CHECK(g.centers.at(0, j) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("adam first step magnitude and zero-grad no-op") {
    ModelDims dims;
    dims.feat_dim = 3;
    dims.word_dim = 3;
    dims.embed_dim = 3;
    dims.n_subsets = 2;
    dims.n_quant = 2;
    dims.vocab_size = 5;
    ModelParams p = init_params(dims, 9);
    CenterBank bank;
    bank.centers = Mat(2, 3);
    Gradients g = zero_gradients(p, bank);

    ModelParams before = p;
    AdamState s = init_adam(p);
    adam_step(s, p, g, 1e-3);
    for (auto [a, b] :
         {std::pair{p.w_img.data[0], before.w_img.data[0]},
          std::pair{p.b_txt[0], before.b_txt[0]}})
        CHECK(a == b);  // zero grads leave params untouched

    g.params.w_img.data[0] = 0.37;
    AdamState s2 = init_adam(p);
    double old0 = p.w_img.data[0];
    adam_step(s2, p, g, 1e-3);
    // first-step size ~ lr regardless of gradient scale
    CHECK(std::abs(p.w_img.data[0] - old0) ==
          doctest::Approx(1e-3).epsilon(1e-4));
}

TEST_CASE("sgd_center_step") {
    CenterBank bank;
    bank.centers = Mat(1, 2);
    bank.centers.set_row(0, {1.0, 0.0});
    Mat g(1, 2);
    g.set_row(0, {2.0, 0.0});
    sgd_center_step(bank, g, 0.5);
    CHECK(bank.centers.at(0, 0) == 0.0);
    CHECK(bank.centers.at(0, 1) == 0.0);

    Mat zero(1, 2);
    sgd_center_step(bank, zero, 0.5);
    CHECK(bank.centers.at(0, 0) == 0.0);

    Mat wrong(2, 2);
    CHECK_THROWS_AS(sgd_center_step(bank, wrong, 0.1), ShapeMismatchError);
}

TEST_CASE("lr_schedule") {
    CHECK(lr_schedule(0, 0.5, 0.1, 15) == doctest::Approx(0.5));
    CHECK(lr_schedule(14, 0.5, 0.1, 15) == doctest::Approx(0.5));
    CHECK(lr_schedule(15, 0.5, 0.1, 15) == doctest::Approx(0.05));
    CHECK(lr_schedule(30, 0.5, 0.1, 15) == doctest::Approx(0.005));
}

TEST_CASE("update_margins semantics") {
    MarginState s;
    s.m_x = 0.2;
    s.m_y = 0.2;
    s.window_batches = 10;
    s.acc_batches = 10;
    s.acc_count = 100;
    s.mult = 1.03;
    s.ratio_threshold = 0.8;

    s.acc_violations_x = 90;  // ratio 0.9 > 0.8
    s.acc_violations_y = 50;  // ratio 0.5, no change
    MarginState out = update_margins(s);
    CHECK(out.m_x == doctest::Approx(0.206).epsilon(1e-12));
    CHECK(out.m_y == 0.2);
    CHECK(out.acc_violations_x == 0);
    CHECK(out.acc_count == 0);
    CHECK(out.acc_batches == 0);

    // ratio exactly at the threshold does not fire (strict >)
    s.acc_violations_x = 80;
    out = update_margins(s);
    CHECK(out.m_x == 0.2);

    // mid-window call rejected
    s.acc_batches = 5;
    CHECK_THROWS_AS(update_margins(s), WindowIncompleteError);

    // inverted (prose) reading: fires when the separated ratio exceeds r
    s.acc_batches = 10;
    s.acc_violations_x = 10;  // violation ratio 0.1, separated 0.9 > 0.8
    out = update_margins(s, true);
    CHECK(out.m_x == doctest::Approx(0.206).epsilon(1e-12));
}

TEST_CASE("margins never decrease and compound by mult") {
    MarginState s;
    s.window_batches = 1;
    s.ratio_threshold = 0.0;  // always fires on any violation
    double m = 0.2;
    for (int k = 1; k <= 20; ++k) {
        s.acc_batches = 1;
        s.acc_count = 10;
        s.acc_violations_x = 10;
        s.acc_violations_y = 10;
        MarginState next = update_margins(s);
        CHECK(next.m_x >= s.m_x);
        s = next;
        m *= 1.03;
        CHECK(s.m_x == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("repulsion pushes two close quantized centers apart") {
    // Two centers closer than sqrt(2*delta); one SGD step on the batch loss
    // with no data terms must strictly increase their distance.
    ModelDims dims;
    dims.feat_dim = 2;
    dims.word_dim = 4;
    dims.embed_dim = 2;
    dims.n_subsets = 2;
    dims.n_quant = 2;
    dims.vocab_size = 10;
    ModelParams params = init_params(dims, 3);

    CenterBank bank;
    bank.quantized = true;
    bank.centers = Mat(2, 2);
    bank.centers.set_row(0, {0.10, 0.00});
    bank.centers.set_row(1, {0.00, 0.05});

    LossConfig cfg;
    cfg.delta = 0.1;  // 2*delta = 0.2 > dist^2 = 0.0125
    double before = sq_euclidean(bank.centers.row_vec(0),
                                 bank.centers.row_vec(1));
    CHECK(before < 2.0 * cfg.delta);

    // An empty batch leaves only the repulsion term in the loss.
    TripletBatch empty;
    Gradients g2;
    backward_total(params, bank, empty, cfg, -10.0, -10.0, true, g2);
    CenterBank stepped = bank;
    sgd_center_step(stepped, g2.centers, 0.01);
    double after = sq_euclidean(stepped.centers.row_vec(0),
                                stepped.centers.row_vec(1));
    CHECK(after > before);
}

TEST_CASE("phase-2 warmup keeps non-head parameters bit-identical") {
    SyntheticSpec spec;
    spec.n_concepts = 4;
    spec.subsets_per_concept = 3;
    spec.feat_dim = 6;
    spec.vocab_size = 40;
    spec.tokens_per_caption = 4;
    spec.captions_per_subset = 2;
    spec.seed = 5;
    SyntheticData data = synth_dataset(spec);

    PhasePlan plan;
    plan.phase1_epochs = 1;
    plan.phase2_epochs = 2;
    plan.freeze_warmup_epochs = 2;  // whole phase frozen
    plan.batch_size = 4;
    plan.n_quant = 3;
    LossConfig cfg;

    TrainConfig tc;
    tc.plan = plan;
    tc.loss = cfg;
    tc.embed_dim = 4;
    tc.word_dim = 8;
    tc.seed = 7;
    tc.plan.phase3_epochs = 0;
    tc.out_dir =
        (std::filesystem::temp_directory_path() / "jem_warmup").string();

    // run phase 1 only, snapshot, then phase 2 fully frozen
    TrainConfig tc1 = tc;
    tc1.plan.phase2_epochs = 0;
    TrainOutput phase1 = train(tc1, data.dataset);

    TrainState st = phase1.state;
    std::ostringstream metrics;
    run_phase(2, data.dataset, st, plan, cfg, tc.seed, metrics);
    CHECK(st.params.w_img.data == phase1.state.params.w_img.data);
    CHECK(st.params.e_tok.data == phase1.state.params.e_tok.data);
    CHECK(st.params.w_txt.data == phase1.state.params.w_txt.data);
    CHECK(st.params.w_ce_img.data == phase1.state.params.w_ce_img.data);
    CHECK(st.params.w_q.data != phase1.state.params.w_q.data);
    std::filesystem::remove_all(tc.out_dir);
}

TEST_CASE("phase ordering is enforced") {
    Fixture f = make_fixture(33, false);
    TrainState st;
    st.params = f.params;
    st.bank = f.bank;  // unquantized
    PhasePlan plan;
    plan.phase3_epochs = 1;
    LossConfig cfg;
    std::ostringstream metrics;
    CHECK_THROWS_AS(
        run_phase(3, f.data.dataset, st, plan, cfg, 1, metrics),
        PhaseOrderError);
}

TEST_CASE("phase-1 training decreases the loss on an easy toy set") {
    SyntheticSpec spec;
    spec.n_concepts = 2;
    spec.subsets_per_concept = 4;
    spec.feat_dim = 8;
    spec.vocab_size = 40;
    spec.tokens_per_caption = 4;
    spec.captions_per_subset = 2;
    spec.noise_sigma = 0.0;
    spec.seed = 3;
    SyntheticData data = synth_dataset(spec);

    TrainConfig tc;
    tc.plan.phase1_epochs = 8;
    tc.plan.phase2_epochs = 0;
    tc.plan.phase3_epochs = 0;
    tc.plan.batch_size = 4;
    tc.plan.lr_phase1 = 1e-3;
    tc.plan.n_quant = 2;
    tc.embed_dim = 8;
    tc.word_dim = 8;
    tc.seed = 11;
    tc.out_dir =
        (std::filesystem::temp_directory_path() / "jem_descent").string();
    TrainOutput out = train(tc, data.dataset);

    // Compare mean total loss of the first and last epochs (single rows are
    // too noisy: batch composition and negatives differ between steps).
    std::ifstream in(out.metrics_path);
    std::string line;
    std::getline(in, line);  // header
    std::map<long, std::pair<double, std::size_t>> per_epoch;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        long epoch = 0;
        double total = 0.0;
        for (int i = 0; i < 8; ++i) {
            std::getline(ss, cell, ',');
            if (i == 2) epoch = std::stol(cell);
            if (i == 7) total = std::stod(cell);
        }
        per_epoch[epoch].first += total;
        per_epoch[epoch].second += 1;
    }
    REQUIRE(per_epoch.size() >= 2);
    auto mean_of = [&](long e) {
        return per_epoch.at(e).first / double(per_epoch.at(e).second);
    };
    CHECK(mean_of(per_epoch.rbegin()->first) < mean_of(0));
    std::filesystem::remove_all(tc.out_dir);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
    SyntheticSpec spec;
    spec.n_concepts = 3;
    spec.subsets_per_concept = 3;
    spec.feat_dim = 6;
    spec.vocab_size = 30;
    spec.tokens_per_caption = 3;
    spec.captions_per_subset = 2;
    spec.seed = 6;
    SyntheticData data = synth_dataset(spec);

    TrainConfig tc;
    tc.plan.phase1_epochs = 2;
    tc.plan.phase2_epochs = 1;
    tc.plan.phase3_epochs = 1;
    tc.plan.batch_size = 4;
    tc.plan.n_quant = 3;
    tc.plan.freeze_warmup_epochs = 0;
    tc.embed_dim = 4;
    tc.word_dim = 6;
    tc.seed = 21;

    auto run = [&](const std::string& dir) {
        TrainConfig c = tc;
        c.out_dir = (std::filesystem::temp_directory_path() / dir).string();
        return train(c, data.dataset);
    };
    TrainOutput a = run("jem_det_a");
    TrainOutput b = run("jem_det_b");
    CHECK(a.state.params.w_img.data == b.state.params.w_img.data);
    CHECK(a.state.params.e_tok.data == b.state.params.e_tok.data);
    CHECK(a.state.bank.centers.data == b.state.bank.centers.data);
    CHECK(a.state.margins.m_x == b.state.margins.m_x);

    std::ifstream fa(a.metrics_path), fb(b.metrics_path);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
    std::filesystem::remove_all(
        std::filesystem::temp_directory_path() / "jem_det_a");
    std::filesystem::remove_all(
        std::filesystem::temp_directory_path() / "jem_det_b");
}

TEST_CASE("parse_train_config") {
    auto path =
        (std::filesystem::temp_directory_path() / "jem_cfg.txt").string();
    {
        std::ofstream out(path);
        out << "phase1_epochs=12\nlr_phase1=0.001\nbatch_size=16\n"
            << "n_quant=7\nsampling=hardest\ndelta=0.25\nseed=99\n"
            << "synthetic=1\nsynth_concepts=10\n";
    }
    TrainConfig cfg = parse_train_config(path);
    CHECK(cfg.plan.phase1_epochs == 12);
    CHECK(cfg.plan.lr_phase1 == doctest::Approx(0.001));
    CHECK(cfg.plan.batch_size == 16);
    CHECK(cfg.plan.n_quant == 7);
    CHECK(cfg.plan.sampling == SamplingMode::HardestInBatch);
    CHECK(cfg.loss.delta == doctest::Approx(0.25));
    CHECK(cfg.seed == 99);
    CHECK(cfg.synthetic);
    CHECK(cfg.synth_spec.n_concepts == 10);
    std::remove(path.c_str());
}
