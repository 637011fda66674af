// Command-line driver: synthetic data generation, training, retrieval
// evaluation, gradient checking and standalone k-means initialization.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <random>

#include "jem/data.hpp"
#include "jem/eval.hpp"
#include "jem/model.hpp"
#include "jem/training.hpp"

namespace {

using namespace jem;

Dataset dataset_for_training(const TrainConfig& cfg, Dataset* val_out) {
    if (cfg.synthetic || cfg.train_manifest.empty()) {
        SyntheticData data = synth_dataset(cfg.synth_spec);
        auto [train, test] = split_synthetic(data, cfg.synth_test_per_concept);
        if (val_out) *val_out = test.dataset;
        return train.dataset;
    }
    if (val_out && !cfg.val_manifest.empty())
        *val_out = load_dataset(load_manifest(cfg.val_manifest));
    return load_dataset(load_manifest(cfg.train_manifest));
}

int cmd_train(const std::string& config_path, std::int64_t seed_override,
              const std::string& out_override) {
    TrainConfig cfg = parse_train_config(config_path);
    if (seed_override >= 0) cfg.seed = std::uint64_t(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;

    Dataset val;
    Dataset train_set = dataset_for_training(cfg, &val);
    std::cout << "training on " << train_set.size() << " subsets ("
              << train_set.captions_per_subset << " captions each)\n";

    TrainOutput out = train(cfg, train_set);
    std::cout << "wrote " << out.metrics_path << '\n';
    for (const auto& p : out.checkpoint_paths) std::cout << "wrote " << p << '\n';

    if (!val.records.empty()) {
        auto [ann, srch] =
            evaluate_retrieval(out.state.params, val, {1, 5, 10});
        print_report(std::cout, ann, srch);
        write_report_csv(
            (std::filesystem::path(cfg.out_dir) / "retrieval.csv").string(),
            ann, srch);
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest_path,
             const std::string& ks_str, const std::string& out_csv) {
    ModelParams params;
    CenterBank bank;
    MarginState margins;
    load_checkpoint(ckpt, params, bank, margins);
    Dataset test = load_dataset(load_manifest(manifest_path));
    if (test.feat_dim != params.dims.feat_dim)
        throw DimMismatchError("checkpoint feature dim " +
                               std::to_string(params.dims.feat_dim) +
                               " != manifest feature dim " +
                               std::to_string(test.feat_dim));
    std::vector<std::size_t> ks;
    std::stringstream ss(ks_str);
    std::string item;
    while (std::getline(ss, item, ',')) ks.push_back(std::stoull(item));

    auto [ann, srch] = evaluate_retrieval(params, test, ks);
    print_report(std::cout, ann, srch);
    if (!out_csv.empty()) write_report_csv(out_csv, ann, srch);
    return 0;
}

// Builds a small random model and batch for the requested phase loss.
int cmd_gradcheck(std::uint64_t seed, int phase, bool corrupt) {
    SyntheticSpec spec;
    spec.n_concepts = 3;
    spec.subsets_per_concept = 2;
    spec.feat_dim = 6;
    spec.vocab_size = 40;
    spec.tokens_per_caption = 4;
    spec.captions_per_subset = 2;
    spec.noise_sigma = 0.2;
    spec.seed = seed;
    SyntheticData data = synth_dataset(spec);

    ModelDims dims;
    dims.feat_dim = spec.feat_dim;
    dims.word_dim = 8;
    dims.embed_dim = 4;
    dims.n_subsets = data.dataset.size();
    dims.n_quant = 2;
    dims.vocab_size = spec.vocab_size;
    ModelParams params = init_params(dims, seed);

    CenterBank bank;
    bool quantized = phase >= 2;
    std::mt19937_64 rng(seed + 17);
    std::normal_distribution<double> gauss(0.0, 0.5);
    bank.quantized = quantized;
    bank.centers = Mat(quantized ? dims.n_quant : dims.n_subsets,
                       dims.embed_dim);
    for (double& x : bank.centers.data) x = gauss(rng);

    BatchSampler sampler(data.dataset, 4, seed + 3);
    TripletBatch batch;
    sampler.next_batch(batch, SamplingMode::Random, rng);

    LossConfig cfg;
    auto report = grad_check(params, bank, batch, cfg, 0.2, 0.2, quantized,
                             1e-6, seed + 7);
    bool ok = true;
    for (auto& e : report) {
        double err = corrupt ? e.max_rel_err + 1.0 : e.max_rel_err;
        std::cout << e.tensor << ": max_rel_err=" << err
                  << " checked=" << e.checked
                  << " kinks_skipped=" << e.skipped_kinks << '\n';
        if (e.checked > 0 && err > 1e-4) ok = false;
    }
    std::cout << (ok ? "gradcheck OK" : "gradcheck FAILED") << '\n';
    return ok ? 0 : 2;
}

int cmd_synth(const SyntheticSpec& spec, const std::string& out_dir) {
    SyntheticData data = synth_dataset(spec);
    write_synthetic(data, out_dir);
    std::cout << "wrote " << data.dataset.size() << " subsets to " << out_dir
              << '\n';
    return 0;
}

int cmd_kmeans_init(const std::string& ckpt, std::size_t n_quant,
                    std::uint64_t seed, const std::string& out_ckpt) {
    ModelParams params;
    CenterBank bank;
    MarginState margins;
    load_checkpoint(ckpt, params, bank, margins);
    if (bank.quantized)
        throw PhaseOrderError("checkpoint already holds a quantized bank");
    CenterBank qbank = kmeans_init(bank.centers, n_quant, seed);
    save_checkpoint(out_ckpt, params, qbank, margins);
    std::cout << "quantized " << bank.centers.rows << " centers to " << n_quant
              << ", wrote " << out_ckpt << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint image-text embedding trainer"};
    app.require_subcommand(1);

    std::string config_path, ckpt, manifest, out_dir = "out", out_csv;
    std::string ks = "1,5,10";
    std::int64_t seed_override = -1;
    std::uint64_t seed = 1;
    int phase = 1;
    bool corrupt = false;
    std::size_t n_quant = 50;
    jem::SyntheticSpec spec;

    auto* train = app.add_subcommand("train", "run the training protocol");
    train->add_option("--config", config_path, "key=value config file")
        ->required();
    train->add_option("--seed", seed_override, "override config seed");
    train->add_option("--out", out_dir, "override output directory")
        ->default_str("");

    auto* eval = app.add_subcommand("eval", "evaluate retrieval R@K");
    eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval->add_option("--manifest", manifest, "dataset manifest")->required();
    eval->add_option("--ks", ks, "comma-separated K values");
    eval->add_option("--out", out_csv, "report CSV path");

    auto* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--seed", seed, "rng seed");
    gradcheck->add_option("--phase", phase, "loss configuration: 1, 2 or 3")
        ->check(CLI::Range(1, 3));
    gradcheck->add_flag("--corrupt", corrupt,
                        "negative control: report corrupted errors");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--concepts", spec.n_concepts, "number of concepts");
    synth->add_option("--subsets-per-concept", spec.subsets_per_concept, "");
    synth->add_option("--feat-dim", spec.feat_dim, "");
    synth->add_option("--vocab", spec.vocab_size, "");
    synth->add_option("--tokens-per-caption", spec.tokens_per_caption, "");
    synth->add_option("--k", spec.captions_per_subset, "captions per subset");
    synth->add_option("--noise", spec.noise_sigma, "");
    synth->add_option("--seed", spec.seed, "");
    synth->add_option("--out", out_dir, "output directory")->required();

    auto* km = app.add_subcommand(
        "kmeans-init", "quantize a phase-1 checkpoint's center bank");
    km->add_option("--ckpt", ckpt, "phase-1 checkpoint")->required();
    km->add_option("--n-quant", n_quant, "number of quantized centers");
    km->add_option("--seed", seed, "rng seed");
    km->add_option("--out", out_csv, "output checkpoint path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed())
            return cmd_train(config_path,
                             train->count("--seed") ? seed_override : -1,
                             train->count("--out") ? out_dir : "");
        if (eval->parsed()) return cmd_eval(ckpt, manifest, ks, out_csv);
        if (gradcheck->parsed()) return cmd_gradcheck(seed, phase, corrupt);
        if (synth->parsed()) return cmd_synth(spec, out_dir);
        if (km->parsed()) return cmd_kmeans_init(ckpt, n_quant, seed, out_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
