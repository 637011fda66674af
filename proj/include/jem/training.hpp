#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "jem/core.hpp"
#include "jem/data.hpp"
#include "jem/losses.hpp"
#include "jem/model.hpp"

namespace jem {

struct ShapeMismatchError : std::runtime_error {
    explicit ShapeMismatchError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteGradientError : std::runtime_error {
    explicit NonFiniteGradientError(const std::string& m)
        : std::runtime_error(m) {}
};
struct NonFiniteLossError : std::runtime_error {
    explicit NonFiniteLossError(const std::string& m) : std::runtime_error(m) {}
};
struct WindowIncompleteError : std::runtime_error {
    explicit WindowIncompleteError(const std::string& m)
        : std::runtime_error(m) {}
};
struct PhaseOrderError : std::runtime_error {
    explicit PhaseOrderError(const std::string& m) : std::runtime_error(m) {}
};

// Gradient storage mirrors ModelParams shapes plus the center bank.
struct Gradients {
    ModelParams params;
    Mat centers;
};

Gradients zero_gradients(const ModelParams& params, const CenterBank& bank);

// Named views over every trainable tensor, in a fixed order shared by the
// optimizer, the checkpoint format and the gradient checker.
std::vector<std::pair<std::string, std::vector<double>*>> param_tensors(
    ModelParams& p);
std::vector<std::pair<std::string, const std::vector<double>*>> param_tensors(
    const ModelParams& p);

struct BatchResult {
    LossBreakdown loss;
    // Raw hinge arguments of the two triplet directions (for the
    // violation-ratio statistics the margin controller consumes).
    std::vector<double> img_triplet_args;
    std::vector<double> txt_triplet_args;
    // Activity flags of every hinge term; used to detect kink crossings in
    // finite-difference checks.
    std::vector<std::uint8_t> hinge_signature;
};

// Forward pass of the full training objective for one batch.
// quantized=false gives the phase-1 loss, true gives the phase-2/3 loss.
BatchResult forward_total(const ModelParams& params, const CenterBank& bank,
                          const TripletBatch& batch, const LossConfig& cfg,
                          double m_x, double m_y, bool quantized);

// Forward + analytic gradients of the same scalar.
BatchResult backward_total(const ModelParams& params, const CenterBank& bank,
                           const TripletBatch& batch, const LossConfig& cfg,
                           double m_x, double m_y, bool quantized,
                           Gradients& grads);

struct GradCheckEntry {
    std::string tensor;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

// Central finite differences on a random coordinate subsample per tensor.
// Coordinates whose perturbation flips a hinge are excluded and counted.
std::vector<GradCheckEntry> grad_check(const ModelParams& params,
                                       const CenterBank& bank,
                                       const TripletBatch& batch,
                                       const LossConfig& cfg, double m_x,
                                       double m_y, bool quantized, double h,
                                       std::uint64_t seed,
                                       std::size_t coords_per_tensor = 32);

struct AdamState {
    std::vector<std::vector<double>> m1;
    std::vector<std::vector<double>> m2;
    std::size_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState init_adam(const ModelParams& params);

// One Adam update over every tensor not named in `frozen`.
void adam_step(AdamState& state, ModelParams& params, const Gradients& grads,
               double lr, const std::vector<std::string>& frozen = {});

void sgd_center_step(CenterBank& bank, const Mat& center_grads, double lr);

double lr_schedule(std::size_t epoch, double base_lr, double decay_factor,
                   std::size_t every_epochs);

// Applies the multiply-if-ratio-exceeded rule at a window boundary and
// resets accumulators. invert_ratio switches to the separated-ratio reading.
MarginState update_margins(const MarginState& state, bool invert_ratio = false);

struct PhasePlan {
    std::size_t phase1_epochs = 30;
    std::size_t phase2_epochs = 15;
    std::size_t phase3_epochs = 10;
    double lr_phase1 = 2e-4;
    double lr_phase23 = 2e-5;
    double center_lr = 0.5;
    double lr_decay_factor = 0.1;
    std::size_t lr_decay_every = 15;
    std::size_t batch_size = 128;
    std::size_t freeze_warmup_epochs = 3;
    double warmup_lr = 1e-2;  // quantization-head rate during frozen warmup
    std::size_t n_quant = 50;
    std::size_t q_window = 500;
    double margin_mult = 1.03;
    double margin_ratio_r = 0.8;
    double margin_init = 0.2;
    bool invert_ratio = false;
    bool decay_center_only = false;
    SamplingMode sampling = SamplingMode::Random;
};

struct TrainConfig {
    PhasePlan plan;
    LossConfig loss;
    std::size_t embed_dim = 64;
    std::size_t word_dim = 300;
    std::uint64_t seed = 1;
    std::string train_manifest;
    std::string val_manifest;
    bool synthetic = false;
    SyntheticSpec synth_spec;
    std::size_t synth_test_per_concept = 4;
    std::string out_dir = "out";
};

TrainConfig parse_train_config(const std::string& path);

struct TrainState {
    ModelParams params;
    CenterBank bank;
    MarginState margins;
    std::size_t global_step = 0;
};

// One full training phase; appends one metrics CSV row per batch and, when
// ckpt_path is nonempty, rewrites the checkpoint after every epoch.
void run_phase(int phase_id, const Dataset& train, TrainState& state,
               const PhasePlan& plan, const LossConfig& loss_cfg,
               std::uint64_t seed, std::ostream& metrics,
               const std::string& ckpt_path = std::string());

struct TrainOutput {
    TrainState state;
    std::vector<std::string> checkpoint_paths;
    std::string metrics_path;
};

// Phases 1..3 in order; a phase with zero epochs is skipped (phase 2 with
// zero epochs still builds the k-means bank when phase 3 runs).
TrainOutput train(const TrainConfig& cfg, const Dataset& train_set);

void write_metrics_header(std::ostream& out);

}  // namespace jem
