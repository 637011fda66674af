#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "jem/core.hpp"

namespace jem {

using Tokens = std::vector<std::uint32_t>;

// One training unit: an image feature plus K semantically identical captions.
struct SubsetRecord {
    std::size_t subset_index = 0;
    Vec image_feat;
    std::vector<Tokens> captions;
};

struct Dataset {
    std::vector<SubsetRecord> records;
    std::size_t vocab_size = 0;
    std::size_t feat_dim = 0;
    std::size_t captions_per_subset = 0;  // K
    std::string split = "train";

    std::size_t size() const { return records.size(); }
};

struct SyntheticSpec {
    std::size_t n_concepts = 50;
    std::size_t subsets_per_concept = 20;
    std::size_t feat_dim = 32;
    std::size_t vocab_size = 500;
    std::size_t tokens_per_caption = 8;
    std::size_t captions_per_subset = 5;
    double noise_sigma = 0.1;
    std::uint64_t seed = 1;
};

struct SyntheticData {
    Dataset dataset;
    std::vector<std::size_t> concept_labels;  // one per subset
};

enum class SamplingMode { Random, HardestInBatch };

struct TripletBatch {
    std::vector<Vec> anchor_img_feats;
    std::vector<Tokens> pos_captions;
    std::vector<Tokens> neg_captions;
    std::vector<Vec> neg_img_feats;  // image side of the text-anchor triplets
    std::vector<std::size_t> subset_labels;
    std::vector<std::size_t> neg_subset_labels;

    std::size_t size() const { return anchor_img_feats.size(); }
};

struct BadMagicError : std::runtime_error {
    explicit BadMagicError(const std::string& m) : std::runtime_error(m) {}
};
struct TruncatedFileError : std::runtime_error {
    explicit TruncatedFileError(const std::string& m) : std::runtime_error(m) {}
};
struct NonFiniteValueError : std::runtime_error {
    explicit NonFiniteValueError(const std::string& m) : std::runtime_error(m) {}
};
struct TokenOutOfRangeError : std::runtime_error {
    explicit TokenOutOfRangeError(const std::string& m) : std::runtime_error(m) {}
};
struct MalformedLineError : std::runtime_error {
    explicit MalformedLineError(const std::string& m) : std::runtime_error(m) {}
};
struct UnevenKError : std::runtime_error {
    explicit UnevenKError(const std::string& m) : std::runtime_error(m) {}
};
struct SpecInvalidError : std::runtime_error {
    explicit SpecInvalidError(const std::string& m) : std::runtime_error(m) {}
};
struct BatchTooSmallError : std::runtime_error {
    explicit BatchTooSmallError(const std::string& m) : std::runtime_error(m) {}
};

// Binary feature file, magic "JEF1", u32 LE count/dim, float32 LE row-major.
Mat load_features(const std::string& path);
void write_features(const std::string& path, const Mat& m);

// TSV caption file: subset_index TAB space-separated token ids.
std::vector<std::pair<std::size_t, Tokens>> load_captions(
    const std::string& path, std::size_t vocab_size);
void write_captions(const std::string& path,
                    const std::vector<std::pair<std::size_t, Tokens>>& lines);

std::vector<std::string> load_vocab(const std::string& path);

struct Manifest {
    std::string features;
    std::string captions;
    std::string vocab;
    std::size_t captions_per_subset = 0;
    std::string split = "train";
};
Manifest load_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& m);

// Assembles a Dataset from manifest contents; enforces even K per subset.
Dataset load_dataset(const Manifest& manifest);

SyntheticData synth_dataset(const SyntheticSpec& spec);

// Writes features + captions + vocab + manifest + concept labels under dir.
void write_synthetic(const SyntheticData& data, const std::string& dir);

// Splits per concept so each concept appears on both sides; test takes the
// last test_per_concept subsets of each concept. Subset indices are
// re-numbered contiguously within each side.
std::pair<SyntheticData, SyntheticData> split_synthetic(
    const SyntheticData& data, std::size_t test_per_concept);

// Epoch-level sampler: anchors follow a seeded permutation, each subset
// appears exactly once per epoch.
class BatchSampler {
  public:
    BatchSampler(const Dataset& dataset, std::size_t batch_size,
                 std::uint64_t seed);

    // Returns false at epoch end. In hardest mode img_embs/cap_embs give the
    // current embeddings of every subset's image and captions (row per
    // subset image; cap_embs[n][k] = caption k of subset n).
    bool next_batch(TripletBatch& out, SamplingMode mode, std::mt19937_64& rng,
                    const Mat* img_embs = nullptr,
                    const std::vector<std::vector<Vec>>* cap_embs = nullptr);

    void start_epoch();

    // Subset ids of the next batch, before next_batch consumes them.
    std::vector<std::size_t> upcoming() const;

  private:
    const Dataset& dataset_;
    std::size_t batch_size_;
    std::mt19937_64 perm_rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace jem
