#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "s2c/tensor.hpp"

namespace s2c {

template <RealScalar Scalar>
struct LabeledImageSet {
  Tensor<Scalar> images;  // N x 3 x H x W
  std::vector<int> labels;
  Index classes = 10;

  Index size() const { return static_cast<Index>(labels.size()); }
  void check() const;
};

// CIFAR-10 binary batch: records of 3073 bytes, one label byte followed by
// 3 x 1024 pixel bytes (R, G, B planes, row-major). Pixels are scaled to [0, 1].
inline constexpr std::size_t cifar_record_bytes = 3073;

template <RealScalar Scalar>
LabeledImageSet<Scalar> load_cifar10_batchfile(const std::filesystem::path& path);

template <RealScalar Scalar>
LabeledImageSet<Scalar> parse_cifar10_records(std::span<const unsigned char> bytes, const std::string& source);

// data_batch_1..5.bin for the training split, test_batch.bin for the test split.
template <RealScalar Scalar>
LabeledImageSet<Scalar> load_cifar10_split(const std::filesystem::path& dir, bool train);

template <RealScalar Scalar>
LabeledImageSet<Scalar> concatenate(const std::vector<LabeledImageSet<Scalar>>& parts);

// First n images of a seeded permutation of the set.
template <RealScalar Scalar>
LabeledImageSet<Scalar> take_subset(const LabeledImageSet<Scalar>& set, Index n, std::uint64_t seed);

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population standard deviation
};

template <RealScalar Scalar>
NormalizationStats compute_normalization(const LabeledImageSet<Scalar>& set);

// x = (x - mean_c) / std_c in place. Computes the statistics from `set` when
// none are given and returns the statistics used.
template <RealScalar Scalar>
NormalizationStats normalize_images(LabeledImageSet<Scalar>& set, const std::optional<NormalizationStats>& stats = {});

template <RealScalar Scalar>
void denormalize_images(LabeledImageSet<Scalar>& set, const NormalizationStats& stats);

struct BatchPlan {
  Index batch_size = 128;
  std::uint64_t seed = 0;
  bool drop_last = true;
};

template <RealScalar Scalar>
struct Batch {
  Tensor<Scalar> images;
  std::vector<int> labels;
};

// Index order for one epoch: a Fisher-Yates permutation seeded by (seed, epoch).
std::vector<std::vector<Index>> batch_indices(Index n, const BatchPlan& plan, std::uint64_t epoch);

template <RealScalar Scalar>
Batch<Scalar> gather_batch(const LabeledImageSet<Scalar>& set, std::span<const Index> indices);

template <RealScalar Scalar>
std::vector<Batch<Scalar>> make_minibatches(const LabeledImageSet<Scalar>& set, const BatchPlan& plan,
                                            std::uint64_t epoch);

// Random horizontal flip plus zero-pad-by-4 random crop, in place.
template <RealScalar Scalar>
void augment_batch(Batch<Scalar>& batch, SeededRng& rng);

struct SyntheticSpec {
  Index classes = 2;
  Index per_class = 64;
  Index size = 8;
  double noise = 0.0;
};

// Each class has a fixed standard-normal mean pattern; samples add noise * N(0, 1).
// Labels cycle 0, 1, ..., k-1 so every class appears exactly per_class times.
template <RealScalar Scalar>
LabeledImageSet<Scalar> synth_dataset_generate(const SyntheticSpec& spec, SeededRng& rng);

// Same class patterns as synth_dataset_generate for the same rng state, with
// fresh noise for a held-out split.
template <RealScalar Scalar>
std::pair<LabeledImageSet<Scalar>, LabeledImageSet<Scalar>> synth_train_test(const SyntheticSpec& spec,
                                                                              Index test_per_class, SeededRng& rng);

}  // namespace s2c
