#include "s2c/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace s2c {

template <RealScalar Scalar>
void LabeledImageSet<Scalar>::check() const {
  if (labels.empty()) throw DataError("image set is empty");
  check_image_layout(images.shape(), "image set");
  if (images.dim(0) != size()) throw DataError("image count does not match label count");
  for (int y : labels) {
    if (y < 0 || y >= classes) throw DataError("label " + std::to_string(y) + " out of range");
  }
  if (!images.values().allFinite()) throw DataError("image values are not finite");
}

template <RealScalar Scalar>
LabeledImageSet<Scalar> parse_cifar10_records(std::span<const unsigned char> bytes, const std::string& source) {
  if (bytes.empty() || bytes.size() % cifar_record_bytes != 0) {
    throw DataError(source + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                    std::to_string(cifar_record_bytes) + " (truncated CIFAR-10 batch)");
  }
  const auto n = static_cast<Index>(bytes.size() / cifar_record_bytes);
  LabeledImageSet<Scalar> set;
  set.images = Tensor<Scalar>({n, 3, 32, 32});
  set.labels.resize(static_cast<std::size_t>(n));
  const Scalar scale = Scalar(1) / Scalar(255);
  for (Index i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + static_cast<std::size_t>(i) * cifar_record_bytes;
    if (rec[0] > 9) {
      throw DataError(source + ": record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
    }
    set.labels[static_cast<std::size_t>(i)] = rec[0];
    Scalar* dst = set.images.data() + i * 3072;
    for (Index p = 0; p < 3072; ++p) dst[p] = static_cast<Scalar>(rec[1 + p]) * scale;
  }
  return set;
}

template <RealScalar Scalar>
LabeledImageSet<Scalar> load_cifar10_batchfile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 batch " + path.string());
  const std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(in), {});
  return parse_cifar10_records<Scalar>(bytes, path.string());
}

template <RealScalar Scalar>
LabeledImageSet<Scalar> concatenate(const std::vector<LabeledImageSet<Scalar>>& parts) {
  if (parts.empty()) throw DataError("nothing to concatenate");
  Index total = 0;
  for (const auto& p : parts) total += p.size();
  Shape shape = parts.front().images.shape();
  shape[0] = total;
  LabeledImageSet<Scalar> out;
  out.classes = parts.front().classes;
  out.images = Tensor<Scalar>(shape);
  const Index per = shape_product(shape) / total;
  Index at = 0;
  for (const auto& p : parts) {
    if (p.images.dim(1) != shape[1] || p.images.dim(2) != shape[2] || p.images.dim(3) != shape[3]) {
      throw DataError("cannot concatenate image sets of different geometry");
    }
    out.images.values().segment(at * per, p.size() * per) = p.images.values();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    at += p.size();
  }
  return out;
}

template <RealScalar Scalar>
LabeledImageSet<Scalar> load_cifar10_split(const std::filesystem::path& dir, bool train) {
  std::vector<LabeledImageSet<Scalar>> parts;
  if (train) {
    for (int i = 1; i <= 5; ++i) {
      parts.push_back(load_cifar10_batchfile<Scalar>(dir / ("data_batch_" + std::to_string(i) + ".bin")));
    }
  } else {
    parts.push_back(load_cifar10_batchfile<Scalar>(dir / "test_batch.bin"));
  }
  return parts.size() == 1 ? std::move(parts.front()) : concatenate(parts);
}

namespace {

std::vector<Index> permutation(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  SeededRng rng(seed);
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

}  // namespace

template <RealScalar Scalar>
LabeledImageSet<Scalar> take_subset(const LabeledImageSet<Scalar>& set, Index n, std::uint64_t seed) {
  if (n <= 0 || n >= set.size()) return set;
  auto idx = permutation(set.size(), seed);
  idx.resize(static_cast<std::size_t>(n));
  auto b = gather_batch(set, idx);
  return LabeledImageSet<Scalar>{std::move(b.images), std::move(b.labels), set.classes};
}

template <RealScalar Scalar>
NormalizationStats compute_normalization(const LabeledImageSet<Scalar>& set) {
  const auto m = channel_moments(set.images);
  NormalizationStats s;
  for (Index c = 0; c < m.mean.size(); ++c) {
    s.mean.push_back(static_cast<double>(m.mean[c]));
    s.stddev.push_back(std::sqrt(static_cast<double>(m.variance[c])));
  }
  return s;
}

template <RealScalar Scalar>
NormalizationStats normalize_images(LabeledImageSet<Scalar>& set, const std::optional<NormalizationStats>& stats) {
  const NormalizationStats s = stats ? *stats : compute_normalization(set);
  const Index channels = set.images.dim(1), plane = set.images.dim(2) * set.images.dim(3);
  if (static_cast<Index>(s.mean.size()) != channels || static_cast<Index>(s.stddev.size()) != channels) {
    throw DataError("normalization statistics do not match the channel count");
  }
  for (Index c = 0; c < channels; ++c) {
    if (!(s.stddev[static_cast<std::size_t>(c)] > 0)) {
      throw NumericError("channel " + std::to_string(c) + " has zero standard deviation; cannot normalize");
    }
  }
  for (Index n = 0; n < set.images.dim(0); ++n) {
    for (Index c = 0; c < channels; ++c) {
      const double mu = s.mean[static_cast<std::size_t>(c)];
      const double inv = 1.0 / s.stddev[static_cast<std::size_t>(c)];
      Scalar* p = set.images.data() + (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) p[i] = static_cast<Scalar>((p[i] - mu) * inv);
    }
  }
  return s;
}

template <RealScalar Scalar>
void denormalize_images(LabeledImageSet<Scalar>& set, const NormalizationStats& stats) {
  const Index channels = set.images.dim(1), plane = set.images.dim(2) * set.images.dim(3);
  for (Index n = 0; n < set.images.dim(0); ++n) {
    for (Index c = 0; c < channels; ++c) {
      Scalar* p = set.images.data() + (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        p[i] = static_cast<Scalar>(p[i] * stats.stddev[static_cast<std::size_t>(c)] + stats.mean[static_cast<std::size_t>(c)]);
      }
    }
  }
}

std::vector<std::vector<Index>> batch_indices(Index n, const BatchPlan& plan, std::uint64_t epoch) {
  if (plan.batch_size < 1) throw ConfigError("batch size must be >= 1");
  const auto order = permutation(n, derive_seed(plan.seed, epoch));
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n; start += plan.batch_size) {
    const Index end = std::min(n, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

template <RealScalar Scalar>
Batch<Scalar> gather_batch(const LabeledImageSet<Scalar>& set, std::span<const Index> indices) {
  Shape shape = set.images.shape();
  shape[0] = static_cast<Index>(indices.size());
  const Index per = set.images.dim(1) * set.images.dim(2) * set.images.dim(3);
  Batch<Scalar> b{Tensor<Scalar>(shape), {}};
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index src = indices[i];
    b.images.values().segment(static_cast<Index>(i) * per, per) = set.images.values().segment(src * per, per);
    b.labels.push_back(set.labels[static_cast<std::size_t>(src)]);
  }
  return b;
}

template <RealScalar Scalar>
std::vector<Batch<Scalar>> make_minibatches(const LabeledImageSet<Scalar>& set, const BatchPlan& plan,
                                            std::uint64_t epoch) {
  std::vector<Batch<Scalar>> out;
  for (const auto& idx : batch_indices(set.size(), plan, epoch)) out.push_back(gather_batch(set, idx));
  return out;
}

template <RealScalar Scalar>
void augment_batch(Batch<Scalar>& batch, SeededRng& rng) {
  constexpr Index pad = 4;
  auto& t = batch.images;
  const Index channels = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor<Scalar> src = t;
  for (Index n = 0; n < t.dim(0); ++n) {
    const bool flip = rng.below(2) == 1;
    const Index dy = static_cast<Index>(rng.below(2 * pad + 1)) - pad;
    const Index dx = static_cast<Index>(rng.below(2 * pad + 1)) - pad;
    for (Index c = 0; c < channels; ++c) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const Index sy = y + dy;
          const Index sx0 = x + dx;
          const Index sx = flip ? w - 1 - sx0 : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          t(n, c, y, x) = inside ? src(n, c, sy, sx) : Scalar(0);
        }
      }
    }
  }
}

namespace {

template <RealScalar Scalar>
LabeledImageSet<Scalar> draw_samples(const std::vector<Tensor<Scalar>>& patterns, Index per_class, double noise,
                                     Index size, SeededRng& rng) {
  const auto classes = static_cast<Index>(patterns.size());
  const Index n = classes * per_class;
  const Index per = 3 * size * size;
  LabeledImageSet<Scalar> set;
  set.classes = classes;
  set.images = Tensor<Scalar>({n, 3, size, size});
  for (Index i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % classes);
    set.labels.push_back(y);
    Scalar* dst = set.images.data() + i * per;
    const Scalar* mean = patterns[static_cast<std::size_t>(y)].data();
    for (Index p = 0; p < per; ++p) {
      dst[p] = mean[p] + (noise > 0 ? static_cast<Scalar>(noise * rng.normal()) : Scalar(0));
    }
  }
  return set;
}

template <RealScalar Scalar>
std::vector<Tensor<Scalar>> class_patterns(const SyntheticSpec& spec, SeededRng& rng) {
  if (spec.classes < 2) throw ConfigError("synthetic dataset needs at least two classes");
  if (spec.per_class < 1 || spec.size < 1 || spec.noise < 0) throw ConfigError("invalid synthetic dataset spec");
  std::vector<Tensor<Scalar>> patterns;
  for (Index k = 0; k < spec.classes; ++k) {
    patterns.push_back(Tensor<Scalar>::normal({3, spec.size, spec.size}, Scalar(0), Scalar(1), rng));
  }
  return patterns;
}

}  // namespace

template <RealScalar Scalar>
LabeledImageSet<Scalar> synth_dataset_generate(const SyntheticSpec& spec, SeededRng& rng) {
  const auto patterns = class_patterns<Scalar>(spec, rng);
  return draw_samples(patterns, spec.per_class, spec.noise, spec.size, rng);
}

template <RealScalar Scalar>
std::pair<LabeledImageSet<Scalar>, LabeledImageSet<Scalar>> synth_train_test(const SyntheticSpec& spec,
                                                                              Index test_per_class, SeededRng& rng) {
  const auto patterns = class_patterns<Scalar>(spec, rng);
  auto train = draw_samples(patterns, spec.per_class, spec.noise, spec.size, rng);
  auto test = draw_samples(patterns, std::max<Index>(1, test_per_class), spec.noise, spec.size, rng);
  return {std::move(train), std::move(test)};
}

#define S2C_INSTANTIATE_DATA(S)                                                                                     \
  template struct LabeledImageSet<S>;                                                                               \
  template LabeledImageSet<S> parse_cifar10_records(std::span<const unsigned char>, const std::string&);           \
  template LabeledImageSet<S> load_cifar10_batchfile(const std::filesystem::path&);                                 \
  template LabeledImageSet<S> load_cifar10_split(const std::filesystem::path&, bool);                               \
  template LabeledImageSet<S> concatenate(const std::vector<LabeledImageSet<S>>&);                                  \
  template LabeledImageSet<S> take_subset(const LabeledImageSet<S>&, Index, std::uint64_t);                         \
  template NormalizationStats compute_normalization(const LabeledImageSet<S>&);                                     \
  template NormalizationStats normalize_images(LabeledImageSet<S>&, const std::optional<NormalizationStats>&);      \
  template void denormalize_images(LabeledImageSet<S>&, const NormalizationStats&);                                 \
  template Batch<S> gather_batch(const LabeledImageSet<S>&, std::span<const Index>);                                \
  template std::vector<Batch<S>> make_minibatches(const LabeledImageSet<S>&, const BatchPlan&, std::uint64_t);      \
  template void augment_batch(Batch<S>&, SeededRng&);                                                               \
  template LabeledImageSet<S> synth_dataset_generate(const SyntheticSpec&, SeededRng&);                             \
  template std::pair<LabeledImageSet<S>, LabeledImageSet<S>> synth_train_test(const SyntheticSpec&, Index, SeededRng&);

S2C_INSTANTIATE_DATA(float)
S2C_INSTANTIATE_DATA(double)

#undef S2C_INSTANTIATE_DATA

}  // namespace s2c
