#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "implab/network.hpp"
#include "implab/rng.hpp"
#include "implab/tensor.hpp"

namespace implab {

// A fully materialized task dataset. Images are standardized floats (not
// bytes); labels are optional (contrastive tasks ignore them).
struct Dataset {
  std::string name;
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  std::size_t n_classes = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;

  std::size_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
  void validate() const;  // label range, split disjointness and bounds
};

// Class-template synthetic generator: each class is a smooth random color
// pattern; samples are scaled/shifted/noised copies, so a linear probe on
// template correlations separates them by construction.
struct SynthSpec {
  std::size_t n = 1000;
  std::size_t n_classes = 10;
  std::size_t resolution = 8;
  std::size_t channels = 3;
  double train_fraction = 0.8;
  std::uint64_t template_seed = 7;
  std::uint64_t sample_seed = 1;
  bool domain_shift = false;  // fixed per-channel affine recolor, same classes
  double noise_sigma = 0.3;
  std::string name = "synth";
};

Dataset synth_dataset(const SynthSpec& spec);

// Per-class oracle feature: correlation of an image with each class
// template. Used to certify separability.
Tensor oracle_features(const Dataset& ds, const SynthSpec& spec);

struct AugPolicy {
  double crop_lo = 0.6;  // crop side fraction range
  double crop_hi = 1.0;
  double flip_prob = 0.5;
  double noise_sigma = 0.05;
  double channel_jitter = 0.10;  // per-channel gain in [1-j, 1+j]
  void validate() const;
};

// One independently augmented view per image; consumes rng in a fixed order.
Tensor augment(const Tensor& images, const AugPolicy& policy, Rng& rng);

enum class TaskKind { Supervised, NtXent, MomentumQueue };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::Supervised;
  Dataset dataset;
  double temperature = 0.5;     // ntxent default; momentum_queue uses 0.2
  std::size_t queue_size = 256;
  double momentum_coef = 0.99;
  AugPolicy aug;
  bool augment_supervised = false;
  std::size_t eval_pairs = 64;  // contrastive eval batch cap

  void validate(std::size_t batch_size) const;
};

// ---- file formats ---------------------------------------------------------

// IDX (big-endian header) image/label files; ubyte data is scaled to [0,1].
Tensor load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);
void save_idx_images(const Tensor& images, const std::string& path);
void save_idx_labels(const std::vector<int>& labels, const std::string& path);

// CSV rows `label,pix0,pix1,...` (single-channel square images).
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& ds, const std::string& path);

// JSON manifest naming the image/label files plus split seed/fraction.
Dataset load_manifest(const std::string& path);

// ---- losses and metrics ---------------------------------------------------

struct LossGrad {
  double loss;
  Tensor grad;  // d(loss)/d(logits)
};

// Mean softmax cross-entropy over the batch.
LossGrad supervised_loss(const Tensor& logits, const std::vector<int>& labels);

struct PairLossGrad {
  double loss;
  Tensor dz;   // d(loss)/dZ  (raw, pre-normalization embeddings)
  Tensor dzp;  // d(loss)/dZ'
};

// Normalized temperature-scaled cross entropy over paired views: for each of
// the 2n anchors the positive is its pair and the other 2n-2 embeddings are
// negatives; similarities are cosine (normalization applied internally).
PairLossGrad ntxent_loss(const Tensor& z, const Tensor& zp, double tau);

// Top-1 retrieval accuracy in percent: per anchor, candidates are all 2n-1
// other embeddings (both views); a hit means the nearest by cosine is the
// anchor's own pair. Symmetric over both views.
double top1_retrieval_accuracy(const Tensor& z, const Tensor& zp);

// FIFO store of L2-normalized key embeddings (oldest first).
struct EmbeddingQueue {
  std::size_t capacity = 256;
  std::vector<std::vector<double>> rows;
};

struct QueueStepResult {
  double loss;
  Grads grads;  // for the query encoder
};

// One contrastive step with a momentum key encoder: the key parameters are
// first blended toward the query parameters (k <- m*k + (1-m)*q, no
// gradient), keys are encoded in eval mode, the loss is cross-entropy over
// [own key, queue...] at temperature tau, and the new keys are enqueued.
// An underfilled queue simply contributes fewer negatives.
QueueStepResult momentum_queue_step(Model& encoder, Model& key_encoder,
                                    EmbeddingQueue& queue, const Mask& mask,
                                    const Tensor& query_view, const Tensor& key_view,
                                    double tau, double momentum_coef);

}  // namespace implab
