#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>

#include "cpes/numerics.hpp"
#include "cpes/selection.hpp"

namespace cpes {

// S(i, j) = cos(query row i, prototype row j)^2; rows = query, cols = prototype.
Mat64 score_matrix(const FusedRepresentation& query, const FusedRepresentation& proto);

// Trainable tensors of the scorer. Also used for gradients and optimizer moments.
struct HeadParams {
  Mat64 w1;  // hidden x input
  Vec64 b1;  // hidden
  Vec64 w2;  // hidden
  double b2 = 0.0;

  static HeadParams zeros(std::size_t input_dim, std::size_t hidden);
  bool all_finite() const;
  void scale(double factor);
  void add(const HeadParams& other);
  bool operator==(const HeadParams&) const = default;
};

/// One-hidden-layer perceptron over the flattened score matrix:
/// score = w2 . relu(W1 * flat(S) + b1) + b2. Optimizer state rides along
/// so checkpoints resume exactly.
struct MlpHead {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  HeadParams params;
  HeadParams first_moment;
  HeadParams second_moment;
  std::uint64_t step = 0;

  bool operator==(const MlpHead&) const = default;
};

inline constexpr std::size_t kDefaultHidden = 64;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for each layer, zero moments.
MlpHead init_head(std::size_t input_dim, std::size_t hidden, std::uint64_t seed);

// Input width for selections of m patches (m = 0 still yields one row).
std::size_t head_input_dim(std::size_t m);

double mlp_forward(const MlpHead& head, const Mat64& scores);

// Raw (pre-softmax) score of the query against each prototype.
Vec64 class_scores(const MlpHead& head, const FusedRepresentation& query,
                   std::span<const FusedRepresentation> protos);

struct LossAndGrads {
  double loss = 0.0;
  Vec64 probs;
  HeadParams grads;
};

// Cross-entropy of softmax(class_scores) against `target`, with analytic
// gradients for every head parameter. relu'(0) is taken as 0.
LossAndGrads episode_loss_and_grads(const MlpHead& head, const FusedRepresentation& query,
                                    std::span<const FusedRepresentation> protos,
                                    std::size_t target);

// Same, accumulating gradients into `grads` (which must be shaped like the
// head); returns the loss and fills `probs`.
double accumulate_loss_and_grads(const MlpHead& head, const FusedRepresentation& query,
                                 std::span<const FusedRepresentation> protos, std::size_t target,
                                 HeadParams& grads, Vec64& probs);

enum class LrSchedule { Constant, Cosine };

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule = LrSchedule::Cosine;
  double floor_lr = 1e-6;
  std::uint64_t total_steps = 1;
};

void validate(const OptimizerConfig& cfg);

// Learning rate used by the update that moves the step counter from t to t+1.
double learning_rate_at(const OptimizerConfig& cfg, std::uint64_t t);

// AdamW with decoupled weight decay. Throws NonFiniteGradient.
void optimizer_step(MlpHead& head, const HeadParams& grads, const OptimizerConfig& cfg);

// CPEH checkpoint: little-endian, f64 payload, exact round trip.
inline constexpr char kHeadMagic[4] = {'C', 'P', 'E', 'H'};
inline constexpr std::uint16_t kHeadVersion = 1;

std::uint64_t write_head(const MlpHead& head, std::ostream& out);
MlpHead read_head(std::istream& in);
std::uint64_t write_head_file(const MlpHead& head, const std::filesystem::path& path);
MlpHead read_head_file(const std::filesystem::path& path);

}  // namespace cpes
