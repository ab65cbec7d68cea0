#pragma once

#include <cstddef>
#include <string>

namespace suite {

struct Outcome {
  bool pass = false;
  std::string detail;
};

/// E=1, reduction 1, gamma 0 against the dense model on `inputs` batches.
Outcome dense_equivalence(std::size_t inputs, double tolerance);
/// Library selection vs the transcription oracle, exact indices and values.
Outcome algorithm1_against_oracle(std::size_t instances);
/// Merge sequences vs the brute-force oracle for every n in [2, 8] per seed.
Outcome ward_against_oracle(std::size_t seeds);

Outcome pixel_coherence(std::size_t configs);
Outcome gate_normalization(std::size_t configs, double tolerance);
Outcome rescaling_invariance(std::size_t configs);
Outcome permutation_equivariance(std::size_t configs);

/// Uniform similarities through the figure-d parameters at E=16 and E=64.
Outcome figure_d_arithmetic();

}  // namespace suite
