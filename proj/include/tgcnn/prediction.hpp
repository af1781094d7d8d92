#pragma once

#include <string>
#include <vector>

namespace tgcnn {

/// One scored patient. `probability` is sigmoid(linear_predictor) exactly.
struct Prediction {
  std::string patient_id;
  double probability = 0.5;
  double linear_predictor = 0.0;
  bool label = false;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

using Predictions = std::vector<Prediction>;

}  // namespace tgcnn
