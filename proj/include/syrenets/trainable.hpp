#pragma once

#include "syrenets/mechanics.hpp"
#include "syrenets/objective.hpp"
#include "syrenets/params.hpp"
#include "syrenets/tape.hpp"

#include <span>
#include <string>
#include <vector>

namespace syrenets {

// What the training loop needs from a model: its flat parameters, a recorded
// total loss for a batch, and no-grad predictions for evaluation.
class TrainableModel {
public:
    virtual ~TrainableModel() = default;
    virtual std::string kind() const = 0;
    virtual ParamStore& param_store() = 0;
    virtual LossIds build_loss(Tape& t, std::span<const StateSample> batch,
                               const LossConfig& cfg) = 0;
    // direct: one prediction per sample; indirect: n_joints torques per sample.
    virtual void predict(std::span<const StateSample> batch, LearnMode mode,
                         std::vector<double>& out) = 0;
};

} // namespace syrenets
