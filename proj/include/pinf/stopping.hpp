/*
 * Copyright 2026 The pinf Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <cmath>
#include <limits>

#include "pinf/error.hpp"

namespace pinf {

struct EarlyStopConfig {
  double rel_tolerance = 0.01;
  std::size_t patience = 3;

  void validate() const {
    if (!(rel_tolerance >= 0)) throw ConfigError("early stop: rel_tolerance must be >= 0");
    if (patience < 1) throw ConfigError("early stop: patience must be >= 1");
  }
};

// Tolerance-based stopping on a metric to maximize. An observation counts as
// improving only if it exceeds the best value so far by more than
// rel_tolerance (relative); `patience` consecutive non-improving observations
// stop the run. The best value tracks the running maximum either way.
class EarlyStopping {
 public:
  EarlyStopping() = default;
  explicit EarlyStopping(EarlyStopConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // Returns true when the run should stop after this observation.
  bool observe(double metric) {
    if (!seen_) {
      seen_ = true;
      best_ = metric;
      strikes_ = 0;
      return false;
    }
    if (metric > best_ + cfg_.rel_tolerance * std::abs(best_)) {
      strikes_ = 0;
    } else {
      ++strikes_;
    }
    if (metric > best_) best_ = metric;
    return should_stop();
  }

  bool should_stop() const { return strikes_ >= cfg_.patience; }
  double best() const { return best_; }
  std::size_t strikes() const { return strikes_; }
  bool seen() const { return seen_; }
  const EarlyStopConfig& config() const { return cfg_; }

  // Restores a previously saved position (checkpoint resume).
  void restore(bool seen, double best, std::size_t strikes) {
    seen_ = seen;
    best_ = best;
    strikes_ = strikes;
  }

 private:
  EarlyStopConfig cfg_;
  bool seen_ = false;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t strikes_ = 0;
};

}  // namespace pinf
