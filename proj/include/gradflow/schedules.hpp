#pragma once

// Temperature schedules beta_s over fine-tuning steps. Every kind cools
// monotonically from beta_max toward beta_min; the inverse-sigmoid shape
// holds near beta_max early, crosses the midpoint at step m * S, and
// flattens near beta_min late.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradflow {

enum class ScheduleKind { constant, linear, exponential, inverse_sigmoid };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::exponential: return "exponential";
    case ScheduleKind::inverse_sigmoid: return "inverse_sigmoid";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "linear") return ScheduleKind::linear;
  if (name == "exponential") return ScheduleKind::exponential;
  if (name == "inverse_sigmoid") return ScheduleKind::inverse_sigmoid;
  throw std::invalid_argument("unknown schedule kind: " + name);
}

struct CoolingSchedule {
  ScheduleKind kind = ScheduleKind::inverse_sigmoid;
  double beta_max = 10.0;
  double beta_min = 0.0;
  long total_steps = 1;
  double sharpness = 10.0;  // sigmoid steepness k
  double midpoint = 0.5;    // sigmoid crossing m, as a fraction of steps

  void validate() const {
    if (beta_min < 0.0) throw std::invalid_argument("schedule: beta_min < 0");
    if (beta_min > beta_max)
      throw std::invalid_argument("schedule: beta_min > beta_max");
    if (total_steps < 1)
      throw std::invalid_argument("schedule: total_steps < 1");
    if (kind == ScheduleKind::inverse_sigmoid) {
      if (!(sharpness > 0.0))
        throw std::invalid_argument("schedule: sharpness must be positive");
      if (!(midpoint > 0.0 && midpoint < 1.0))
        throw std::invalid_argument("schedule: midpoint outside (0,1)");
    }
  }
};

// Temperature at an optimizer step in [0, total_steps].
inline double beta_at(const CoolingSchedule& schedule, long step) {
  schedule.validate();
  if (step < 0 || step > schedule.total_steps)
    throw std::out_of_range("beta_at: step outside [0, total_steps]");
  const double f =
      static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  const double range = schedule.beta_max - schedule.beta_min;
  switch (schedule.kind) {
    case ScheduleKind::constant:
      return schedule.beta_max;
    case ScheduleKind::linear:
      return schedule.beta_max - range * f;
    case ScheduleKind::exponential: {
      // Normalized shifted decay: hits beta_max at f=0 and beta_min at f=1
      // exactly, even when beta_min is 0. Fixed rate 5 gives roughly a
      // 150x steeper start than finish.
      constexpr double rate = 5.0;
      const double shape = (std::exp(-rate * f) - std::exp(-rate)) /
                           (1.0 - std::exp(-rate));
      return schedule.beta_min + range * shape;
    }
    case ScheduleKind::inverse_sigmoid:
      return schedule.beta_min +
             range / (1.0 + std::exp(schedule.sharpness * (f - schedule.midpoint)));
  }
  throw std::invalid_argument("beta_at: bad kind");
}

// Copies of the base schedule differing only in beta_min, sorted ascending.
inline std::vector<CoolingSchedule> sweep_schedules(
    const CoolingSchedule& base, std::vector<double> beta_mins) {
  if (beta_mins.empty())
    throw std::invalid_argument("sweep_schedules: empty beta_min list");
  std::sort(beta_mins.begin(), beta_mins.end());
  std::vector<CoolingSchedule> out;
  out.reserve(beta_mins.size());
  for (double bm : beta_mins) {
    if (bm > base.beta_max)
      throw std::invalid_argument("sweep_schedules: beta_min > beta_max");
    CoolingSchedule s = base;
    s.beta_min = bm;
    s.validate();
    out.push_back(s);
  }
  return out;
}

}  // namespace gradflow
