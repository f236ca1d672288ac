#include "attnprof/instrument/profile.hpp"

namespace attnprof {

CostBreakdown param_report(const EncoderModel& model) {
  CostBreakdown out;
  for (const Parameter* p : model.parameters()) out.at(p->tag).params += p->value.numel();
  return out;
}

}  // namespace attnprof
