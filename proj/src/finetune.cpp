#include "texbridge/finetune.hpp"

#include <sstream>

namespace texbridge {

std::string loss_csv_row(int64_t step, const LossBreakdown& b) {
  std::ostringstream os;
  os.precision(10);
  os << step << ',' << b.adv_g << ',' << b.adv_d << ',' << b.r1 << ',' << b.percp << ','
     << b.faceid << ',' << b.percp_recons << ',' << b.total;
  return os.str();
}

}  // namespace texbridge
