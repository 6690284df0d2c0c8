#include "texbridge/inversion.hpp"

#include "json.hpp"

namespace texbridge {

InvertedSet inverted_set_from_checkpoint(const Checkpoint& ck) {
  nlohmann::json extra = nlohmann::json::parse(ck.extra_json);
  InvertedSet set;
  set.source_manifest_hash = extra.value("source_manifest", "");
  const auto& ids = extra.at("ids");
  const auto& losses = extra.at("final_loss");
  const auto& psnrs = extra.at("masked_psnr");
  for (size_t i = 0; i < ids.size(); ++i) {
    InvertedEntry e;
    e.identity_id = ids[i];
    e.final_loss = losses[i];
    e.masked_psnr = psnrs[i];
    e.w_plus = ck.array("w/" + std::to_string(e.identity_id));
    set.entries.push_back(std::move(e));
  }
  return set;
}

}  // namespace texbridge
