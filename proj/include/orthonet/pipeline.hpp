#pragma once

#include <string>
#include <utility>
#include <vector>

#include "orthonet/config.hpp"
#include "orthonet/dataset.hpp"
#include "orthonet/defenses.hpp"
#include "orthonet/eval.hpp"
#include "orthonet/model.hpp"
#include "orthonet/ortho.hpp"

namespace orthonet {

// Glue from a Config to the library types. Every function reads the
// registered defaults for keys the config does not set.

// The configured dataset split into (train, val): the last
// round(n * dataset.val_fraction) examples are validation.
std::pair<Dataset, Dataset> load_datasets(const Config& cfg);

// "mlp" and "cnn" pick the stock architectures for the data; anything else
// is parsed as a descriptor and must fit the data.
Architecture architecture_from_config(const Config& cfg, const Shape& input, std::size_t classes);

Penalty parse_penalty(const std::string& name);
const char* to_string(Penalty penalty);

OrthoConfig ortho_config_from(const Config& cfg);
EvalProtocol protocol_from(const Config& cfg);
// eval.defenses with the defense.* tuning keys applied.
std::vector<DefenseSpec> defenses_from(const Config& cfg);

// IDX pair `<prefix>-images.idx` / `<prefix>-labels.idx`.
std::string idx_images_path(const std::string& prefix);
std::string idx_labels_path(const std::string& prefix);

}  // namespace orthonet
