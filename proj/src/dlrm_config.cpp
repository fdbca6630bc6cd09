/*
 * Copyright (c) 2026, the dlrmkit authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dlrmkit/dlrm_config.hpp"

#include <stdexcept>

namespace dlrmkit {

void DlrmConfig::validate() const {
  if (num_tables < 1) throw std::invalid_argument("config: need at least one embedding table");
  if (embedding_dim < 1 || rows_per_table < 1) {
    throw std::invalid_argument("config: embedding dimensions must be positive");
  }
  if (bottom_mlp.empty() || top_mlp.empty()) {
    throw std::invalid_argument("config: MLP layer lists must be non-empty");
  }
  if (bottom_mlp.back() != embedding_dim) {
    throw std::invalid_argument(
        "config: bottom MLP output width must equal the embedding dimension (interaction "
        "stacks them)");
  }
  if (top_mlp.back() != 1) {
    throw std::invalid_argument("config: top MLP must end in a single output unit");
  }
  if (bottom_mlp_input < 1) throw std::invalid_argument("config: dense input width must be >= 1");
}

int64_t interaction_output_width(int64_t tables, int64_t emb_dim) {
  return emb_dim + (tables + 1) * tables / 2;
}

std::vector<LayerDims> dlrm_layer_dims(const DlrmConfig& cfg) {
  std::vector<LayerDims> dims;
  dims.reserve(cfg.bottom_mlp.size() + cfg.top_mlp.size());
  int64_t in = cfg.bottom_mlp_input;
  for (int64_t out : cfg.bottom_mlp) {
    dims.push_back({in, out});
    in = out;
  }
  in = interaction_output_width(cfg.num_tables, cfg.embedding_dim);
  for (int64_t out : cfg.top_mlp) {
    dims.push_back({in, out});
    in = out;
  }
  return dims;
}

int64_t table_bytes(const DlrmConfig& cfg) {
  return cfg.num_tables * cfg.rows_per_table * cfg.embedding_dim * 4;
}

}  // namespace dlrmkit
