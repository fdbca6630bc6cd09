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
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dlrmkit {

// Model-shape parameters of one DLRM configuration. bottom_mlp/top_mlp list the
// output width of every layer; the bottom MLP must end at embedding_dim (the
// interaction needs equal widths) and the top MLP at 1.
struct DlrmConfig {
  std::string name;
  int64_t minibatch = 0;         // N, single-socket runs
  int64_t global_minibatch = 0;  // GN, strong scaling
  int64_t local_minibatch = 0;   // LN, weak scaling
  int64_t avg_lookups = 1;       // P
  int64_t num_tables = 1;        // S
  int64_t embedding_dim = 1;     // E
  int64_t rows_per_table = 1;    // M
  int64_t bottom_mlp_input = 1;  // dense feature width
  std::vector<int64_t> bottom_mlp;
  std::vector<int64_t> top_mlp;

  void validate() const;  // throws std::invalid_argument with a diagnostic
};

// Width of the interaction output: the dense row plus the strictly-lower-triangle
// dot products of the (1 + tables) stacked E-wide rows.
int64_t interaction_output_width(int64_t tables, int64_t emb_dim);

struct LayerDims {
  int64_t in = 0;
  int64_t out = 0;
};

// (in, out) of every FC layer, bottom MLP first, then the top MLP whose input
// width is the interaction output width.
std::vector<LayerDims> dlrm_layer_dims(const DlrmConfig& cfg);

// S * M * E * 4, the table footprint the harness checks before allocating.
int64_t table_bytes(const DlrmConfig& cfg);

}  // namespace dlrmkit
