// Architecture IR: layer specs, connectivity, block structure, width tables
// and the `eas-arch v1` text format.
#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace eas {

enum class LayerKind { Conv, Pool, FC, Softmax };
enum class PoolMode { Max, Avg };
enum class Activation { ReLU, None };
enum class Connectivity { Plain, Dense };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int width = 0;        // conv filters / fc units / softmax classes
  int filter_size = 0;  // conv and pool
  int stride = 1;       // pool only; conv stride is fixed at 1
  PoolMode pool_mode = PoolMode::Max;
  Activation activation = Activation::None;
  bool has_batchnorm = false;
  double dropout_rate = 0.0;

  bool operator==(const LayerSpec&) const = default;

  static LayerSpec conv(int width, int k, bool bn = true,
                        double dropout = 0.0) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.width = width;
    l.filter_size = k;
    l.activation = Activation::ReLU;
    l.has_batchnorm = bn;
    l.dropout_rate = dropout;
    return l;
  }
  static LayerSpec pool(int k, int stride, PoolMode mode) {
    LayerSpec l;
    l.kind = LayerKind::Pool;
    l.filter_size = k;
    l.stride = stride;
    l.pool_mode = mode;
    return l;
  }
  static LayerSpec fc(int width, bool bn = true, double dropout = 0.0) {
    LayerSpec l;
    l.kind = LayerKind::FC;
    l.width = width;
    l.activation = Activation::ReLU;
    l.has_batchnorm = bn;
    l.dropout_rate = dropout;
    return l;
  }
  static LayerSpec softmax(int classes) {
    LayerSpec l;
    l.kind = LayerKind::Softmax;
    l.width = classes;
    return l;
  }
};

// Dense blocks are [first, last) ranges of conv layers; inside a block every
// layer consumes the channel concatenation of the block input and all
// previous member outputs, and the layer after the block consumes the full
// concatenation.
struct ArchitectureSpec {
  std::vector<LayerSpec> layers;
  Connectivity connectivity = Connectivity::Plain;
  std::vector<std::pair<int, int>> dense_blocks;
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;

  bool operator==(const ArchitectureSpec&) const = default;

  int class_count() const {
    return layers.empty() ? 0 : layers.back().width;
  }
  std::optional<int> dense_block_of(int layer) const {
    for (size_t b = 0; b < dense_blocks.size(); ++b)
      if (layer >= dense_blocks[b].first && layer < dense_blocks[b].second)
        return static_cast<int>(b);
    return std::nullopt;
  }
};

// The paper-facing start point: C16-P-C32-P-C64-P-C128-P(avg)-FC256-SM10.
ArchitectureSpec start_point_network(bool batchnorm = true);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> violations;
};

ValidationReport validate_architecture(const ArchitectureSpec& spec);

// A block of the deepen action space: conv blocks are the maximal conv runs
// delimited by pooling layers, plus one terminal fc block covering the
// FC/softmax run.
struct BlockRange {
  int first = 0;  // layer index of the first member
  int count = 0;  // number of member layers
  bool is_fc = false;
};

std::vector<BlockRange> split_blocks(const ArchitectureSpec& spec);

struct WidthTable {
  std::vector<int> conv_levels;
  std::vector<int> fc_levels;
  std::vector<int> growth_levels;

  static WidthTable standard();
};

enum class WidthDomain { Conv, FC, Growth };

// Which level sequence applies to a layer's width.
WidthDomain width_domain(const ArchitectureSpec& spec, int layer);
const std::vector<int>& levels_for(const WidthTable& table, WidthDomain d);

// Successor level; nullopt when current sits at the table maximum.
// Throws std::invalid_argument when current is not a table member.
std::optional<int> next_width_level(int current, WidthDomain domain,
                                    const WidthTable& table);

// Per-layer shape bookkeeping for the activation flowing through the net.
struct LayerIO {
  int in_c = 0, in_h = 0, in_w = 0;   // activation entering the layer
  int kernel_in = 0;                  // kernel input channels / fc in-features
  int out_c = 0, out_h = 0, out_w = 0;  // activation leaving the layer
  // For the layer following a dense block, in_c is the full concatenation.
};

// Shape inference along the layer sequence. Throws on specs whose spatial
// dims underflow; validate first for a report instead.
std::vector<LayerIO> compute_flow(const ArchitectureSpec& spec);

struct ParseError : std::runtime_error {
  int line;
  ParseError(int line_, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_) + ": " + msg),
        line(line_) {}
};

// `eas-arch v1` document. Round-trip exact.
std::string serialize(const ArchitectureSpec& spec);
ArchitectureSpec deserialize(const std::string& text);

const char* kind_name(LayerKind k);

}  // namespace eas
