#include "eas/transform.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace eas {

RemapFunction sample_remap(int f, int f_hat, Rng& rng) {
  if (f < 1 || f_hat < f)
    throw std::invalid_argument("sample_remap requires f_hat >= f >= 1");
  RemapFunction r;
  r.source_width = f;
  r.map.resize(f_hat);
  for (int j = 0; j < f; ++j) r.map[j] = j;
  for (int j = f; j < f_hat; ++j) r.map[j] = rng.uniform_int(0, f - 1);
  return r;
}

RemapFunction equivalent_remap(const RemapFunction& g, int prefix_width,
                               int suffix_width) {
  if (prefix_width < 0 || suffix_width < 0)
    throw std::invalid_argument("negative concat widths");
  RemapFunction r;
  r.source_width = prefix_width + g.source_width + suffix_width;
  r.map.resize(prefix_width + g.target_width() + suffix_width);
  int shift = g.target_width() - g.source_width;
  for (int j = 0; j < prefix_width; ++j) r.map[j] = j;
  for (int j = 0; j < g.target_width(); ++j)
    r.map[prefix_width + j] = prefix_width + g.map[j];
  for (int j = 0; j < suffix_width; ++j) {
    int t = prefix_width + g.target_width() + j;
    r.map[t] = t - shift;
  }
  return r;
}

std::string action_to_text(const TransformAction& a) {
  std::ostringstream os;
  if (std::holds_alternative<WidenAction>(a)) {
    os << "widen layer=" << std::get<WidenAction>(a).layer;
  } else {
    const DeepenAction& d = std::get<DeepenAction>(a);
    os << "deepen block=" << d.block << " index=" << d.index;
    if (d.filter_size) os << " k=" << *d.filter_size;
  }
  return os.str();
}

TransformAction action_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string head;
  is >> head;
  auto field = [&](const std::string& token, const std::string& key) {
    if (token.rfind(key + "=", 0) != 0)
      throw std::invalid_argument("bad action text: " + text);
    return std::stoi(token.substr(key.size() + 1));
  };
  std::string tok;
  if (head == "widen") {
    if (!(is >> tok)) throw std::invalid_argument("bad action text: " + text);
    return WidenAction{field(tok, "layer")};
  }
  if (head == "deepen") {
    DeepenAction d;
    if (!(is >> tok)) throw std::invalid_argument("bad action text: " + text);
    d.block = field(tok, "block");
    if (!(is >> tok)) throw std::invalid_argument("bad action text: " + text);
    d.index = field(tok, "index");
    if (is >> tok) d.filter_size = field(tok, "k");
    return d;
  }
  throw std::invalid_argument("unknown action '" + head + "'");
}

bool widen_eligible(const ArchitectureSpec& spec, int layer,
                    const WidthTable& table) {
  const LayerSpec& l = spec.layers.at(layer);
  if (l.kind == LayerKind::Pool || l.kind == LayerKind::Softmax) return false;
  const std::vector<int>& levels =
      levels_for(table, width_domain(spec, layer));
  auto it = std::find(levels.begin(), levels.end(), l.width);
  if (it == levels.end()) return false;  // off-table widths stay as they are
  return it + 1 != levels.end();
}

namespace {

// Channels entering a block (the activation flowing into its first layer).
int block_input_channels(const ArchitectureSpec& spec,
                         const std::vector<LayerIO>& io,
                         const BlockRange& block) {
  if (block.count > 0) return io[block.first].in_c;
  // Empty conv block between two pools: the pool at block.first sees the flow.
  if (block.first < static_cast<int>(spec.layers.size()))
    return io[block.first].in_c;
  return 0;
}

// Width the inserted layer gets at (block, index): the producer of its input.
int insertion_width(const ArchitectureSpec& spec,
                    const std::vector<LayerIO>& io, const BlockRange& block,
                    int index) {
  if (block.is_fc) return io[block.first + index].kernel_in;
  if (index == 0) return block_input_channels(spec, io, block);
  return spec.layers[block.first + index - 1].width;
}

}  // namespace

std::vector<std::vector<int>> valid_deepen_indices(const ArchitectureSpec& spec,
                                                   const WidthTable& table) {
  std::vector<BlockRange> blocks = split_blocks(spec);
  std::vector<LayerIO> io = compute_flow(spec);
  std::vector<std::vector<int>> out(blocks.size());
  for (size_t b = 0; b < blocks.size(); ++b) {
    const BlockRange& blk = blocks[b];
    int max_index = blk.is_fc ? blk.count - 1 : blk.count;
    for (int idx = 0; idx <= max_index; ++idx) {
      if (b == 0 && idx == 0 && !blk.is_fc)
        continue;  // before the first conv the input is not post-activation
      int width = insertion_width(spec, io, blk, idx);
      WidthDomain domain;
      if (blk.is_fc) {
        domain = WidthDomain::FC;
      } else if (spec.connectivity == Connectivity::Dense) {
        int pos = blk.first + idx;
        bool joins = false;
        for (auto [a, e] : spec.dense_blocks)
          if (pos >= a && pos <= e) joins = true;
        domain = joins ? WidthDomain::Growth : WidthDomain::Conv;
      } else {
        domain = WidthDomain::Conv;
      }
      const std::vector<int>& levels = levels_for(table, domain);
      if (std::find(levels.begin(), levels.end(), width) == levels.end())
        continue;
      out[b].push_back(idx);
    }
  }
  return out;
}

InsertionPoint resolve_deepen(const ArchitectureSpec& spec,
                              const DeepenAction& a) {
  std::vector<BlockRange> blocks = split_blocks(spec);
  if (a.block < 0 || a.block >= static_cast<int>(blocks.size()))
    throw std::invalid_argument("deepen block out of range");
  const BlockRange& blk = blocks[a.block];
  int max_index = blk.is_fc ? blk.count - 1 : blk.count;
  if (a.index < 0 || a.index > max_index)
    throw std::invalid_argument("deepen index out of range");
  if (a.block == 0 && a.index == 0 && !blk.is_fc)
    throw std::invalid_argument("cannot insert before the first layer");
  if (!blk.is_fc && a.filter_size) {
    int k = *a.filter_size;
    if (k != 1 && k != 3 && k != 5)
      throw std::invalid_argument("filter size must be odd (1, 3 or 5)");
  }
  if (!blk.is_fc && !a.filter_size)
    throw std::invalid_argument("conv insertion needs a filter size");
  if (blk.is_fc && a.filter_size)
    throw std::invalid_argument("fc insertion carries no filter size");

  std::vector<LayerIO> io = compute_flow(spec);
  InsertionPoint p;
  p.layer_pos = blk.first + a.index;
  p.is_fc = blk.is_fc;
  p.width = insertion_width(spec, io, blk, a.index);
  if (!blk.is_fc && spec.connectivity == Connectivity::Dense) {
    for (size_t d = 0; d < spec.dense_blocks.size(); ++d) {
      auto [first, last] = spec.dense_blocks[d];
      if (p.layer_pos >= first && p.layer_pos <= last) {
        p.dense_block = static_cast<int>(d);
        break;
      }
    }
  }
  return p;
}

namespace {

// Nearest parametric layer strictly below an insertion position; attribute
// source for the new layer.
int parametric_below(const ArchitectureSpec& spec, int pos) {
  for (int i = pos - 1; i >= 0; --i) {
    LayerKind k = spec.layers[i].kind;
    if (k == LayerKind::Conv || k == LayerKind::FC) return i;
  }
  return -1;
}

LayerSpec make_inserted_layer(const ArchitectureSpec& spec,
                              const InsertionPoint& p,
                              std::optional<int> filter_size) {
  int below = parametric_below(spec, p.layer_pos);
  if (below < 0)
    throw std::invalid_argument("no parametric layer below insertion");
  const LayerSpec& src = spec.layers[below];
  LayerSpec nl;
  nl.kind = p.is_fc ? LayerKind::FC : LayerKind::Conv;
  nl.width = p.width;
  if (!p.is_fc) nl.filter_size = *filter_size;
  nl.activation = src.activation;
  nl.has_batchnorm = src.has_batchnorm;
  nl.dropout_rate = src.dropout_rate;
  return nl;
}

ArchitectureSpec insert_into_spec(const ArchitectureSpec& spec,
                                  const InsertionPoint& p,
                                  const LayerSpec& nl) {
  ArchitectureSpec out = spec;
  out.layers.insert(out.layers.begin() + p.layer_pos, nl);
  for (size_t d = 0; d < out.dense_blocks.size(); ++d) {
    auto& [first, last] = out.dense_blocks[d];
    if (p.dense_block && static_cast<int>(d) == *p.dense_block) {
      ++last;  // the new layer joins this block
    } else if (first >= p.layer_pos) {
      ++first;
      ++last;
    }
  }
  return out;
}

struct SegMap {
  int old_width = 0;
  std::vector<int> map;  // kept: within segment; inserted: concat-prefix index
  bool inserted = false;

  bool is_identity() const {
    if (inserted || static_cast<int>(map.size()) != old_width) return false;
    for (int j = 0; j < old_width; ++j)
      if (map[j] != j) return false;
    return true;
  }
  static SegMap ident(int w) {
    SegMap s;
    s.old_width = w;
    s.map.resize(w);
    for (int j = 0; j < w; ++j) s.map[j] = j;
    return s;
  }
};

RemapFunction concat_seg_maps(const std::vector<SegMap>& segs) {
  RemapFunction r;
  int src_off = 0;
  for (const SegMap& s : segs) {
    for (int v : s.map) r.map.push_back(s.inserted ? v : src_off + v);
    src_off += s.old_width;
  }
  r.source_width = src_off;
  return r;
}

RemapFunction expand_over_spatial(const RemapFunction& r, int spatial) {
  if (spatial == 1) return r;
  RemapFunction e;
  e.source_width = r.source_width * spatial;
  e.map.resize(r.map.size() * spatial);
  for (size_t c = 0; c < r.map.size(); ++c)
    for (int s = 0; s < spatial; ++s)
      e.map[c * spatial + s] = r.map[c] * spatial + s;
  return e;
}

// Consumer adjustment: gather source rows, divide by replication counts.
template <typename Real>
Tensor<Real> adjust_conv_kernel(const Tensor<Real>& k, const RemapFunction& r) {
  int kw = k.shape[0], kh = k.shape[1], fo = k.shape[3];
  if (k.shape[2] != r.source_width)
    throw std::invalid_argument("kernel input width mismatch in remap");
  std::vector<int> counts = r.replication_counts();
  Tensor<Real> out({kw, kh, r.target_width(), fo});
  for (int x = 0; x < kw; ++x)
    for (int y = 0; y < kh; ++y)
      for (int j = 0; j < r.target_width(); ++j) {
        Real scale = Real(1) / static_cast<Real>(counts[j]);
        const Real* src =
            k.data.data() +
            ((static_cast<int64_t>(x) * kh + y) * k.shape[2] + r.map[j]) * fo;
        Real* dst = out.data.data() +
                    ((static_cast<int64_t>(x) * kh + y) * out.shape[2] + j) *
                        fo;
        for (int o = 0; o < fo; ++o) dst[o] = src[o] * scale;
      }
  return out;
}

template <typename Real>
Tensor<Real> adjust_fc_weight(const Tensor<Real>& w, const RemapFunction& r) {
  int out_features = w.shape[1];
  if (w.shape[0] != r.source_width)
    throw std::invalid_argument("fc input width mismatch in remap");
  std::vector<int> counts = r.replication_counts();
  Tensor<Real> out({r.target_width(), out_features});
  for (int j = 0; j < r.target_width(); ++j) {
    Real scale = Real(1) / static_cast<Real>(counts[j]);
    const Real* src =
        w.data.data() + static_cast<int64_t>(r.map[j]) * out_features;
    Real* dst = out.data.data() + static_cast<int64_t>(j) * out_features;
    for (int o = 0; o < out_features; ++o) dst[o] = src[o] * scale;
  }
  return out;
}

template <typename Real>
Tensor<Real> remap_vector(const Tensor<Real>& v, const RemapFunction& g) {
  Tensor<Real> out({g.target_width()});
  for (int j = 0; j < g.target_width(); ++j) out.data[j] = v.data[g.map[j]];
  return out;
}

// Kernel out-channel replication per the widening remap.
template <typename Real>
void widen_out_channels(const LayerSpec& l, LayerParams<Real>& lp,
                        const RemapFunction& g) {
  if (l.kind == LayerKind::Conv) {
    int kw = lp.kernel.shape[0], kh = lp.kernel.shape[1],
        fi = lp.kernel.shape[2];
    Tensor<Real> out({kw, kh, fi, g.target_width()});
    for (int x = 0; x < kw; ++x)
      for (int y = 0; y < kh; ++y)
        for (int i = 0; i < fi; ++i) {
          const Real* src =
              lp.kernel.data.data() +
              ((static_cast<int64_t>(x) * kh + y) * fi + i) * g.source_width;
          Real* dst = out.data.data() +
                      ((static_cast<int64_t>(x) * kh + y) * fi + i) *
                          g.target_width();
          for (int j = 0; j < g.target_width(); ++j) dst[j] = src[g.map[j]];
        }
    lp.kernel = std::move(out);
  } else {
    int in_features = lp.kernel.shape[0];
    Tensor<Real> out({in_features, g.target_width()});
    for (int i = 0; i < in_features; ++i) {
      const Real* src =
          lp.kernel.data.data() + static_cast<int64_t>(i) * g.source_width;
      Real* dst = out.data.data() + static_cast<int64_t>(i) * g.target_width();
      for (int j = 0; j < g.target_width(); ++j) dst[j] = src[g.map[j]];
    }
    lp.kernel = std::move(out);
  }
  lp.bias = remap_vector(lp.bias, g);
  if (!lp.bn_gamma.empty()) {
    lp.bn_gamma = remap_vector(lp.bn_gamma, g);
    lp.bn_beta = remap_vector(lp.bn_beta, g);
    lp.bn_mean = remap_vector(lp.bn_mean, g);
    lp.bn_var = remap_vector(lp.bn_var, g);
  }
}

enum class EventKind { Widen, Insert };

struct RebuildEvent {
  EventKind kind;
  int layer;               // widened layer (old index) / inserted (new index)
  RemapFunction g;         // widen
  std::vector<int> picks;  // dense insert (empty for plain)
};

// Rebuilds params for new_spec from old params, propagating the single
// remapping event through the flow exactly as forward propagates values.
template <typename Real>
NetworkParams<Real> rebuild_params(const ArchitectureSpec& old_spec,
                                   const NetworkParams<Real>& old_params,
                                   const ArchitectureSpec& new_spec,
                                   const RebuildEvent& ev,
                                   LayerParams<Real> inserted) {
  std::vector<LayerIO> old_io = compute_flow(old_spec);
  NetworkParams<Real> out;
  out.layers.resize(new_spec.layers.size());

  SegMap flow = SegMap::ident(old_spec.in_channels);
  std::vector<SegMap> stack;
  int cur_block = -1;
  int i = 0;  // old layer index

  for (int j = 0; j < static_cast<int>(new_spec.layers.size()); ++j) {
    const LayerSpec& l = new_spec.layers[j];
    auto blk = new_spec.dense_block_of(j);
    if (blk.has_value() && *blk != cur_block) {
      cur_block = *blk;
      stack.clear();
      stack.push_back(flow);
    }
    bool is_inserted = ev.kind == EventKind::Insert && j == ev.layer;

    if (l.kind == LayerKind::Pool) {
      out.layers[j] = old_params.layers[i];
      ++i;
      continue;  // channel map passes through unchanged
    }

    if (is_inserted) {
      out.layers[j] = std::move(inserted);
      SegMap seg;
      if (blk.has_value()) {
        seg.old_width = 0;
        seg.map = ev.picks;
        seg.inserted = true;
        stack.push_back(seg);
        if (j + 1 == new_spec.dense_blocks[*blk].second) {
          RemapFunction r = concat_seg_maps(stack);
          flow.old_width = r.source_width;
          flow.map = r.map;
          flow.inserted = false;
        }
      } else {
        flow = SegMap::ident(l.width);  // identity insertion, nothing changes
      }
      continue;
    }

    // Kept parametric layer: old index i corresponds to it.
    const LayerSpec& ol = old_spec.layers[i];
    LayerParams<Real> lp = old_params.layers[i];
    RemapFunction in_map =
        blk.has_value() ? concat_seg_maps(stack)
                        : concat_seg_maps(std::vector<SegMap>{flow});
    bool ident = in_map.is_identity();
    if (!ident) {
      if (l.kind == LayerKind::Conv) {
        lp.kernel = adjust_conv_kernel(lp.kernel, in_map);
      } else {
        int spatial = old_io[i].in_h * old_io[i].in_w;
        lp.kernel = adjust_fc_weight(lp.kernel,
                                     expand_over_spatial(in_map, spatial));
      }
    }
    SegMap out_seg = SegMap::ident(l.width);
    if (ev.kind == EventKind::Widen && i == ev.layer) {
      widen_out_channels(ol, lp, ev.g);
      out_seg.old_width = ev.g.source_width;
      out_seg.map = ev.g.map;
    }
    out.layers[j] = std::move(lp);

    if (blk.has_value()) {
      stack.push_back(out_seg);
      if (j + 1 == new_spec.dense_blocks[*blk].second) {
        RemapFunction r = concat_seg_maps(stack);
        flow.old_width = r.source_width;
        flow.map = r.map;
        flow.inserted = false;
      }
    } else {
      flow = out_seg;
    }
    ++i;
  }
  return out;
}

}  // namespace

template <typename Real>
TransformResult<Real> widen_layer_with_remap(const ArchitectureSpec& spec,
                                             const NetworkParams<Real>& params,
                                             int layer,
                                             const RemapFunction& remap) {
  if (layer < 0 || layer >= static_cast<int>(spec.layers.size()))
    throw std::invalid_argument("widen layer out of range");
  const LayerSpec& l = spec.layers[layer];
  if (l.kind == LayerKind::Pool)
    throw std::invalid_argument("cannot widen a pooling layer");
  if (l.kind == LayerKind::Softmax)
    throw std::invalid_argument("cannot widen the softmax layer");
  if (remap.source_width != l.width)
    throw std::invalid_argument("remap source width mismatch");
  if (remap.target_width() < l.width)
    throw std::invalid_argument("widening cannot shrink a layer");
  for (int j = 0; j < l.width; ++j)
    if (remap.map[j] != j)
      throw std::invalid_argument("remap must be identity on kept channels");
  for (int v : remap.map)
    if (v < 0 || v >= l.width)
      throw std::invalid_argument("remap entry out of range");

  TransformResult<Real> res;
  res.spec = spec;
  res.spec.layers[layer].width = remap.target_width();
  RebuildEvent ev{EventKind::Widen, layer, remap, {}};
  res.params = rebuild_params(spec, params, res.spec, ev, LayerParams<Real>{});
  return res;
}

template <typename Real>
TransformResult<Real> widen_layer(const ArchitectureSpec& spec,
                                  const NetworkParams<Real>& params, int layer,
                                  int new_width, Rng& rng) {
  const LayerSpec& l = spec.layers.at(layer);
  RemapFunction g = sample_remap(l.width, new_width, rng);
  return widen_layer_with_remap(spec, params, layer, g);
}

template <typename Real>
TransformResult<Real> deepen_with_picks(
    const ArchitectureSpec& spec, const NetworkParams<Real>& params,
    const DeepenAction& action, const std::vector<int>& picks,
    const Tensor<std::type_identity_t<Real>>* calib) {
  InsertionPoint p = resolve_deepen(spec, action);
  LayerSpec nl = make_inserted_layer(spec, p, action.filter_size);
  ArchitectureSpec new_spec = insert_into_spec(spec, p, nl);

  // New layer parameters: identity or one-hot kernels.
  LayerParams<Real> lp;
  bool dense_member = p.dense_block.has_value();
  std::vector<LayerIO> io = compute_flow(spec);
  int concat_in = 0;
  if (dense_member) {
    // Input of the new member: block input plus members before layer_pos.
    auto [first, last] = spec.dense_blocks[*p.dense_block];
    concat_in = io[first].in_c;
    for (int m = first; m < p.layer_pos; ++m) concat_in += spec.layers[m].width;
    if (static_cast<int>(picks.size()) != nl.width)
      throw std::invalid_argument("need one source channel per new filter");
    for (int v : picks)
      if (v < 0 || v >= concat_in)
        throw std::invalid_argument("pick out of range");
    int k = nl.filter_size;
    lp.kernel = Tensor<Real>({k, k, concat_in, nl.width});
    int c = k / 2;
    for (int j = 0; j < nl.width; ++j)
      lp.kernel.at4(c, c, picks[j], j) = Real(1);
  } else if (p.is_fc) {
    lp.kernel = Tensor<Real>({nl.width, nl.width});
    for (int j = 0; j < nl.width; ++j) lp.kernel.at2(j, j) = Real(1);
  } else {
    int k = nl.filter_size;
    lp.kernel = Tensor<Real>({k, k, nl.width, nl.width});
    int c = k / 2;
    for (int j = 0; j < nl.width; ++j) lp.kernel.at4(c, c, j, j) = Real(1);
  }
  lp.bias = Tensor<Real>({nl.width});

  if (nl.has_batchnorm) {
    // Undo the normalization: with scale sqrt(var+eps), shift mean and the
    // same running statistics, eval-mode batchnorm is the identity map.
    std::vector<Real> mean(nl.width, Real(0)), var(nl.width, Real(1));
    if (calib) {
      Tensor<Real> probe = input_at_layer(spec, params, *calib, p.layer_pos);
      int C = probe.shape[1];
      int64_t S = probe.numel() / probe.shape[0] / C;
      int64_t M = static_cast<int64_t>(probe.shape[0]) * S;
      std::vector<Real> pm(C, Real(0)), pv(C, Real(0));
      for (int c = 0; c < C; ++c) {
        Real s1 = 0, s2 = 0;
        for (int n = 0; n < probe.shape[0]; ++n) {
          const Real* ptr =
              probe.data.data() + (static_cast<int64_t>(n) * C + c) * S;
          for (int64_t t = 0; t < S; ++t) {
            s1 += ptr[t];
            s2 += ptr[t] * ptr[t];
          }
        }
        pm[c] = s1 / static_cast<Real>(M);
        pv[c] = s2 / static_cast<Real>(M) - pm[c] * pm[c];
        if (pv[c] < Real(0)) pv[c] = Real(0);
      }
      for (int j = 0; j < nl.width; ++j) {
        int src = dense_member ? picks[j] : j;
        mean[j] = pm[src];
        // Dead channels calibrate to zero variance; keep it positive. The
        // undo stays exact because gamma and the running variance share the
        // same value.
        var[j] = std::max(pv[src], static_cast<Real>(1e-12));
      }
    }
    lp.bn_gamma = Tensor<Real>({nl.width});
    lp.bn_beta = Tensor<Real>({nl.width});
    lp.bn_mean = Tensor<Real>({nl.width});
    lp.bn_var = Tensor<Real>({nl.width});
    for (int j = 0; j < nl.width; ++j) {
      lp.bn_gamma.data[j] =
          static_cast<Real>(std::sqrt(static_cast<double>(var[j]) + kBnEps));
      lp.bn_beta.data[j] = mean[j];
      lp.bn_mean.data[j] = mean[j];
      lp.bn_var.data[j] = var[j];
    }
  }

  TransformResult<Real> res;
  res.spec = new_spec;
  RebuildEvent ev{EventKind::Insert, p.layer_pos, RemapFunction{},
                  dense_member ? picks : std::vector<int>{}};
  res.params = rebuild_params(spec, params, new_spec, ev, std::move(lp));
  return res;
}

template <typename Real>
TransformResult<Real> deepen(const ArchitectureSpec& spec,
                             const NetworkParams<Real>& params,
                             const DeepenAction& action,
                             const Tensor<std::type_identity_t<Real>>* calib,
                             Rng& rng) {
  InsertionPoint p = resolve_deepen(spec, action);
  std::vector<int> picks;
  if (p.dense_block) {
    std::vector<LayerIO> io = compute_flow(spec);
    auto [first, last] = spec.dense_blocks[*p.dense_block];
    int concat_in = io[first].in_c;
    for (int m = first; m < p.layer_pos; ++m) concat_in += spec.layers[m].width;
    picks.resize(p.width);
    for (int& v : picks) v = rng.uniform_int(0, concat_in - 1);
  }
  return deepen_with_picks(spec, params, action, picks, calib);
}

template <typename Real>
TransformResult<Real> apply_transform(
    const ArchitectureSpec& spec, const NetworkParams<Real>& params,
    const TransformAction& action, const WidthTable& table,
    const Tensor<std::type_identity_t<Real>>* calib, Rng& rng) {
  if (std::holds_alternative<WidenAction>(action)) {
    int layer = std::get<WidenAction>(action).layer;
    const LayerSpec& l = spec.layers.at(layer);
    if (l.kind == LayerKind::Pool || l.kind == LayerKind::Softmax)
      throw std::invalid_argument("layer cannot be widened");
    auto next = next_width_level(l.width, width_domain(spec, layer), table);
    if (!next) throw std::invalid_argument("layer width is saturated");
    return widen_layer(spec, params, layer, *next, rng);
  }
  return deepen(spec, params, std::get<DeepenAction>(action), calib, rng);
}

ArchitectureSpec apply_action_to_spec(const ArchitectureSpec& spec,
                                      const TransformAction& a,
                                      const WidthTable& table) {
  if (std::holds_alternative<WidenAction>(a)) {
    int layer = std::get<WidenAction>(a).layer;
    const LayerSpec& l = spec.layers.at(layer);
    if (l.kind == LayerKind::Pool || l.kind == LayerKind::Softmax)
      throw std::invalid_argument("layer cannot be widened");
    auto next = next_width_level(l.width, width_domain(spec, layer), table);
    if (!next) throw std::invalid_argument("layer width is saturated");
    ArchitectureSpec out = spec;
    out.layers[layer].width = *next;
    return out;
  }
  const DeepenAction& d = std::get<DeepenAction>(a);
  InsertionPoint p = resolve_deepen(spec, d);
  LayerSpec nl = make_inserted_layer(spec, p, d.filter_size);
  return insert_into_spec(spec, p, nl);
}

template <typename Real>
PreservationReport verify_preservation(const ArchitectureSpec& spec_a,
                                       const NetworkParams<Real>& params_a,
                                       const ArchitectureSpec& spec_b,
                                       const NetworkParams<Real>& params_b,
                                       int n_inputs, double tolerance,
                                       uint64_t seed) {
  if (spec_a.in_channels != spec_b.in_channels ||
      spec_a.in_height != spec_b.in_height ||
      spec_a.in_width != spec_b.in_width)
    throw std::invalid_argument("input shapes differ");
  if (spec_a.class_count() != spec_b.class_count())
    throw std::invalid_argument("class counts differ");

  Rng rng(derive_seed(seed, 0x7e51fu));
  Tensor<Real> batch(
      {n_inputs, spec_a.in_channels, spec_a.in_height, spec_a.in_width});
  for (Real& v : batch.data) v = static_cast<Real>(rng.normal());

  Tensor<Real> la = forward(spec_a, params_a, batch, Mode::Eval);
  Tensor<Real> lb = forward(spec_b, params_b, batch, Mode::Eval);
  PreservationReport rep;
  for (int64_t t = 0; t < la.numel(); ++t) {
    double d = std::abs(static_cast<double>(la.data[t]) -
                        static_cast<double>(lb.data[t]));
    rep.max_abs_diff = std::max(rep.max_abs_diff, d);
  }
  rep.pass = rep.max_abs_diff <= tolerance;
  return rep;
}

#define EAS_TRANSFORM_INSTANTIATE(Real)                                       \
  template TransformResult<Real> widen_layer_with_remap<Real>(                \
      const ArchitectureSpec&, const NetworkParams<Real>&, int,               \
      const RemapFunction&);                                                  \
  template TransformResult<Real> widen_layer<Real>(                           \
      const ArchitectureSpec&, const NetworkParams<Real>&, int, int, Rng&);   \
  template TransformResult<Real> deepen_with_picks<Real>(                     \
      const ArchitectureSpec&, const NetworkParams<Real>&,                    \
      const DeepenAction&, const std::vector<int>&,                            \
      const Tensor<std::type_identity_t<Real>>*);                              \
  template TransformResult<Real> deepen<Real>(                                \
      const ArchitectureSpec&, const NetworkParams<Real>&,                    \
      const DeepenAction&, const Tensor<std::type_identity_t<Real>>*, Rng&);  \
  template TransformResult<Real> apply_transform<Real>(                       \
      const ArchitectureSpec&, const NetworkParams<Real>&,                    \
      const TransformAction&, const WidthTable&,                               \
      const Tensor<std::type_identity_t<Real>>*, Rng&);                         \
  template PreservationReport verify_preservation<Real>(                      \
      const ArchitectureSpec&, const NetworkParams<Real>&,                    \
      const ArchitectureSpec&, const NetworkParams<Real>&, int, double,       \
      uint64_t);

EAS_TRANSFORM_INSTANTIATE(float)
EAS_TRANSFORM_INSTANTIATE(double)

}  // namespace eas
