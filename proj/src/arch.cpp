#include "eas/arch.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

namespace eas {

ArchitectureSpec start_point_network(bool batchnorm) {
  ArchitectureSpec spec;
  spec.in_channels = 3;
  spec.in_height = 32;
  spec.in_width = 32;
  spec.layers = {
      LayerSpec::conv(16, 3, batchnorm),
      LayerSpec::pool(2, 2, PoolMode::Max),
      LayerSpec::conv(32, 3, batchnorm),
      LayerSpec::pool(2, 2, PoolMode::Max),
      LayerSpec::conv(64, 3, batchnorm),
      LayerSpec::pool(2, 2, PoolMode::Max),
      LayerSpec::conv(128, 3, batchnorm),
      LayerSpec::pool(4, 4, PoolMode::Avg),
      LayerSpec::fc(256, batchnorm),
      LayerSpec::softmax(10),
  };
  return spec;
}

WidthTable WidthTable::standard() {
  WidthTable t;
  t.conv_levels = {16, 32, 64, 96, 128, 192, 256, 320, 384, 448, 512};
  t.fc_levels = {64, 128, 256, 384, 512, 640, 768, 896, 1024};
  t.growth_levels = {40, 44, 48, 52, 56, 60, 64};
  return t;
}

WidthDomain width_domain(const ArchitectureSpec& spec, int layer) {
  const LayerSpec& l = spec.layers.at(layer);
  if (l.kind == LayerKind::FC || l.kind == LayerKind::Softmax)
    return WidthDomain::FC;
  if (spec.connectivity == Connectivity::Dense &&
      spec.dense_block_of(layer).has_value())
    return WidthDomain::Growth;
  return WidthDomain::Conv;
}

const std::vector<int>& levels_for(const WidthTable& table, WidthDomain d) {
  switch (d) {
    case WidthDomain::Conv: return table.conv_levels;
    case WidthDomain::FC: return table.fc_levels;
    case WidthDomain::Growth: return table.growth_levels;
  }
  return table.conv_levels;
}

std::optional<int> next_width_level(int current, WidthDomain domain,
                                    const WidthTable& table) {
  const std::vector<int>& levels = levels_for(table, domain);
  auto it = std::find(levels.begin(), levels.end(), current);
  if (it == levels.end())
    throw std::invalid_argument("width " + std::to_string(current) +
                                " is not a table level");
  ++it;
  if (it == levels.end()) return std::nullopt;
  return *it;
}

ValidationReport validate_architecture(const ArchitectureSpec& spec) {
  ValidationReport rep;
  auto violate = [&](const std::string& code) {
    rep.ok = false;
    rep.violations.push_back(code);
  };

  if (spec.layers.empty()) {
    violate("empty-architecture");
    return rep;
  }
  if (spec.in_channels < 1 || spec.in_height < 1 || spec.in_width < 1)
    violate("bad-input-shape");

  int softmax_count = 0;
  bool seen_fc = false;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        if (seen_fc) violate("conv-after-fc");
        if (l.width < 1) violate("bad-width");
        if (l.filter_size != 1 && l.filter_size != 3 && l.filter_size != 5)
          violate("bad-filter-size");
        break;
      case LayerKind::Pool:
        if (seen_fc) violate("pool-after-fc");
        if (l.filter_size < 1 || l.stride < 1) violate("bad-pool-geometry");
        break;
      case LayerKind::FC:
        seen_fc = true;
        if (l.width < 1) violate("bad-width");
        break;
      case LayerKind::Softmax:
        seen_fc = true;
        ++softmax_count;
        if (l.width < 1) violate("bad-width");
        if (i + 1 != spec.layers.size()) violate("softmax-not-last");
        break;
    }
    if (l.dropout_rate < 0.0 || l.dropout_rate >= 1.0)
      violate("bad-dropout-rate");
  }
  if (softmax_count != 1) violate("softmax-count");

  if (spec.connectivity == Connectivity::Plain && !spec.dense_blocks.empty())
    violate("blocks-in-plain-mode");
  int prev_end = -1;
  for (auto [first, last] : spec.dense_blocks) {
    if (first < 0 || last > static_cast<int>(spec.layers.size()) ||
        first >= last) {
      violate("bad-dense-block-range");
      continue;
    }
    if (first < prev_end) violate("dense-block-overlap");
    prev_end = last;
    for (int i = first; i < last; ++i)
      if (spec.layers[i].kind != LayerKind::Conv)
        violate("non-conv-in-dense-block");
  }

  // Spatial tracking; only meaningful if the structure is sane so far.
  if (rep.ok) {
    int h = spec.in_height, w = spec.in_width;
    for (const LayerSpec& l : spec.layers) {
      if (l.kind == LayerKind::Pool) {
        if (h < l.filter_size || w < l.filter_size) {
          violate("spatial-underflow");
          break;
        }
        h = (h - l.filter_size) / l.stride + 1;
        w = (w - l.filter_size) / l.stride + 1;
      }
    }
  }
  return rep;
}

std::vector<BlockRange> split_blocks(const ArchitectureSpec& spec) {
  ValidationReport rep = validate_architecture(spec);
  if (!rep.ok)
    throw std::invalid_argument("split_blocks on invalid spec: " +
                                rep.violations.front());
  std::vector<BlockRange> blocks;
  int n = static_cast<int>(spec.layers.size());
  int first_fc = n;
  for (int i = 0; i < n; ++i) {
    if (spec.layers[i].kind == LayerKind::FC ||
        spec.layers[i].kind == LayerKind::Softmax) {
      first_fc = i;
      break;
    }
  }
  // Conv blocks are the non-empty runs between pools; the fc run is its own
  // terminal block.
  BlockRange cur{0, 0, false};
  for (int i = 0; i < first_fc; ++i) {
    if (spec.layers[i].kind == LayerKind::Pool) {
      if (cur.count > 0) blocks.push_back(cur);
      cur = BlockRange{i + 1, 0, false};
    } else {
      ++cur.count;
    }
  }
  if (cur.count > 0) blocks.push_back(cur);
  blocks.push_back(BlockRange{first_fc, n - first_fc, true});
  return blocks;
}

std::vector<LayerIO> compute_flow(const ArchitectureSpec& spec) {
  std::vector<LayerIO> io(spec.layers.size());
  int c = spec.in_channels, h = spec.in_height, w = spec.in_width;
  bool flat = false;
  int flat_features = 0;

  // Dense-block walk state: concat width of the current stack.
  int block_idx = -1;
  int stack_width = 0;

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerIO& o = io[i];
    auto blk = spec.dense_block_of(static_cast<int>(i));
    if (blk.has_value() && *blk != block_idx) {
      block_idx = *blk;
      stack_width = c;  // block input
    }
    bool in_block = blk.has_value();

    o.in_c = in_block ? stack_width : c;
    o.in_h = h;
    o.in_w = w;

    switch (l.kind) {
      case LayerKind::Conv:
        o.kernel_in = o.in_c;
        o.out_c = l.width;
        o.out_h = h;
        o.out_w = w;
        if (in_block) {
          stack_width += l.width;
          bool last_member =
              static_cast<int>(i) + 1 == spec.dense_blocks[*blk].second;
          if (last_member) c = stack_width;  // export the concatenation
        } else {
          c = l.width;
        }
        break;
      case LayerKind::Pool:
        if (h < l.filter_size || w < l.filter_size)
          throw std::invalid_argument("pool underflows spatial dims");
        h = (h - l.filter_size) / l.stride + 1;
        w = (w - l.filter_size) / l.stride + 1;
        o.kernel_in = 0;
        o.out_c = c;
        o.out_h = h;
        o.out_w = w;
        break;
      case LayerKind::FC:
      case LayerKind::Softmax:
        if (!flat) {
          flat = true;
          flat_features = c * h * w;
          h = 1;
          w = 1;
        }
        o.kernel_in = flat_features;
        o.out_c = l.width;
        o.out_h = 1;
        o.out_w = 1;
        c = l.width;
        flat_features = l.width;
        break;
    }
  }
  return io;
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Pool: return "pool";
    case LayerKind::FC: return "fc";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct FieldMap {
  std::map<std::string, std::string> kv;
  int line;

  bool has(const std::string& k) const { return kv.count(k) > 0; }
  std::string str(const std::string& k) const {
    auto it = kv.find(k);
    if (it == kv.end()) throw ParseError(line, "missing field '" + k + "'");
    return it->second;
  }
  int integer(const std::string& k) const {
    std::string s = str(k);
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ParseError(line, "bad integer for '" + k + "': " + s);
    return v;
  }
  double real(const std::string& k) const {
    std::string s = str(k);
    try {
      size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ParseError(line, "bad real for '" + k + "': " + s);
    }
  }
};

FieldMap parse_fields(const std::vector<std::string>& tokens, int line,
                      size_t from) {
  FieldMap f;
  f.line = line;
  for (size_t i = from; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(line, "expected key=value, got '" + t + "'");
    f.kv[t.substr(0, eq)] = t.substr(eq + 1);
  }
  return f;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

}  // namespace

std::string serialize(const ArchitectureSpec& spec) {
  std::ostringstream os;
  os << "eas-arch v1\n";
  os << "input " << spec.in_channels << " " << spec.in_height << " "
     << spec.in_width << "\n";
  os << "connectivity "
     << (spec.connectivity == Connectivity::Plain ? "plain" : "dense") << "\n";
  for (auto [first, last] : spec.dense_blocks)
    os << "dense_block " << first << " " << last << "\n";
  for (const LayerSpec& l : spec.layers) {
    os << "layer " << kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        os << " width=" << l.width << " k=" << l.filter_size;
        break;
      case LayerKind::Pool:
        os << " mode=" << (l.pool_mode == PoolMode::Max ? "max" : "avg")
           << " k=" << l.filter_size << " stride=" << l.stride;
        break;
      case LayerKind::FC:
      case LayerKind::Softmax:
        os << " width=" << l.width;
        break;
    }
    if (l.kind != LayerKind::Pool && l.kind != LayerKind::Softmax) {
      os << " act=" << (l.activation == Activation::ReLU ? "relu" : "none");
      os << " bn=" << (l.has_batchnorm ? 1 : 0);
      if (l.dropout_rate != 0.0)
        os << " dropout=" << format_double(l.dropout_rate);
    }
    os << "\n";
  }
  return os.str();
}

ArchitectureSpec deserialize(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  ArchitectureSpec spec;
  bool saw_header = false, saw_input = false;

  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> tok = split_ws(line);
    if (tok.empty()) continue;

    if (!saw_header) {
      if (tok.size() != 2 || tok[0] != "eas-arch" || tok[1] != "v1")
        throw ParseError(line_no, "expected header 'eas-arch v1'");
      saw_header = true;
      continue;
    }
    if (tok[0] == "input") {
      if (tok.size() != 4) throw ParseError(line_no, "input needs 3 dims");
      FieldMap f;
      f.line = line_no;
      f.kv = {{"c", tok[1]}, {"h", tok[2]}, {"w", tok[3]}};
      spec.in_channels = f.integer("c");
      spec.in_height = f.integer("h");
      spec.in_width = f.integer("w");
      saw_input = true;
    } else if (tok[0] == "connectivity") {
      if (tok.size() != 2) throw ParseError(line_no, "connectivity needs arg");
      if (tok[1] == "plain")
        spec.connectivity = Connectivity::Plain;
      else if (tok[1] == "dense")
        spec.connectivity = Connectivity::Dense;
      else
        throw ParseError(line_no, "unknown connectivity '" + tok[1] + "'");
    } else if (tok[0] == "dense_block") {
      if (tok.size() != 3) throw ParseError(line_no, "dense_block needs 2 idx");
      FieldMap f;
      f.line = line_no;
      f.kv = {{"a", tok[1]}, {"b", tok[2]}};
      spec.dense_blocks.emplace_back(f.integer("a"), f.integer("b"));
    } else if (tok[0] == "layer") {
      if (tok.size() < 2) throw ParseError(line_no, "layer needs a kind");
      LayerSpec l;
      FieldMap f = parse_fields(tok, line_no, 2);
      if (tok[1] == "conv") {
        l.kind = LayerKind::Conv;
        l.width = f.integer("width");
        l.filter_size = f.integer("k");
      } else if (tok[1] == "pool") {
        l.kind = LayerKind::Pool;
        l.filter_size = f.integer("k");
        l.stride = f.integer("stride");
        std::string m = f.str("mode");
        if (m == "max")
          l.pool_mode = PoolMode::Max;
        else if (m == "avg")
          l.pool_mode = PoolMode::Avg;
        else
          throw ParseError(line_no, "unknown pool mode '" + m + "'");
      } else if (tok[1] == "fc") {
        l.kind = LayerKind::FC;
        l.width = f.integer("width");
      } else if (tok[1] == "softmax") {
        l.kind = LayerKind::Softmax;
        l.width = f.integer("width");
      } else {
        throw ParseError(line_no, "unknown layer kind '" + tok[1] + "'");
      }
      if (l.kind != LayerKind::Pool && l.kind != LayerKind::Softmax) {
        std::string act = f.str("act");
        if (act == "relu")
          l.activation = Activation::ReLU;
        else if (act == "none")
          l.activation = Activation::None;
        else
          throw ParseError(line_no, "unknown activation '" + act + "'");
        l.has_batchnorm = f.integer("bn") != 0;
        if (f.has("dropout")) l.dropout_rate = f.real("dropout");
      }
      spec.layers.push_back(l);
    } else {
      throw ParseError(line_no, "unknown directive '" + tok[0] + "'");
    }
  }
  if (!saw_header) throw ParseError(line_no, "empty document");
  if (!saw_input) throw ParseError(line_no, "missing input line");
  return spec;
}

}  // namespace eas
