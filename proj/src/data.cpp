#include "floodseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

#include "floodseg/error.hpp"
#include "floodseg/image_io.hpp"

namespace floodseg {

namespace fs = std::filesystem;

namespace {

constexpr float kLuma[3] = {0.299f, 0.587f, 0.114f};

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw ShapeError(std::string(what) + ": expected [C,H,W], got " + to_string(t.shape()));
}

Tensor as_batch(const Tensor& chw) { return chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)}); }

Tensor drop_batch(Tensor nchw) {
  const Shape s = nchw.shape();
  return std::move(nchw).reshaped({s[1], s[2], s[3]});
}

void binarize(Tensor& mask, float threshold) {
  for (auto& v : mask.data()) v = v > threshold ? 1.0f : 0.0f;
}

float quantize(float v) { return static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f; }

}  // namespace

// ---------------------------------------------------------------- loading

Tensor load_image(const fs::path& image_path, TargetSize target) {
  if (target.height < 1 || target.width < 1) throw ConfigError("load_image: target size must be >= 1");
  const Image8 img = read_image(image_path);
  Tensor raw = to_tensor(img);
  if (img.channels == 1) {
    Tensor rgb({3, img.height, img.width});
    for (std::int64_t c = 0; c < 3; ++c) std::copy(raw.data().begin(), raw.data().end(), rgb.ptr() + c * raw.size());
    raw = std::move(rgb);
  }
  Tensor image = drop_batch(bilinear_resize(as_batch(raw), target.height, target.width));
  for (auto& v : image.data()) v = std::clamp(v / 255.0f, 0.0f, 1.0f);
  return image;
}

Sample load_sample(const fs::path& image_path, const fs::path& mask_path, TargetSize target) {
  Sample s;
  s.id = image_path.stem().string();
  s.image = load_image(image_path, target);

  const Image8 mimg = read_image(mask_path);
  Tensor mraw({1, mimg.height, mimg.width});
  for (std::int64_t i = 0; i < mimg.height * mimg.width; ++i) {
    const auto* px = mimg.pixels.data() + i * mimg.channels;
    mraw[static_cast<std::size_t>(i)] =
        mimg.channels == 1 ? static_cast<float>(px[0]) : kLuma[0] * px[0] + kLuma[1] * px[1] + kLuma[2] * px[2];
  }
  Tensor mask = drop_batch(nearest_resize(as_batch(mraw), target.height, target.width));
  binarize(mask, kMaskThreshold8);
  s.mask = std::move(mask);
  return s;
}

void validate_sample(const Sample& s) {
  require_chw(s.image, "sample image");
  require_chw(s.mask, "sample mask");
  if (s.image.dim(0) != 3 || s.mask.dim(0) != 1 || s.image.dim(1) != s.mask.dim(1) ||
      s.image.dim(2) != s.mask.dim(2)) {
    throw ShapeError("sample '" + s.id + "': image " + to_string(s.image.shape()) + " / mask " +
                     to_string(s.mask.shape()) + " mismatch");
  }
  for (float v : s.mask.data()) {
    if (v != 0.0f && v != 1.0f) throw DomainError("sample '" + s.id + "': mask is not binary");
  }
}

// ---------------------------------------------------------------- transforms

std::string_view aug_op_name(AugOp op) {
  switch (op) {
    case AugOp::kRot90: return "rot90";
    case AugOp::kRot180: return "rot180";
    case AugOp::kRot270: return "rot270";
    case AugOp::kHFlip: return "hflip";
    case AugOp::kVFlip: return "vflip";
    case AugOp::kScale: return "scale";
    case AugOp::kBlur: return "blur";
    case AugOp::kGrayscale: return "grayscale";
  }
  return "?";
}

bool is_geometric(AugOp op) { return op != AugOp::kBlur && op != AugOp::kGrayscale; }

bool AugmentationPolicy::enabled(AugOp op) const { return std::find(ops.begin(), ops.end(), op) != ops.end(); }

Tensor rotate90(const Tensor& chw, int quarter_turns) {
  require_chw(chw, "rotate90");
  const int q = ((quarter_turns % 4) + 4) % 4;
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const bool swap = q % 2 == 1;
  const auto oh = swap ? w : h, ow = swap ? h : w;
  Tensor out({c, oh, ow});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* src = chw.ptr() + ch * h * w;
    float* dst = out.ptr() + ch * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t si = i, sj = j;
        switch (q) {
          case 1: si = j, sj = w - 1 - i; break;
          case 2: si = h - 1 - i, sj = w - 1 - j; break;
          case 3: si = h - 1 - j, sj = i; break;
          default: break;
        }
        dst[i * ow + j] = src[si * w + sj];
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& chw) {
  require_chw(chw, "flip_horizontal");
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out(chw.shape());
  for (std::int64_t r = 0; r < c * h; ++r) {
    std::reverse_copy(chw.ptr() + r * w, chw.ptr() + (r + 1) * w, out.ptr() + r * w);
  }
  return out;
}

Tensor flip_vertical(const Tensor& chw) {
  require_chw(chw, "flip_vertical");
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out(chw.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < h; ++i) {
      std::copy_n(chw.ptr() + (ch * h + h - 1 - i) * w, w, out.ptr() + (ch * h + i) * w);
    }
  }
  return out;
}

Tensor scale_about_center(const Tensor& chw, float factor, bool nearest) {
  require_chw(chw, "scale_about_center");
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const auto sh = std::max<std::int64_t>(1, std::lround(static_cast<double>(h) * factor));
  const auto sw = std::max<std::int64_t>(1, std::lround(static_cast<double>(w) * factor));
  const Tensor scaled = nearest ? nearest_resize(as_batch(chw), sh, sw) : bilinear_resize(as_batch(chw), sh, sw);
  // Offset of the output window inside the scaled image (negative = padding).
  auto offset = [](std::int64_t scaled_len, std::int64_t len) {
    const std::int64_t d = scaled_len - len;
    return d >= 0 ? d / 2 : -((-d + 1) / 2);
  };
  const auto oi = offset(sh, h), oj = offset(sw, w);
  Tensor out(chw.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < h; ++i) {
      const std::int64_t si = i + oi;
      if (si < 0 || si >= sh) continue;
      for (std::int64_t j = 0; j < w; ++j) {
        const std::int64_t sj = j + oj;
        if (sj < 0 || sj >= sw) continue;
        out[static_cast<std::size_t>((ch * h + i) * w + j)] = scaled[static_cast<std::size_t>((ch * sh + si) * sw + sj)];
      }
    }
  }
  return out;
}

Tensor binomial_blur(const Tensor& chw) {
  require_chw(chw, "binomial_blur");
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  static constexpr float kTap[3] = {1.0f, 2.0f, 1.0f};
  Tensor out(chw.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* src = chw.ptr() + ch * h * w;
    float* dst = out.ptr() + ch * h * w;
    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        const float centre = src[i * w + j];
        float acc = 0.0f;
        for (int a = -1; a <= 1; ++a) {
          const std::int64_t r = std::clamp<std::int64_t>(i + a, 0, h - 1);
          for (int b = -1; b <= 1; ++b) {
            const std::int64_t col = std::clamp<std::int64_t>(j + b, 0, w - 1);
            acc += kTap[a + 1] * kTap[b + 1] * (src[r * w + col] - centre);
          }
        }
        dst[i * w + j] = std::clamp(centre + acc / 16.0f, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

Tensor grayscale(const Tensor& chw) {
  require_chw(chw, "grayscale");
  if (chw.dim(0) != 3) throw ShapeError("grayscale: expected 3 channels");
  const auto hw = chw.dim(1) * chw.dim(2);
  Tensor out(chw.shape());
  for (std::int64_t i = 0; i < hw; ++i) {
    const float y = kLuma[0] * chw[static_cast<std::size_t>(i)] + kLuma[1] * chw[static_cast<std::size_t>(hw + i)] +
                    kLuma[2] * chw[static_cast<std::size_t>(2 * hw + i)];
    const float v = std::clamp(y, 0.0f, 1.0f);
    for (std::int64_t c = 0; c < 3; ++c) out[static_cast<std::size_t>(c * hw + i)] = v;
  }
  return out;
}

Sample augment(const Sample& sample, const AugmentationPolicy& policy, Rng& rng) {
  Sample out = sample;
  const bool square = sample.image.dim(1) == sample.image.dim(2);
  bool moved = false;
  for (AugOp op : kAllAugOps) {
    if (!policy.enabled(op)) continue;
    if (!(rng.uniform() < policy.probability)) continue;
    switch (op) {
      case AugOp::kRot90:
      case AugOp::kRot270:
        if (!square) break;
        [[fallthrough]];
      case AugOp::kRot180: {
        const int q = op == AugOp::kRot90 ? 1 : op == AugOp::kRot180 ? 2 : 3;
        out.image = rotate90(out.image, q);
        out.mask = rotate90(out.mask, q);
        moved = true;
        break;
      }
      case AugOp::kHFlip:
        out.image = flip_horizontal(out.image);
        out.mask = flip_horizontal(out.mask);
        moved = true;
        break;
      case AugOp::kVFlip:
        out.image = flip_vertical(out.image);
        out.mask = flip_vertical(out.mask);
        moved = true;
        break;
      case AugOp::kScale: {
        const float f = rng.uniform(policy.scale_min, policy.scale_max);
        out.image = scale_about_center(out.image, f, false);
        out.mask = scale_about_center(out.mask, f, true);
        moved = true;
        break;
      }
      case AugOp::kBlur: out.image = binomial_blur(out.image); break;
      case AugOp::kGrayscale: out.image = grayscale(out.image); break;
    }
  }
  if (moved) binarize(out.mask, 0.5f);
  for (auto& v : out.image.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------- split and batching

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
  return idx;
}

Split split_dataset(std::span<const std::string> ids, double train_fraction, std::uint64_t seed) {
  if (ids.size() < 2) throw ConfigError("split_dataset: need at least 2 samples, got " + std::to_string(ids.size()));
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split_dataset: fraction must be in (0,1)");
  Rng rng(seed);
  const auto order = shuffled_indices(ids.size(), rng);
  auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(ids.size()) + 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  Split s;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? s.train : s.val).push_back(ids[order[i]]);
  return s;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle, Rng& rng) {
  if (n == 0) throw ConfigError("batches: empty dataset");
  if (batch_size == 0) throw ConfigError("batches: batch_size must be >= 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    order = shuffled_indices(n, rng);
  } else {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

Batch collate(std::span<const Sample> samples) {
  if (samples.empty()) throw ConfigError("collate: empty batch");
  const auto h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  const auto b = static_cast<std::int64_t>(samples.size());
  Batch batch{Tensor({b, 3, h, w}), Tensor({b, 1, h, w}), {}};
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.image.shape() != Shape{3, h, w} || s.mask.shape() != Shape{1, h, w}) {
      throw ShapeError("collate: sample '" + s.id + "' has a different size");
    }
    std::copy(s.image.data().begin(), s.image.data().end(), batch.images.ptr() + i * 3 * h * w);
    std::copy(s.mask.data().begin(), s.mask.data().end(), batch.masks.ptr() + i * h * w);
    batch.ids.push_back(s.id);
  }
  return batch;
}

std::vector<Batch> batches(std::span<const Sample> samples, std::size_t batch_size, bool shuffle, Rng& rng) {
  std::vector<Batch> out;
  for (const auto& group : batch_indices(samples.size(), batch_size, shuffle, rng)) {
    std::vector<Sample> picked;
    for (std::size_t i : group) picked.push_back(samples[i]);
    out.push_back(collate(picked));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic data

std::vector<Sample> generate_synthetic(std::size_t n, TargetSize size, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_synthetic: n must be >= 1");
  const auto h = size.height, w = size.width;
  constexpr float kBrown[3] = {0.45f, 0.34f, 0.20f};
  constexpr float kGreen[3] = {0.24f, 0.42f, 0.18f};
  constexpr float kWater[3] = {0.16f, 0.32f, 0.62f};
  const Rng root(seed);

  std::vector<Sample> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = root.fork(k);
    Sample& s = out[k];
    char id[32];
    std::snprintf(id, sizeof id, "syn_%04zu", k);
    s.id = id;
    s.image = Tensor({3, h, w});
    s.mask = Tensor({1, h, w});

    struct Ellipse {
      double cx, cy, a, b, cos_t, sin_t;
    };
    const auto count = 1 + rng.below(3);
    const double extent = static_cast<double>(std::min(h, w));
    std::vector<Ellipse> ellipses;
    for (std::uint64_t e = 0; e < count; ++e) {
      const double cx = rng.uniform() * static_cast<double>(w);
      const double cy = rng.uniform() * static_cast<double>(h);
      const double a = rng.uniform(0.08f, 0.3f) * extent;
      const double b = rng.uniform(0.08f, 0.3f) * extent;
      const double t = rng.uniform() * std::numbers::pi;
      ellipses.push_back({cx, cy, a, b, std::cos(t), std::sin(t)});
    }
    const double fx = rng.uniform(0.05f, 0.25f), fy = rng.uniform(0.05f, 0.25f);
    const double px = rng.uniform() * 2.0 * std::numbers::pi, py = rng.uniform() * 2.0 * std::numbers::pi;

    for (std::int64_t i = 0; i < h; ++i) {
      for (std::int64_t j = 0; j < w; ++j) {
        const double x = static_cast<double>(j) + 0.5, y = static_cast<double>(i) + 0.5;
        bool water = false;
        for (const auto& e : ellipses) {
          const double dx = x - e.cx, dy = y - e.cy;
          const double u = dx * e.cos_t + dy * e.sin_t;
          const double v = -dx * e.sin_t + dy * e.cos_t;
          if ((u / e.a) * (u / e.a) + (v / e.b) * (v / e.b) <= 1.0) {
            water = true;
            break;
          }
        }
        const auto t = static_cast<float>(0.5 + 0.25 * std::sin(fx * x + px) + 0.25 * std::sin(fy * y + py));
        const std::size_t p = static_cast<std::size_t>(i * w + j);
        s.mask[p] = water ? 1.0f : 0.0f;
        for (std::int64_t c = 0; c < 3; ++c) {
          const float base = water ? kWater[c] : kBrown[c] * (1.0f - t) + kGreen[c] * t;
          s.image[static_cast<std::size_t>(c * h * w) + p] = quantize(base + rng.uniform(-0.06f, 0.06f));
        }
      }
    }
  }
  return out;
}

void write_samples(const fs::path& root, std::span<const Sample> samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : samples) {
    write_png(root / "images" / (s.id + ".png"), to_image8(s.image));
    write_png(root / "masks" / (s.id + ".png"), to_image8(s.mask));
  }
}

// ---------------------------------------------------------------- manifest

Pairing pair_directory(const fs::path& images, const fs::path& masks) {
  for (const auto& dir : {images, masks}) {
    if (!fs::is_directory(dir)) throw ManifestError("directory not found: " + dir.string());
  }
  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return s;
  };
  std::map<std::string, std::vector<fs::path>> image_by_stem, mask_by_stem;
  for (const auto& e : fs::directory_iterator(images)) {
    const auto ext = lower(e.path().extension().string());
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) {
      image_by_stem[e.path().stem().string()].push_back(e.path());
    }
  }
  for (const auto& e : fs::directory_iterator(masks)) {
    if (e.is_regular_file() && lower(e.path().extension().string()) == ".png") {
      mask_by_stem[e.path().stem().string()].push_back(e.path());
    }
  }
  Pairing p;
  for (const auto& [stem, files] : image_by_stem) {
    auto it = mask_by_stem.find(stem);
    if (files.size() > 1) {
      p.unpaired.push_back("image stem '" + stem + "' is ambiguous (" + std::to_string(files.size()) + " files)");
    } else if (it == mask_by_stem.end()) {
      p.unpaired.push_back("image without mask: " + files[0].string());
    } else {
      p.pairs.emplace_back(files[0], it->second[0]);
    }
  }
  for (const auto& [stem, files] : mask_by_stem) {
    if (!image_by_stem.contains(stem)) p.unpaired.push_back("mask without image: " + files[0].string());
  }
  return p;
}

DatasetManifest make_manifest(const Pairing& pairing, double train_fraction, std::uint64_t seed, TargetSize target) {
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < pairing.pairs.size(); ++i) {
    ids.push_back(pairing.pairs[i].first.stem().string());
    index[ids.back()] = i;
  }
  const auto split = split_dataset(ids, train_fraction, seed);
  DatasetManifest m;
  m.seed = seed;
  m.target = target;
  for (const auto& [list, tag] : {std::pair{&split.train, SplitTag::kTrain}, std::pair{&split.val, SplitTag::kVal}}) {
    for (const auto& id : *list) {
      const auto& [img, mask] = pairing.pairs[index.at(id)];
      m.entries.push_back({img, mask, tag});
    }
  }
  return m;
}

void write_manifest(const fs::path& file, const DatasetManifest& manifest) {
  const fs::path base = fs::absolute(file).parent_path();
  auto rel = [&](const fs::path& p) {
    std::error_code ec;
    auto r = fs::relative(fs::absolute(p), base, ec);
    return (ec || r.empty()) ? fs::absolute(p).generic_string() : r.generic_string();
  };
  nlohmann::ordered_json j;
  j["seed"] = manifest.seed;
  j["target_size"] = {manifest.target.height, manifest.target.width};
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    j["entries"].push_back({{"image", rel(e.image)},
                            {"mask", rel(e.mask)},
                            {"split", e.split == SplitTag::kTrain ? "train" : "val"}});
  }
  std::ofstream out(file);
  if (!out) throw IoError("cannot write manifest '" + file.string() + "'");
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ManifestError("manifest not found: " + file.string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    const fs::path base = fs::absolute(file).parent_path();
    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_absolute() ? path : base / path;
    };
    m.seed = j.at("seed").get<std::uint64_t>();
    m.target = {j.at("target_size").at(0).get<std::int64_t>(), j.at("target_size").at(1).get<std::int64_t>()};
    for (const auto& e : j.at("entries")) {
      const auto split = e.at("split").get<std::string>();
      if (split != "train" && split != "val") throw ManifestError("unknown split tag '" + split + "'");
      m.entries.push_back({resolve(e.at("image").get<std::string>()), resolve(e.at("mask").get<std::string>()),
                           split == "train" ? SplitTag::kTrain : SplitTag::kVal});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ManifestError("malformed manifest '" + file.string() + "': " + ex.what());
  }
  return m;
}

std::vector<Sample> load_split(const DatasetManifest& manifest, SplitTag split) {
  std::vector<const ManifestEntry*> picked;
  for (const auto& e : manifest.entries) {
    if (e.split == split) picked.push_back(&e);
  }
  std::vector<Sample> out(picked.size());
  parallel_for(picked.size(), [&](std::size_t i) {
    out[i] = load_sample(picked[i]->image, picked[i]->mask, manifest.target);
  });
  return out;
}

}  // namespace floodseg
