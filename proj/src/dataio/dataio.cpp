#include "osteo/dataio/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "osteo/diffcore/errors.hpp"

namespace osteo::dataio {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view segment_name(Segment s) {
  switch (s) {
    case Segment::Ulna: return "ulna";
    case Segment::Radius: return "radius";
    case Segment::M1: return "M1";
    case Segment::M2: return "M2";
    case Segment::M3: return "M3";
    case Segment::M4: return "M4";
    case Segment::M5: return "M5";
  }
  return "unknown";
}

std::optional<Segment> segment_from_name(std::string_view name) {
  for (auto s : kAllSegments)
    if (segment_name(s) == name) return s;
  return std::nullopt;
}

void AnnotatedImage::validate() const {
  if (annotations.empty()) throw ContractError(id + ": no annotations");
  if (annotations.size() != weights.size()) throw DimensionError(id + ": one weight per annotation required");
  double total = 0.0;
  for (double b : weights) {
    if (b < 0.0) throw ContractError(id + ": negative annotation weight");
    total += b;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError(id + ": annotation weights must sum to 1");
  for (const auto& a : annotations) {
    if (a.height != image.height || a.width != image.width) {
      throw DimensionError(id + ": annotation size differs from image");
    }
  }
}

std::vector<BonePatch> extract_patches(const Image& image, const LabelMap& mask,
                                       const std::string& subject_id, std::size_t pad) {
  if (mask.height != image.height || mask.width != image.width) {
    throw DimensionError("extract_patches: mask " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " vs image " + std::to_string(image.height) +
                         "x" + std::to_string(image.width));
  }
  std::vector<BonePatch> out;
  for (Segment seg : kAllSegments) {
    const auto cls = static_cast<std::uint8_t>(seg);
    std::size_t r0 = image.height, r1 = 0, c0 = image.width, c1 = 0;
    bool found = false;
    for (std::size_t r = 0; r < mask.height; ++r)
      for (std::size_t c = 0; c < mask.width; ++c)
        if (mask.at(r, c) == cls) {
          found = true;
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
    if (!found) continue;
    BBox box;
    box.row = r0 >= pad ? r0 - pad : 0;
    box.col = c0 >= pad ? c0 - pad : 0;
    box.height = std::min(r1 + pad, image.height - 1) - box.row + 1;
    box.width = std::min(c1 + pad, image.width - 1) - box.col + 1;
    BonePatch p;
    p.segment = seg;
    p.bbox = box;
    p.subject_id = subject_id;
    p.crop = Image(box.height, box.width);
    for (std::size_t r = 0; r < box.height; ++r)
      for (std::size_t c = 0; c < box.width; ++c) {
        const std::size_t sr = box.row + r, sc = box.col + c;
        p.crop.at(r, c) = mask.at(sr, sc) == cls ? image.at(sr, sc) : 0.0;
      }
    out.push_back(std::move(p));
  }
  return out;
}

Split split_subjects(const std::vector<std::string>& ids, std::uint64_t seed) {
  if (ids.size() < 10) throw ContractError("split_subjects needs at least 10 subjects");
  std::vector<std::string> order = ids;
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw ContractError("split_subjects: duplicate subject id");
  }
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(order.size());
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * n));
  const auto n_test = static_cast<std::size_t>(std::llround(0.1 * n));
  Split s;
  s.val.assign(order.begin(), order.begin() + n_val);
  s.test.assign(order.begin() + n_val, order.begin() + n_val + n_test);
  s.train.assign(order.begin() + n_val + n_test, order.end());
  return s;
}

// ---- PGM ------------------------------------------------------------------

namespace {

struct RawPgm {
  std::size_t width = 0, height = 0;
  unsigned maxval = 0;
  std::vector<unsigned> samples;
};

void write_raw_pgm(const fs::path& path, std::size_t width, std::size_t height, unsigned maxval,
                   const std::vector<unsigned>& samples) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << '\n' << maxval << '\n';
  for (unsigned v : samples) {
    if (maxval > 255) os.put(static_cast<char>((v >> 8) & 0xFF));
    os.put(static_cast<char>(v & 0xFF));
  }
}

std::string next_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

RawPgm read_raw_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  if (next_token(is) != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  RawPgm p;
  p.width = std::stoul(next_token(is));
  p.height = std::stoul(next_token(is));
  p.maxval = static_cast<unsigned>(std::stoul(next_token(is)));
  if (p.maxval == 0 || p.maxval > 65535) throw std::runtime_error(path.string() + ": bad maxval");
  p.samples.resize(p.width * p.height);
  for (auto& v : p.samples) {
    int hi = is.get();
    if (p.maxval > 255) {
      int lo = is.get();
      v = (static_cast<unsigned>(hi) << 8) | static_cast<unsigned>(lo);
    } else {
      v = static_cast<unsigned>(hi);
    }
    if (!is) throw std::runtime_error(path.string() + ": truncated raster");
  }
  return p;
}

}  // namespace

void write_pgm(const fs::path& path, const Image& image, int bits) {
  const unsigned maxval = bits == 8 ? 255u : 65535u;
  std::vector<unsigned> samples(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    samples[i] = static_cast<unsigned>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * maxval));
  }
  write_raw_pgm(path, image.width, image.height, maxval, samples);
}

void write_pgm(const fs::path& path, const LabelMap& labels) {
  std::vector<unsigned> samples(labels.labels.begin(), labels.labels.end());
  write_raw_pgm(path, labels.width, labels.height, 255u, samples);
}

Image read_pgm_image(const fs::path& path) {
  RawPgm p = read_raw_pgm(path);
  Image img(p.height, p.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<double>(p.samples[i]) / p.maxval;
  return img;
}

LabelMap read_pgm_labels(const fs::path& path) {
  RawPgm p = read_raw_pgm(path);
  LabelMap m(p.height, p.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(p.samples[i]);
  return m;
}

// ---- dataset directory -----------------------------------------------------

void write_dataset(const fs::path& root, const std::vector<DatasetRecord>& records, const Split& split) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  fs::create_directories(root / "meta");
  for (const auto& r : records) {
    write_pgm(root / "images" / (r.id + ".pgm"), r.image);
    for (std::size_t j = 0; j < r.annotations.size(); ++j) {
      write_pgm(root / "masks" / (r.id + "_" + std::to_string(j) + ".pgm"), r.annotations[j]);
    }
    json meta = {{"id", r.id},
                 {"subject_id", r.subject_id},
                 {"weights", r.weights},
                 {"annotations", r.annotations.size()}};
    meta["t_score"] = r.t_score ? json(*r.t_score) : json(nullptr);
    std::ofstream(root / "meta" / (r.id + ".json")) << meta.dump(2) << '\n';
  }
  json manifest = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

Split read_manifest(const fs::path& root) {
  std::ifstream is(root / "manifest.json");
  if (!is) throw std::runtime_error("missing manifest: " + (root / "manifest.json").string());
  const json m = json::parse(is);
  Split s;
  s.train = m.at("train").get<std::vector<std::string>>();
  s.val = m.at("val").get<std::vector<std::string>>();
  s.test = m.at("test").get<std::vector<std::string>>();
  return s;
}

std::vector<DatasetRecord> read_dataset(const fs::path& root) {
  if (!fs::is_directory(root / "meta")) throw std::runtime_error("not a dataset directory: " + root.string());
  std::vector<fs::path> metas;
  for (const auto& e : fs::directory_iterator(root / "meta"))
    if (e.path().extension() == ".json") metas.push_back(e.path());
  std::sort(metas.begin(), metas.end());
  std::vector<DatasetRecord> out;
  out.reserve(metas.size());
  for (const auto& mp : metas) {
    std::ifstream is(mp);
    const json meta = json::parse(is);
    DatasetRecord r;
    r.id = meta.at("id").get<std::string>();
    r.subject_id = meta.at("subject_id").get<std::string>();
    r.weights = meta.at("weights").get<std::vector<double>>();
    if (!meta.at("t_score").is_null()) r.t_score = meta.at("t_score").get<double>();
    r.image = read_pgm_image(root / "images" / (r.id + ".pgm"));
    const auto m = meta.at("annotations").get<std::size_t>();
    for (std::size_t j = 0; j < m; ++j) {
      r.annotations.push_back(read_pgm_labels(root / "masks" / (r.id + "_" + std::to_string(j) + ".pgm")));
    }
    out.push_back(std::move(r));
  }
  return out;
}

DatasetRecord to_record(const HandSample& s) {
  return DatasetRecord{s.subject_id, s.subject_id, s.image, {s.mask}, {1.0}, s.t_score};
}

DatasetRecord to_record(const AnnotatedImage& a) {
  return DatasetRecord{a.id, a.id, a.image, a.annotations, a.weights, std::nullopt};
}

AnnotatedImage to_annotated(const DatasetRecord& r) {
  AnnotatedImage a{r.id, r.image, r.annotations, r.weights};
  a.validate();
  return a;
}

}  // namespace osteo::dataio
