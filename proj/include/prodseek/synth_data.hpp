#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "prodseek/dtsr.hpp"
#include "prodseek/image.hpp"
#include "prodseek/rng.hpp"
#include "prodseek/seekers.hpp"
#include "prodseek/tensor.hpp"

namespace prodseek {

struct RGB {
    double r = 0, g = 0, b = 0;
};

// Product attribute language shared by every domain (shared label space):
// ids [0,8) colors, [8,14) shapes, [14,17) sizes, rest filler.
struct Vocabulary {
    std::vector<std::string> words;
    std::vector<RGB> color_values;
    static constexpr int kColors = 8;
    static constexpr int kShapes = 6;
    static constexpr int kSizes = 3;

    enum class WordKind { color, shape, size_cls, filler };

    WordKind kind(int id) const {
        if (id < 0 || id >= static_cast<int>(words.size())) {
            throw std::invalid_argument("Vocabulary: id out of range");
        }
        if (id < kColors) return WordKind::color;
        if (id < kColors + kShapes) return WordKind::shape;
        if (id < kColors + kShapes + kSizes) return WordKind::size_cls;
        return WordKind::filler;
    }

    int color_id(int color) const { return color; }
    int shape_id(int shape) const { return kColors + shape; }
    int size_id(int size_cls) const { return kColors + kShapes + size_cls; }
    int size() const { return static_cast<int>(words.size()); }
};

inline const Vocabulary& default_vocabulary() {
    static const Vocabulary vocab = [] {
        Vocabulary v;
        v.words = {"red",  "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
                   "square", "circle", "triangle", "diamond", "cross", "ring",
                   "small", "medium", "large",
                   "the", "a", "please", "find", "show", "me", "product", "item",
                   "buy", "want", "nice", "new", "cheap", "good", "best", "this",
                   "that", "one", "with", "for", "in", "store", "shop"};
        v.color_values = {{0.85, 0.10, 0.10}, {0.10, 0.75, 0.15}, {0.10, 0.20, 0.85},
                          {0.90, 0.85, 0.10}, {0.55, 0.15, 0.70}, {0.90, 0.50, 0.10},
                          {0.10, 0.80, 0.80}, {0.85, 0.15, 0.60}};
        return v;
    }();
    return vocab;
}

// Scene recipe for one domain. The two defaults share the product vocabulary
// but differ in background palette, object brightness, noise, clutter and
// query phrasing — the controllable appearance/language gap.
struct DomainSpec {
    std::string name;
    std::vector<RGB> palette;
    int clutter_min = 0;
    int clutter_max = 2;
    double noise_sigma = 0.02;
    double object_brightness = 1.0;
    std::vector<int> attr_order = {0, 1, 2};  // positions of {color, shape, size} words
    double filler_rate = 0.15;
    int image_size = 64;

    void validate() const {
        if (name.empty()) throw std::invalid_argument("DomainSpec: name required");
        if (palette.empty()) throw std::invalid_argument("DomainSpec: palette required");
        if (clutter_min < 0 || clutter_max < clutter_min) {
            throw std::invalid_argument("DomainSpec: bad clutter range");
        }
        if (noise_sigma < 0) throw std::invalid_argument("DomainSpec: negative noise");
        if (!(object_brightness > 0)) throw std::invalid_argument("DomainSpec: brightness must be positive");
        std::vector<int> sorted = attr_order;
        std::sort(sorted.begin(), sorted.end());
        if (sorted != std::vector<int>{0, 1, 2}) {
            throw std::invalid_argument("DomainSpec: attr_order must permute {0,1,2}");
        }
        if (!(filler_rate >= 0 && filler_rate < 1)) throw std::invalid_argument("DomainSpec: filler_rate in [0,1)");
        if (image_size < 32) throw std::invalid_argument("DomainSpec: image_size too small");
    }
};

inline DomainSpec mall_spec() {
    DomainSpec s;
    s.name = "mall";
    s.palette = {{0.92, 0.92, 0.95}, {0.85, 0.88, 0.90}, {0.95, 0.90, 0.82}, {0.88, 0.85, 0.80}};
    s.clutter_min = 0;
    s.clutter_max = 2;
    s.noise_sigma = 0.02;
    s.object_brightness = 1.0;
    s.attr_order = {2, 0, 1};  // size color shape
    s.filler_rate = 0.15;
    return s;
}

inline DomainSpec live_spec() {
    DomainSpec s;
    s.name = "live";
    s.palette = {{0.12, 0.10, 0.15}, {0.08, 0.12, 0.10}, {0.15, 0.12, 0.08}, {0.10, 0.10, 0.12}};
    s.clutter_min = 1;
    s.clutter_max = 3;
    s.noise_sigma = 0.06;
    s.object_brightness = 0.55;
    s.attr_order = {0, 1, 2};  // color shape size
    s.filler_rate = 0.30;
    return s;
}

inline bool palettes_disjoint(const DomainSpec& a, const DomainSpec& b) {
    for (const RGB& x : a.palette) {
        for (const RGB& y : b.palette) {
            if (x.r == y.r && x.g == y.g && x.b == y.b) return false;
        }
    }
    return true;
}

struct RenderedObject {
    int color = 0;
    int shape = 0;
    int size_cls = 0;
    int radius = 0;  // half extent in pixels
    int cx = 0, cy = 0;
    int min_x = 0, max_x = 0, min_y = 0, max_y = 0;
    bool is_target = false;
};

struct Instance {
    std::string id;
    std::string domain;
    std::string split;
    Image image;
    std::vector<int> query_ids;
    std::string query_text;
    std::optional<BoxXYWH> box;
    // Generation-time metadata for oracle checks; not serialized.
    std::vector<RenderedObject> objects;
};

namespace detail {

inline bool shape_mask(int shape, int dx, int dy, int r) {
    switch (shape) {
        case 0: return std::abs(dx) <= r && std::abs(dy) <= r;                       // square
        case 1: return dx * dx + dy * dy <= r * r;                                   // circle
        case 2: return dy >= -r && dy <= r && std::abs(dx) * 2 <= (dy + r);          // triangle
        case 3: return std::abs(dx) + std::abs(dy) <= r;                             // diamond
        case 4: return (std::abs(dx) <= (r + 2) / 3 || std::abs(dy) <= (r + 2) / 3)  // cross
                           && std::abs(dx) <= r && std::abs(dy) <= r;
        case 5: {  // ring
            const int q = dx * dx + dy * dy;
            return q <= r * r && 4 * q >= r * r;
        }
        default: throw std::invalid_argument("shape_mask: unknown shape");
    }
}

// Half-extent range per size class, proportional to the canvas (the listed
// ranges are for the 64 px default).
inline std::pair<int, int> size_class_range(int size_cls, int image_size) {
    int lo = 0, hi = 0;
    switch (size_cls) {
        case 0: lo = 5, hi = 7; break;
        case 1: lo = 9, hi = 12; break;
        case 2: lo = 14, hi = 18; break;
        default: throw std::invalid_argument("size_class_range: unknown class");
    }
    lo = std::max(2, lo * image_size / 64);
    hi = std::max(lo, hi * image_size / 64);
    return {lo, hi};
}

// Draws the object and reports the tight bounds of the pixels it covered.
inline RenderedObject draw_object(Image& img, int color, int shape, int size_cls, int radius, int cx,
                                  int cy, const RGB& rgb) {
    RenderedObject obj;
    obj.color = color;
    obj.shape = shape;
    obj.size_cls = size_cls;
    obj.radius = radius;
    obj.cx = cx;
    obj.cy = cy;
    obj.min_x = img.width;
    obj.min_y = img.height;
    obj.max_x = -1;
    obj.max_y = -1;
    for (int y = std::max(0, cy - radius); y <= std::min(img.height - 1, cy + radius); ++y) {
        for (int x = std::max(0, cx - radius); x <= std::min(img.width - 1, cx + radius); ++x) {
            if (!shape_mask(shape, x - cx, y - cy, radius)) continue;
            img.at(y, x, 0) = rgb.r;
            img.at(y, x, 1) = rgb.g;
            img.at(y, x, 2) = rgb.b;
            obj.min_x = std::min(obj.min_x, x);
            obj.max_x = std::max(obj.max_x, x);
            obj.min_y = std::min(obj.min_y, y);
            obj.max_y = std::max(obj.max_y, y);
        }
    }
    if (obj.max_x < obj.min_x) throw std::runtime_error("draw_object: shape rendered no pixels");
    return obj;
}

inline bool bounds_overlap(const RenderedObject& a, const RenderedObject& b, int dilate) {
    return a.min_x - dilate <= b.max_x && b.min_x - dilate <= a.max_x && a.min_y - dilate <= b.max_y &&
           b.min_y - dilate <= a.max_y;
}

}  // namespace detail

inline BoxXYWH object_bounds_box(const RenderedObject& o, int image_size) {
    BoxXYWH b;
    b.x = (o.min_x + o.max_x + 1) / 2.0 / image_size;
    b.y = (o.min_y + o.max_y + 1) / 2.0 / image_size;
    b.w = static_cast<double>(o.max_x - o.min_x + 1) / image_size;
    b.h = static_cast<double>(o.max_y - o.min_y + 1) / image_size;
    return b;
}

// Renders one scene: palette background with a soft vertical gradient, one
// target product matching the query, clutter objects that each differ from
// the target in at least one attribute, then pixel noise. The box is the
// tight normalized bound of the target's rendered pixels (noise-independent).
inline Instance gen_instance(const DomainSpec& spec, std::uint64_t rng_seed,
                             const Vocabulary& vocab = default_vocabulary()) {
    spec.validate();
    Rng rng(rng_seed);
    const int n = spec.image_size;
    Instance inst;
    inst.domain = spec.name;
    inst.image = Image(n, n);

    auto place = [&](int size_cls) {
        const auto [lo, hi_class] = detail::size_class_range(size_cls, n);
        // Center must satisfy r+1 <= c <= n-r-2.
        const int hi = std::min(hi_class, (n - 3) / 2);
        const int r = rng.uniform_int(lo, hi);
        const int cx = rng.uniform_int(r + 1, n - r - 2);
        const int cy = rng.uniform_int(r + 1, n - r - 2);
        return std::tuple<int, int, int>{r, cx, cy};
    };
    auto tint = [&](int color) {
        RGB c = vocab.color_values[static_cast<std::size_t>(color)];
        c.r *= spec.object_brightness;
        c.g *= spec.object_brightness;
        c.b *= spec.object_brightness;
        return c;
    };

    // A crowded draw (big clutter on a small canvas) can run out of space;
    // re-roll the whole scene from the same stream, so generation stays a pure
    // function of the seed.
    int t_color = 0, t_shape = 0, t_size = 0;
    bool laid_out = false;
    for (int scene_try = 0; scene_try < 32 && !laid_out; ++scene_try) {
        inst.image = Image(n, n);
        inst.objects.clear();

        const RGB& bg = spec.palette[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(spec.palette.size()) - 1))];
        for (int y = 0; y < n; ++y) {
            const double shade = 1.0 - 0.12 * y / n;
            for (int x = 0; x < n; ++x) {
                inst.image.at(y, x, 0) = bg.r * shade;
                inst.image.at(y, x, 1) = bg.g * shade;
                inst.image.at(y, x, 2) = bg.b * shade;
            }
        }

        t_color = rng.uniform_int(0, Vocabulary::kColors - 1);
        t_shape = rng.uniform_int(0, Vocabulary::kShapes - 1);
        t_size = rng.uniform_int(0, Vocabulary::kSizes - 1);
        auto [tr, tcx, tcy] = place(t_size);
        RenderedObject target =
            detail::draw_object(inst.image, t_color, t_shape, t_size, tr, tcx, tcy, tint(t_color));
        target.is_target = true;
        inst.objects.push_back(target);

        const int clutter = rng.uniform_int(spec.clutter_min, spec.clutter_max);
        laid_out = true;
        for (int c = 0; c < clutter && laid_out; ++c) {
            int color = 0, shape = 0, size_cls = 0;
            int attr_tries = 0;
            do {
                color = rng.uniform_int(0, Vocabulary::kColors - 1);
                shape = rng.uniform_int(0, Vocabulary::kShapes - 1);
                size_cls = rng.uniform_int(0, Vocabulary::kSizes - 1);
                if (++attr_tries > 100) throw std::runtime_error("gen_instance: cannot draw distinct attributes");
            } while (color == t_color && shape == t_shape && size_cls == t_size);
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                auto [r, cx, cy] = place(size_cls);
                RenderedObject probe;
                probe.min_x = cx - r;
                probe.max_x = cx + r;
                probe.min_y = cy - r;
                probe.max_y = cy + r;
                bool clash = false;
                for (const RenderedObject& prev : inst.objects) {
                    if (detail::bounds_overlap(prev, probe, 2)) {
                        clash = true;
                        break;
                    }
                }
                if (clash) continue;
                inst.objects.push_back(
                    detail::draw_object(inst.image, color, shape, size_cls, r, cx, cy, tint(color)));
                placed = true;
            }
            laid_out = placed;
        }
    }
    if (!laid_out) throw std::runtime_error("gen_instance: scene layout failed after 32 attempts");

    if (spec.noise_sigma > 0) {
        for (double& v : inst.image.data) {
            v = std::clamp(v + rng.normal(0.0, spec.noise_sigma), 0.0, 1.0);
        }
    }

    inst.box = object_bounds_box(inst.objects.front(), n);

    const int attr_ids[3] = {vocab.color_id(t_color), vocab.shape_id(t_shape), vocab.size_id(t_size)};
    const int filler_lo = Vocabulary::kColors + Vocabulary::kShapes + Vocabulary::kSizes;
    auto maybe_filler = [&] {
        if (rng.uniform() < spec.filler_rate) {
            inst.query_ids.push_back(rng.uniform_int(filler_lo, vocab.size() - 1));
        }
    };
    for (int slot : spec.attr_order) {
        maybe_filler();
        inst.query_ids.push_back(attr_ids[slot]);
    }
    maybe_filler();
    std::string text;
    for (std::size_t i = 0; i < inst.query_ids.size(); ++i) {
        if (i) text += ' ';
        text += vocab.words[static_cast<std::size_t>(inst.query_ids[i])];
    }
    inst.query_text = std::move(text);
    return inst;
}

inline TensorF image_to_tensor(const Image& img) {
    TensorF t({img.height, img.width, 3});
    t.data = img.data;
    return t;
}

inline Image tensor_to_image(const TensorF& t) {
    if (t.shape.size() != 3 || t.shape[2] != 3) {
        throw std::invalid_argument("tensor_to_image: expected H×W×3, got " + shape_str(t.shape));
    }
    Image img(t.shape[0], t.shape[1]);
    img.data = t.data;
    return img;
}

struct ManifestRecord {
    std::string id;
    std::string image_path;  // relative to the manifest directory
    std::vector<int> query_ids;
    std::string query_text;
    std::optional<BoxXYWH> box;
    std::string split;
};

struct DatasetManifest {
    int version = 1;
    std::string domain;
    std::uint64_t seed = 0;
    bool sealed = false;
    std::filesystem::path dir;
    std::vector<ManifestRecord> records;
};

// Writes images (DTSR), a JSON-Lines manifest (header line + one record per
// instance, 8:1:1 train/val/test split), and — when boxes are withheld — a
// sealed sidecar `sealed_boxes.jsonl` that training code must never read.
inline DatasetManifest gen_dataset(const DomainSpec& spec, int n, std::uint64_t seed,
                                   const std::filesystem::path& out_dir, bool seal_boxes = false,
                                   const Vocabulary& vocab = default_vocabulary()) {
    spec.validate();
    if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw std::runtime_error("gen_dataset: cannot create " + (out_dir / "images").string());

    const int n_hold = n / 10;
    const int n_train = n - 2 * n_hold;

    DatasetManifest man;
    man.domain = spec.name;
    man.seed = seed;
    man.sealed = seal_boxes;
    man.dir = out_dir;

    std::ofstream mf(out_dir / "manifest.jsonl", std::ios::trunc);
    if (!mf) throw std::runtime_error("gen_dataset: cannot write manifest in " + out_dir.string());
    std::ofstream sealed;
    if (seal_boxes) {
        sealed.open(out_dir / "sealed_boxes.jsonl", std::ios::trunc);
        if (!sealed) throw std::runtime_error("gen_dataset: cannot write sealed boxes");
    }

    nlohmann::json head;
    head["version"] = 1;
    head["domain"] = spec.name;
    head["seed"] = seed;
    head["n"] = n;
    head["image_size"] = spec.image_size;
    head["noise_sigma"] = spec.noise_sigma;
    head["clutter"] = {spec.clutter_min, spec.clutter_max};
    head["filler_rate"] = spec.filler_rate;
    head["object_brightness"] = spec.object_brightness;
    head["attr_order"] = spec.attr_order;
    head["sealed_boxes"] = seal_boxes;
    {
        nlohmann::json pal = nlohmann::json::array();
        for (const RGB& c : spec.palette) pal.push_back({c.r, c.g, c.b});
        head["palette"] = pal;
    }
    mf << head.dump() << '\n';

    for (int i = 0; i < n; ++i) {
        Instance inst = gen_instance(spec, derive_seed(seed, static_cast<std::uint64_t>(i)), vocab);
        std::ostringstream idoss;
        idoss << spec.name << '-';
        idoss.width(6);
        idoss.fill('0');
        idoss << i;
        inst.id = idoss.str();
        inst.split = i < n_train ? "train" : (i < n_train + n_hold ? "val" : "test");

        const std::string rel = "images/" + inst.id + ".dtsr";
        dtsr::write(out_dir / rel, image_to_tensor(inst.image));

        nlohmann::json rec;
        rec["id"] = inst.id;
        rec["image"] = rel;
        rec["query_ids"] = inst.query_ids;
        rec["query_text"] = inst.query_text;
        rec["split"] = inst.split;
        if (seal_boxes) {
            rec["box"] = nullptr;
            nlohmann::json srec;
            srec["id"] = inst.id;
            srec["box"] = {inst.box->x, inst.box->y, inst.box->w, inst.box->h};
            sealed << srec.dump() << '\n';
        } else {
            rec["box"] = {inst.box->x, inst.box->y, inst.box->w, inst.box->h};
        }
        mf << rec.dump() << '\n';

        ManifestRecord mr;
        mr.id = inst.id;
        mr.image_path = rel;
        mr.query_ids = inst.query_ids;
        mr.query_text = inst.query_text;
        mr.box = seal_boxes ? std::nullopt : inst.box;
        mr.split = inst.split;
        man.records.push_back(std::move(mr));
    }
    if (!mf.good()) throw std::runtime_error("gen_dataset: manifest write failed");
    return man;
}

inline BoxXYWH parse_box_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 4) throw std::runtime_error(where + ": box must be a 4-array");
    BoxXYWH b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    if (!(b.w > 0) || !(b.h > 0) || b.x < 0 || b.x > 1 || b.y < 0 || b.y > 1 || b.w > 1 || b.h > 1) {
        throw std::runtime_error(where + ": box outside the unit square");
    }
    return b;
}

// Loads the manifest and (by default) the DTSR images. Validates id
// uniqueness and box bounds; parse failures name the offending line.
inline std::pair<DatasetManifest, std::vector<Instance>> load_dataset(
    const std::filesystem::path& manifest_path, bool load_images = true) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + manifest_path.string());
    const std::filesystem::path dir = manifest_path.parent_path();

    DatasetManifest man;
    man.dir = dir;
    std::vector<Instance> instances;
    std::unordered_set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("load_dataset: manifest line " + std::to_string(lineno) +
                                     " is corrupt: " + e.what());
        }
        const std::string where = "manifest line " + std::to_string(lineno);
        try {
            if (lineno == 1) {
                man.version = j.at("version").get<int>();
                if (man.version != 1) throw std::runtime_error("unsupported manifest version");
                man.domain = j.at("domain").get<std::string>();
                man.seed = j.at("seed").get<std::uint64_t>();
                man.sealed = j.value("sealed_boxes", false);
                continue;
            }
            ManifestRecord rec;
            rec.id = j.at("id").get<std::string>();
            rec.image_path = j.at("image").get<std::string>();
            rec.query_ids = j.at("query_ids").get<std::vector<int>>();
            rec.query_text = j.at("query_text").get<std::string>();
            rec.split = j.at("split").get<std::string>();
            if (!j.at("box").is_null()) rec.box = parse_box_json(j.at("box"), where);
            if (!seen.insert(rec.id).second) throw std::runtime_error("duplicate id " + rec.id);
            if (rec.query_ids.empty()) throw std::runtime_error("empty query for id " + rec.id);
            if (rec.split != "train" && rec.split != "val" && rec.split != "test") {
                throw std::runtime_error("unknown split " + rec.split);
            }

            Instance inst;
            inst.id = rec.id;
            inst.domain = man.domain;
            inst.split = rec.split;
            inst.query_ids = rec.query_ids;
            inst.query_text = rec.query_text;
            inst.box = rec.box;
            if (load_images) inst.image = tensor_to_image(dtsr::read(dir / rec.image_path));
            instances.push_back(std::move(inst));
            man.records.push_back(std::move(rec));
        } catch (const std::runtime_error&) {
            throw;
        } catch (const std::exception& e) {
            throw std::runtime_error("load_dataset: " + where + " is corrupt: " + e.what());
        }
    }
    if (lineno == 0) throw std::runtime_error("load_dataset: empty manifest");
    return {std::move(man), std::move(instances)};
}

// Evaluation-only access to withheld target boxes.
inline std::map<std::string, BoxXYWH> load_sealed_boxes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_sealed_boxes: cannot open " + path.string());
    std::map<std::string, BoxXYWH> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("load_sealed_boxes: line " + std::to_string(lineno) +
                                     " is corrupt: " + e.what());
        }
        out[j.at("id").get<std::string>()] =
            parse_box_json(j.at("box"), "sealed line " + std::to_string(lineno));
    }
    return out;
}

}  // namespace prodseek
