#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "p2i/benchkit.hpp"
#include "p2i/error.hpp"
#include "p2i/trainer.hpp"

namespace p2i::io {

namespace fs = std::filesystem;

// --- numeric formatting (stable across runs for byte-identical outputs) ---

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

// --- minimal grayscale PNG (8-bit, filter 0 rows) ---

namespace detail {

inline void put_u32be(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back((x >> 24) & 0xff);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back(x & 0xff);
}

inline void put_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
    put_u32be(out, (std::uint32_t)data.size());
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    std::uint32_t crc = (std::uint32_t)crc32(0L, out.data() + crc_start, (uInt)(4 + data.size()));
    put_u32be(out, crc);
}

} // namespace detail

inline std::vector<unsigned char> encode_gray_png(const std::vector<unsigned char>& pixels,
                                                  std::size_t w, std::size_t h) {
    require(pixels.size() == w * h, "ShapeMismatch", "pixel buffer size mismatch");
    std::vector<unsigned char> raw;
    raw.reserve(h * (w + 1));
    for (std::size_t r = 0; r < h; ++r) {
        raw.push_back(0); // filter type 0
        raw.insert(raw.end(), pixels.begin() + r * w, pixels.begin() + (r + 1) * w);
    }
    uLongf bound = compressBound((uLong)raw.size());
    std::vector<unsigned char> compressed(bound);
    require(compress2(compressed.data(), &bound, raw.data(), (uLong)raw.size(), 9) == Z_OK,
            "IoError", "zlib compression failed");
    compressed.resize(bound);

    std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<unsigned char> ihdr;
    detail::put_u32be(ihdr, (std::uint32_t)w);
    detail::put_u32be(ihdr, (std::uint32_t)h);
    ihdr.push_back(8); // bit depth
    ihdr.push_back(0); // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", compressed);
    detail::put_chunk(out, "IEND", {});
    return out;
}

inline void write_gray_png(const std::string& path, const std::vector<unsigned char>& pixels,
                           std::size_t w, std::size_t h) {
    auto bytes = encode_gray_png(pixels, w, h);
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "IoError", "cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    require(f.good(), "IoError", "short write to " + path);
}

struct GrayImage {
    std::size_t w = 0, h = 0;
    std::vector<unsigned char> pixels;
};

inline GrayImage read_gray_png(const std::string& path) {
    std::vector<char> bytes = read_file_bytes(path);
    require(bytes.size() > 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0, "IoError",
            path + " is not a PNG");
    std::size_t pos = 8;
    GrayImage img;
    std::vector<unsigned char> idat;
    auto u32 = [&](std::size_t p) {
        return (std::uint32_t(std::uint8_t(bytes[p])) << 24) |
               (std::uint32_t(std::uint8_t(bytes[p + 1])) << 16) |
               (std::uint32_t(std::uint8_t(bytes[p + 2])) << 8) |
               std::uint32_t(std::uint8_t(bytes[p + 3]));
    };
    while (pos + 8 <= bytes.size()) {
        std::uint32_t len = u32(pos);
        std::string type(bytes.begin() + pos + 4, bytes.begin() + pos + 8);
        require(pos + 12 + len <= bytes.size(), "IoError", "truncated PNG " + path);
        const unsigned char* data = reinterpret_cast<const unsigned char*>(bytes.data()) + pos + 8;
        if (type == "IHDR") {
            img.w = u32(pos + 8);
            img.h = u32(pos + 12);
            require(data[8] == 8 && data[9] == 0, "IoError",
                    path + ": only 8-bit grayscale PNG supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    std::vector<unsigned char> raw(img.h * (img.w + 1));
    uLongf raw_len = (uLongf)raw.size();
    require(uncompress(raw.data(), &raw_len, idat.data(), (uLong)idat.size()) == Z_OK &&
                raw_len == raw.size(),
            "IoError", "PNG inflate failed for " + path);
    img.pixels.resize(img.w * img.h);
    for (std::size_t r = 0; r < img.h; ++r) {
        require(raw[r * (img.w + 1)] == 0, "IoError", path + ": unsupported PNG row filter");
        std::memcpy(img.pixels.data() + r * img.w, raw.data() + r * (img.w + 1) + 1, img.w);
    }
    return img;
}

// --- ImageTensor <-> PNG (single channel, values on the 8-bit grid) ---

inline void save_image_png(const std::string& path, const ImageTensor& img) {
    require(img.shape().size() == 3 && img.dim(0) == 1, "ShapeMismatch",
            "PNG persistence supports single-channel images");
    std::size_t h = img.dim(1), w = img.dim(2);
    std::vector<unsigned char> px(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        double v01 = (img[i + 0] + 1.0) * 0.5;
        int b = (int)std::lround(v01 * 255.0);
        px[i] = (unsigned char)std::clamp(b, 0, 255);
    }
    write_gray_png(path, px, w, h);
}

inline ImageTensor load_image_png(const std::string& path) {
    GrayImage g = read_gray_png(path);
    ImageTensor img({1, g.h, g.w});
    for (std::size_t i = 0; i < g.pixels.size(); ++i)
        img[i] = -1.0 + 2.0 * double(g.pixels[i]) / 255.0;
    return img;
}

// Horizontal strip of equally sized images.
inline void save_image_strip_png(const std::string& path, const std::vector<ImageTensor>& imgs) {
    require(!imgs.empty(), "EmptyResults", "no images for strip");
    std::size_t h = imgs[0].dim(1), w = imgs[0].dim(2);
    std::vector<unsigned char> px(h * w * imgs.size());
    for (std::size_t k = 0; k < imgs.size(); ++k) {
        require(imgs[k].dim(1) == h && imgs[k].dim(2) == w, "ShapeMismatch",
                "strip images differ in size");
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double v01 = (imgs[k].at(0, r, c) + 1.0) * 0.5;
                int b = (int)std::lround(v01 * 255.0);
                px[r * (w * imgs.size()) + k * w + c] = (unsigned char)std::clamp(b, 0, 255);
            }
    }
    write_gray_png(path, px, w * imgs.size(), h);
}

// --- flat float32 arrays with a JSON shape sidecar ---

inline void save_latent(const std::string& base, const Tensor& t) {
    std::vector<char> blob;
    blob.reserve(t.size() * sizeof(float));
    for (double v : t.vec()) {
        float f = (float)v;
        const char* b = reinterpret_cast<const char*>(&f);
        blob.insert(blob.end(), b, b + sizeof(float));
    }
    write_file_bytes(base + ".f32", blob);
    nlohmann::json j{{"shape", t.shape()}, {"dtype", "float32"}};
    std::ofstream f(base + ".json");
    require(f.good(), "IoError", "cannot open " + base + ".json");
    f << j.dump() << "\n";
}

inline Tensor load_latent(const std::string& base) {
    std::ifstream jf(base + ".json");
    require(jf.good(), "IoError", "missing latent sidecar " + base + ".json");
    nlohmann::json j = nlohmann::json::parse(jf);
    std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
    std::vector<char> blob = read_file_bytes(base + ".f32");
    require(blob.size() == Tensor::count(shape) * sizeof(float), "IoError",
            "latent blob size mismatch for " + base);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
        float f;
        std::memcpy(&f, blob.data() + i * sizeof(float), sizeof(float));
        t[i] = (double)f;
    }
    return t;
}

// --- classifier checkpoints ---

inline void to_json(nlohmann::json& j, const ClassifierSpec& s) {
    j = {{"num_classes", s.num_classes}, {"in_ch", s.in_ch},
         {"block_widths", s.block_widths}, {"feat_dim", s.feat_dim},
         {"image_hw", s.image_hw}};
}

inline ClassifierSpec classifier_spec_from_json(const nlohmann::json& j) {
    ClassifierSpec s;
    s.num_classes = j.value("num_classes", s.num_classes);
    s.in_ch = j.value("in_ch", s.in_ch);
    s.block_widths = j.value("block_widths", s.block_widths);
    s.feat_dim = j.value("feat_dim", s.feat_dim);
    s.image_hw = j.value("image_hw", s.image_hw);
    return s;
}

inline void save_classifier(ClassifierHandle& clf, const std::string& base) {
    auto params = clf.params();
    std::vector<char> blob = params_to_blob(params);
    write_file_bytes(base + ".bin", blob);
    nlohmann::json spec_json;
    to_json(spec_json, clf.spec());
    nlohmann::json manifest{
        {"kind", "classifier"}, {"spec", spec_json}, {"blob_hash", hash_bytes(blob)}};
    std::ofstream out(base + ".json");
    require(out.good(), "IoError", "cannot open " + base + ".json");
    out << manifest.dump(2) << "\n";
}

inline ClassifierHandle load_classifier(const std::string& base) {
    std::ifstream in(base + ".json");
    require(in.good(), "IoError", "missing classifier manifest " + base + ".json");
    nlohmann::json manifest = nlohmann::json::parse(in);
    require(manifest.value("kind", "") == std::string("classifier"), "ManifestMismatch",
            "not a classifier checkpoint");
    ClassifierHandle clf(classifier_spec_from_json(manifest.at("spec")), 0);
    std::vector<char> blob = read_file_bytes(base + ".bin");
    require(hash_bytes(blob) == manifest.value("blob_hash", 0ULL), "IoError",
            "classifier blob hash mismatch");
    auto params = clf.params();
    blob_to_params(blob, params);
    return clf;
}

// --- dataset persistence: PNG images + index.csv + latent sidecars ---

inline std::string sanitized(const std::string& ref) {
    std::string s = ref;
    for (char& c : s)
        if (c == '/') c = '_';
    return s;
}

inline void save_dataset(const std::string& dir, const Dataset& data, const std::string& split) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "latents");
    std::ofstream idx(fs::path(dir) / ("index_" + split + ".csv"));
    require(idx.good(), "IoError", "cannot write dataset index in " + dir);
    idx << "path,identity,split,ground_truth_latent_path\n";
    for (const auto& s : data) {
        std::string stem = sanitized(s.ref);
        std::string img_rel = "images/" + stem + ".png";
        std::string lat_rel = "latents/" + stem;
        save_image_png((fs::path(dir) / img_rel).string(), s.image);
        save_latent((fs::path(dir) / lat_rel).string(), s.latent.values);
        idx << img_rel << "," << s.identity << "," << split << "," << lat_rel << ".f32\n";
    }
}

inline Dataset load_dataset(const std::string& dir, const std::string& split,
                            const std::vector<std::string>& refs,
                            const std::vector<int>& identities) {
    Dataset out;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        std::string stem = sanitized(refs[i]);
        LabeledImage s;
        s.ref = refs[i];
        s.identity = identities[i];
        s.image = load_image_png((fs::path(dir) / "images" / (stem + ".png")).string());
        s.latent.values = load_latent((fs::path(dir) / "latents" / stem).string());
        out.push_back(std::move(s));
    }
    (void)split;
    return out;
}

// Reads index_<split>.csv back into (refs, identities) in file order.
inline std::pair<std::vector<std::string>, std::vector<int>> load_index(const std::string& dir,
                                                                        const std::string& split) {
    std::ifstream idx(fs::path(dir) / ("index_" + split + ".csv"));
    require(idx.good(), "IoError", "missing dataset index for split " + split + " in " + dir);
    std::string line;
    std::getline(idx, line); // header
    std::vector<std::string> refs;
    std::vector<int> ids;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::size_t c1 = line.find(',');
        std::size_t c2 = line.find(',', c1 + 1);
        std::string path = line.substr(0, c1);
        ids.push_back(std::stoi(line.substr(c1 + 1, c2 - c1 - 1)));
        // recover the ref from the stored image path: images/<stem>.png
        std::string stem = path.substr(7, path.size() - 7 - 4);
        std::size_t us = stem.find('_');
        refs.push_back(stem.substr(0, us) + "/" + stem.substr(us + 1));
    }
    return {refs, ids};
}

} // namespace p2i::io
